import logging

from ..allocator import (
    Allocator,
    AllocatorKind,
    best_prefetch,
    check_budget,
    evaluate,
    marginal_greedy,
    true_rate_fn,
)
from common.pipeline_model import Allocation, MachineSpec, PipelineSpec, WorkloadSpec


def alloc_oracle_greedy_true(
    pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec
) -> tuple[Allocation, float]:
    check_budget(pipeline, machine)
    cpus = marginal_greedy((1,) * pipeline.cpu_knobs, machine.total_cpus, true_rate_fn(pipeline, machine))
    allocation = Allocation(cpus=cpus, prefetch_units=best_prefetch(pipeline, cpus, machine, workload))
    return allocation, evaluate(pipeline, allocation, machine, workload).achieved_rate


class OracleGreedyTrueAllocator(Allocator):
    """Marginal greedy on the true noiseless rates; optimal for the min-rate objective."""

    kind = AllocatorKind.ORACLE_GREEDY_TRUE

    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)

    def allocate(self, pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec) -> Allocation:
        allocation, _ = alloc_oracle_greedy_true(pipeline.without_noise(), machine, workload)
        return allocation
