import logging
import math
from dataclasses import replace
from typing import Optional

from ..allocator import (
    Allocator,
    AllocatorKind,
    EstimatorBias,
    check_budget,
    marginal_greedy,
)
from common.pipeline_model import Allocation, MachineSpec, PipelineSpec, WorkloadSpec
from simulator.pipeline_simulator import stage_rate

DEFAULT_PREFETCH_UNITS_PER_CPU = 0.25


def alloc_greedy_estimated(
    pipeline: PipelineSpec,
    machine: MachineSpec,
    workload: WorkloadSpec,
    bias: Optional[EstimatorBias] = None,
    prefetch_units_per_cpu: float = DEFAULT_PREFETCH_UNITS_PER_CPU,
) -> Allocation:
    """Hill-climb on estimated stage costs, then prefetch as much as the CPU
    count suggests without looking at memory."""
    check_budget(pipeline, machine)
    bias = bias or EstimatorBias()
    estimated = [
        replace(stage, cost_per_item=stage.cost_per_item * bias.factor(stage.kind))
        for stage in pipeline.cpu_stages
    ]
    cpus = marginal_greedy(
        (1,) * pipeline.cpu_knobs,
        machine.total_cpus,
        lambda i, c: stage_rate(estimated[i], c, machine, pipeline.sample_size_mb),
    )
    prefetch = 0
    if pipeline.has_prefetch:
        prefetch = max(1, math.floor(prefetch_units_per_cpu * machine.total_cpus))
    return Allocation(cpus=cpus, prefetch_units=prefetch)


class GreedyEstimatedAllocator(Allocator):
    kind = AllocatorKind.GREEDY_ESTIMATED

    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)
        try:
            self._bias = EstimatorBias(self._params["bias"]) if "bias" in self._params else EstimatorBias()
        except ValueError as e:
            raise ValueError(f"Invalid greedy_estimated bias: {e}")
        self._prefetch_units_per_cpu = float(
            self._params.get("prefetch_units_per_cpu", DEFAULT_PREFETCH_UNITS_PER_CPU)
        )

    def allocate(self, pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec) -> Allocation:
        allocation = alloc_greedy_estimated(
            pipeline, machine, workload, self._bias, self._prefetch_units_per_cpu
        )
        self._logger.debug(f"Greedy estimate for {machine.total_cpus} CPUs: {allocation.as_dict()}")
        return allocation
