import logging

from ..allocator import Allocator, AllocatorKind, check_budget
from common.pipeline_model import Allocation, MachineSpec, PipelineSpec, WorkloadSpec


def alloc_single_cpu(pipeline: PipelineSpec, machine: MachineSpec) -> Allocation:
    check_budget(pipeline, machine)
    return Allocation(
        cpus=(1,) * pipeline.cpu_knobs,
        prefetch_units=1 if pipeline.has_prefetch else 0,
    )


class SingleCpuAllocator(Allocator):
    """One CPU per stage, no parallelism: the "Unoptimized" normalization base."""

    kind = AllocatorKind.SINGLE_CPU

    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)

    def allocate(self, pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec) -> Allocation:
        return alloc_single_cpu(pipeline, machine)
