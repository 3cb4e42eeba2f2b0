import logging

from ..allocator import Allocator, AllocatorKind, check_budget
from common.pipeline_model import Allocation, MachineSpec, PipelineSpec, WorkloadSpec
from environment.rl_env import even_allocation


def alloc_even(pipeline: PipelineSpec, machine: MachineSpec) -> Allocation:
    check_budget(pipeline, machine)
    return even_allocation(pipeline, machine.total_cpus)


class EvenSplitAllocator(Allocator):
    """A human's best guess: CPUs divided evenly, remainder to the earliest stages."""

    kind = AllocatorKind.EVEN_SPLIT

    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)

    def allocate(self, pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec) -> Allocation:
        return alloc_even(pipeline, machine)
