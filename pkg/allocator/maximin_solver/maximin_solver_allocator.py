import logging
import math

import cvxpy as cp
import numpy as np

from ..allocator import (
    Allocator,
    AllocatorKind,
    check_budget,
    marginal_greedy,
    prefetch_limit,
    true_rate_fn,
)
from common.pipeline_model import Allocation, MachineSpec, PipelineSpec, StageKind, WorkloadSpec

logger = logging.getLogger(__name__)

MEMORY_HEADROOM = 0.9
LEVEL_TOLERANCE = 1e-6


def relaxed_level(pipeline: PipelineSpec, machine: MachineSpec) -> float:
    """Best min-rate of the continuous problem: max t s.t. t <= rate_i(x_i), sum x <= budget, x >= 1."""
    stages = pipeline.cpu_stages
    x = cp.Variable(len(stages))
    t = cp.Variable()
    constraints = [cp.sum(x) <= machine.total_cpus, x >= 1]
    for i, stage in enumerate(stages):
        per_cpu = machine.cpu_ghz / stage.cost_per_item
        if stage.scalable:
            constraints.append(t <= per_cpu * x[i])
        else:
            constraints.append(t <= per_cpu)
        if stage.kind is StageKind.DISK_LOAD:
            constraints.append(t <= machine.io_bandwidth_mbps / pipeline.sample_size_mb)
    problem = cp.Problem(cp.Maximize(t), constraints)
    problem.solve()
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        logger.warning(f"Relaxation ended with status {problem.status}, scanning all levels")
        return math.inf
    return float(t.value)


def _rate_table(pipeline: PipelineSpec, machine: MachineSpec) -> np.ndarray:
    rate_of = true_rate_fn(pipeline, machine)
    most = machine.total_cpus - pipeline.cpu_knobs + 1
    return np.array(
        [[rate_of(i, c) for c in range(1, most + 1)] for i in range(pipeline.cpu_knobs)]
    )


def _cpus_for_level(table: np.ndarray, level: float):
    reaches = table >= level
    if not np.all(reaches.any(axis=1)):
        return None
    return tuple(int(np.argmax(row)) + 1 for row in reaches)


def alloc_maximin_solver(
    pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec
) -> Allocation:
    check_budget(pipeline, machine)
    bound = relaxed_level(pipeline, machine)
    table = _rate_table(pipeline, machine)
    budget = machine.total_cpus

    # round the relaxation down to the best level integer CPU counts can hold
    start = (1,) * pipeline.cpu_knobs
    for level in np.unique(table)[::-1]:
        if level > bound * (1 + LEVEL_TOLERANCE) + LEVEL_TOLERANCE:
            continue
        cpus = _cpus_for_level(table, level)
        if cpus is not None and sum(cpus) <= budget:
            start = cpus
            break

    cpus = marginal_greedy(start, budget, true_rate_fn(pipeline, machine))
    prefetch = prefetch_limit(pipeline, cpus, workload, MEMORY_HEADROOM * machine.total_mem_mb)
    return Allocation(cpus=cpus, prefetch_units=prefetch)


class MaximinSolverAllocator(Allocator):
    """Solver baseline: LP relaxation of the max-min rate problem plus
    integer repair, with memory-aware prefetch."""

    kind = AllocatorKind.MAXIMIN_SOLVER

    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)

    def allocate(self, pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec) -> Allocation:
        return alloc_maximin_solver(pipeline.without_noise(), machine, workload)
