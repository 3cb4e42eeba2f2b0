import itertools
import logging
from typing import Generator

import numpy as np

from ..allocator import Allocator, AllocatorKind, PREFETCH_CAP, check_budget, evaluate, true_rate_fn
from common.pipeline_model import Allocation, MachineSpec, PipelineSpec, WorkloadSpec
from environment.rl_env import allocation_space_size
from simulator.pipeline_simulator import pipeline_overlap, prefetch_unit_mb

SEARCH_LIMIT = 1_000_000

logger = logging.getLogger(__name__)


class SearchSpaceTooLargeError(ValueError):
    pass


def compositions(total: int, parts: int) -> Generator[tuple[int, ...], None, None]:
    """Every tuple of `parts` positive integers summing to `total`, in lexicographic order."""
    if parts < 1 or total < parts:
        return
    # cut points between unit CPUs; lexicographic cuts give lexicographic parts
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield tuple(b - a for a, b in zip(bounds, bounds[1:]))


def alloc_oracle_bruteforce(
    pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec
) -> tuple[Allocation, float]:
    """Exhaustive search over every split of the full budget and every prefetch
    level, maximizing the noiseless reward. Ties go to the lexicographically
    smallest (cpus, prefetch_units)."""
    check_budget(pipeline, machine)
    pipeline = pipeline.without_noise()
    k, budget = pipeline.cpu_knobs, machine.total_cpus
    try:
        size = allocation_space_size(budget - k, k, limit=SEARCH_LIMIT)
    except OverflowError:
        raise SearchSpaceTooLargeError(
            f"{budget} CPUs over {k} stages exceeds {SEARCH_LIMIT} allocations, use oracle_greedy_true instead"
        )
    logger.debug(f"Searching {size} CPU splits")

    splits = np.array(list(compositions(budget, k)), dtype=np.int64)
    rate_of = true_rate_fn(pipeline, machine)
    table = np.array([[rate_of(i, c) for c in range(1, budget - k + 2)] for i in range(k)])
    slowest = table[np.arange(k), splits - 1].min(axis=1)

    stages = pipeline.cpu_stages
    fixed = sum(s.mem_fixed for s in pipeline.stages)
    per_replica = np.array([s.mem_per_replica for s in stages])
    base_mem = fixed + splits @ per_replica
    unit = prefetch_unit_mb(pipeline, workload)

    best_reward = np.full(len(splits), -np.inf)
    best_units = np.zeros(len(splits), dtype=np.int64)
    for units in range(PREFETCH_CAP + 1 if pipeline.has_prefetch else 1):
        mem = base_mem + units * unit
        achieved = np.minimum(pipeline_overlap(pipeline, units) * slowest, workload.target_rate)
        reward = achieved / workload.target_rate * np.maximum(0.0, 1.0 - mem / machine.total_mem_mb)
        reward[mem > machine.total_mem_mb] = -np.inf
        better = reward > best_reward
        best_reward[better] = reward[better]
        best_units[better] = units

    if not np.isfinite(best_reward).any():
        # nothing fits in memory; fall back to the cheapest split without prefetch
        winner = int(np.argmin(base_mem))
        allocation = Allocation(cpus=tuple(int(c) for c in splits[winner]))
    else:
        winner = int(np.argmax(best_reward))
        allocation = Allocation(
            cpus=tuple(int(c) for c in splits[winner]), prefetch_units=int(best_units[winner])
        )
    return allocation, evaluate(pipeline, allocation, machine, workload).achieved_rate


class OracleBruteForceAllocator(Allocator):
    kind = AllocatorKind.ORACLE_BRUTE_FORCE

    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)

    def allocate(self, pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec) -> Allocation:
        searches = self.shared_cache("ORACLE_SEARCHES")
        key = repr((pipeline.without_noise(), machine, workload))
        if key not in searches:
            searches[key] = alloc_oracle_bruteforce(pipeline, machine, workload)
        allocation, rate = searches[key]
        self._logger.info(f"Oracle allocation {allocation.cpus} prefetch {allocation.prefetch_units}: {rate:.6g} samples/s")
        return allocation
