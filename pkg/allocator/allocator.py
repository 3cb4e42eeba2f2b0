import logging
from abc import abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from base_module.module import Module
from common.module_loader import load_module_class
from common.pipeline_model import (
    Allocation,
    MachineSpec,
    PipelineSpec,
    StageKind,
    ThroughputReport,
    WorkloadSpec,
)
from environment.rl_env import compute_reward
from simulator.pipeline_simulator import (
    AllocationError,
    max_prefetch_units,
    memory_usage,
    pipeline_overlap,
    pipeline_throughput,
    prefetch_unit_mb,
    stage_rate,
)

PREFETCH_CAP = 64


class AllocatorKind(str, Enum):
    SINGLE_CPU = "single_cpu"
    EVEN_SPLIT = "even_split"
    GREEDY_ESTIMATED = "greedy_estimated"
    MAXIMIN_SOLVER = "maximin_solver"
    ORACLE_BRUTE_FORCE = "oracle_brute_force"
    ORACLE_GREEDY_TRUE = "oracle_greedy_true"


@dataclass(frozen=True)
class EstimatorBias:
    """Multiplicative error a baseline makes when estimating stage cost."""

    factors: dict = field(default_factory=lambda: {StageKind.UDF_MAP: 0.4})

    def __post_init__(self):
        factors = {StageKind(kind): float(value) for kind, value in self.factors.items()}
        if any(value <= 0 for value in factors.values()):
            raise ValueError(f"Bias factors must be > 0: {factors}")
        object.__setattr__(self, "factors", factors)

    def factor(self, kind: StageKind) -> float:
        return self.factors.get(kind, 1.0)

    @classmethod
    def unbiased(cls) -> "EstimatorBias":
        return cls(factors={})


def check_budget(pipeline: PipelineSpec, machine: MachineSpec):
    if machine.total_cpus < pipeline.cpu_knobs:
        raise AllocationError(
            f"{machine.total_cpus} CPUs cannot give each of {pipeline.cpu_knobs} stages one CPU"
        )


def true_rate_fn(pipeline: PipelineSpec, machine: MachineSpec) -> Callable[[int, int], float]:
    stages = pipeline.cpu_stages
    return lambda i, cpus: stage_rate(stages[i], cpus, machine, pipeline.sample_size_mb)


def marginal_greedy(
    start: tuple[int, ...], budget: int, rate_of: Callable[[int, int], float]
) -> tuple[int, ...]:
    """Hand one CPU at a time to the slowest stage (lowest index on ties)."""
    cpus = list(start)
    rates = [rate_of(i, c) for i, c in enumerate(cpus)]
    while sum(cpus) < budget:
        slowest = int(np.argmin(rates))
        cpus[slowest] += 1
        rates[slowest] = rate_of(slowest, cpus[slowest])
    return tuple(cpus)


def prefetch_limit(
    pipeline: PipelineSpec, cpus: tuple[int, ...], workload: WorkloadSpec, mem_limit_mb: float
) -> int:
    return max_prefetch_units(pipeline, cpus, workload, mem_limit_mb, cap=PREFETCH_CAP)


def best_prefetch(
    pipeline: PipelineSpec, cpus: tuple[int, ...], machine: MachineSpec, workload: WorkloadSpec
) -> int:
    """Prefetch level maximizing the noiseless reward for fixed CPUs."""
    if not pipeline.has_prefetch:
        return 0
    limit = prefetch_limit(pipeline, cpus, workload, machine.total_mem_mb)
    rates = true_rate_fn(pipeline, machine)
    slowest = min(rates(i, c) for i, c in enumerate(cpus))
    base = memory_usage(pipeline, Allocation(cpus=cpus), workload)
    unit = prefetch_unit_mb(pipeline, workload)
    best_units, best_reward = 0, -1.0
    for units in range(limit + 1):
        achieved = min(pipeline_overlap(pipeline, units) * slowest, workload.target_rate)
        reward = compute_reward(
            achieved / workload.target_rate, base + units * unit, machine.total_mem_mb
        )
        if reward > best_reward:
            best_units, best_reward = units, reward
    return best_units


def evaluate(
    pipeline: PipelineSpec, alloc: Allocation, machine: MachineSpec, workload: WorkloadSpec
) -> ThroughputReport:
    """Noiseless simulator reading of an allocation."""
    return pipeline_throughput(pipeline.without_noise(), alloc, machine, workload)


class Allocator(Module):
    kind: AllocatorKind

    def __init__(self, module_name, params: dict, global_shared_state, log_level):
        super().__init__(module_name, global_shared_state, log_level)
        self._params = params or {}

    @abstractmethod
    def allocate(
        self, pipeline: PipelineSpec, machine: MachineSpec, workload: WorkloadSpec
    ) -> Allocation:
        pass

    def __str__(self):
        return self.kind.value


def load_allocator(kind, params: dict = None, global_shared_state=None, log_level=logging.INFO) -> Allocator:
    kind = AllocatorKind(kind)
    allocator_class = load_module_class(kind.value, "allocator")
    return allocator_class(params or {}, global_shared_state if global_shared_state is not None else {}, log_level)
