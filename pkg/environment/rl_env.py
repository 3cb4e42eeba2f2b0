import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from base_module.module import Module
from common.pipeline_model import (
    Allocation,
    MachineSpec,
    PipelineSpec,
    ResizeEvent,
    ThroughputReport,
    WorkloadSpec,
)
from simulator.pipeline_simulator import (
    apply_resize,
    max_prefetch_units,
    pipeline_throughput,
    prefetch_unit_mb,
    validate_allocation,
)

ACTION_DELTAS = (-5, -1, 0, 1, 5)
MAINTAIN_DIGIT = 2

LATENCY_REF_S = 1.0
BANDWIDTH_REF_MBPS = 25600.0
GHZ_REF = 3.0
STATIC_FACTORS = 6

EVENT_NONE = "none"
EVENT_RESIZE = "resize"
EVENT_OOM = "oom"
EVENT_RELAUNCH = "relaunch"


class ActionError(ValueError):
    pass


class EnvError(ValueError):
    pass


class ResetPolicy(str, Enum):
    EVEN_SPLIT = "even_split"
    LAST_SAFE = "last_safe"


@dataclass(frozen=True, slots=True)
class EnvConfig:
    resize_schedule: tuple[ResizeEvent, ...] = ()
    oom_downtime_steps: int = 20
    reset_policy_after_oom: ResetPolicy = ResetPolicy.EVEN_SPLIT
    noise_seed: Optional[int] = 0
    step_time_s: float = 0.1
    mem_guard: bool = False
    mem_guard_frac: float = 0.95
    relaunch_downtime_steps: int = 50

    def __post_init__(self):
        object.__setattr__(self, "resize_schedule", tuple(self.resize_schedule))
        object.__setattr__(
            self, "reset_policy_after_oom", ResetPolicy(self.reset_policy_after_oom)
        )
        steps = [event.step for event in self.resize_schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"Resize steps must be strictly increasing: {steps}")
        if self.oom_downtime_steps < 1:
            raise ValueError("oom_downtime_steps must be >= 1")
        if self.relaunch_downtime_steps < 0:
            raise ValueError("relaunch_downtime_steps must be >= 0")
        if not 0 < self.mem_guard_frac <= 1:
            raise ValueError("mem_guard_frac must be in (0, 1]")

    def resize_at(self, step: int) -> Optional[ResizeEvent]:
        for event in self.resize_schedule:
            if event.step == step:
                return event
        return None


@dataclass(frozen=True, slots=True)
class EnvState:
    throughput_norm: float
    free_cpus_frac: float
    free_mem_frac: float
    model_latency_norm: float
    bandwidth_norm: float
    ghz_norm: float
    alloc_frac: tuple[float, ...]

    def as_vector(self) -> np.ndarray:
        return np.array(
            (
                self.throughput_norm,
                self.free_cpus_frac,
                self.free_mem_frac,
                self.model_latency_norm,
                self.bandwidth_norm,
                self.ghz_norm,
            )
            + self.alloc_frac,
            dtype=np.float64,
        )


@dataclass(frozen=True, slots=True)
class StepOutcome:
    state: EnvState
    reward: float
    crashed: bool
    info: dict = field(default_factory=dict)


def action_space_size(r: int) -> int:
    return len(ACTION_DELTAS) ** r


def encode_action(deltas: Sequence[int]) -> int:
    index = 0
    for delta in deltas:
        try:
            digit = ACTION_DELTAS.index(int(delta))
        except ValueError:
            raise ActionError(f"Invalid delta {delta}, expected one of {ACTION_DELTAS}")
        index = index * len(ACTION_DELTAS) + digit
    return index


def decode_action(index: int, r: int) -> tuple[int, ...]:
    if not 0 <= index < action_space_size(r):
        raise ActionError(f"Action index {index} outside [0, {action_space_size(r)})")
    digits = []
    for _ in range(r):
        index, digit = divmod(index, len(ACTION_DELTAS))
        digits.append(ACTION_DELTAS[digit])
    return tuple(reversed(digits))


def maintain_index(r: int) -> int:
    return encode_action((0,) * r)


def action_table(r: int) -> np.ndarray:
    """Deltas of every joint action, row i is decode_action(i, r)."""
    return np.array(list(itertools.product(ACTION_DELTAS, repeat=r)), dtype=np.int64)


def allocation_space_size(n: int, r: int, limit: Optional[int] = None) -> int:
    """Number of ways to spread n CPUs over r stages (stars and bars)."""
    if n < 0 or r < 1:
        raise ValueError(f"allocation_space_size needs n >= 0 and r >= 1, got n={n}, r={r}")
    size = math.comb(n + r - 1, r - 1)
    if limit is not None and size > limit:
        raise OverflowError(f"Allocation space C({n + r - 1}, {r - 1}) = {size} exceeds {limit}")
    return size


def even_split(budget: int, cpu_knobs: int) -> tuple[int, ...]:
    if budget < cpu_knobs:
        raise EnvError(f"Budget of {budget} CPUs cannot hold {cpu_knobs} stages")
    share, remainder = divmod(budget, cpu_knobs)
    return tuple(share + (1 if i < remainder else 0) for i in range(cpu_knobs))


def even_allocation(pipeline: PipelineSpec, budget: int) -> Allocation:
    return Allocation(
        cpus=even_split(budget, pipeline.cpu_knobs),
        prefetch_units=1 if pipeline.has_prefetch else 0,
    )


def compute_reward(throughput_norm: float, mem_used_mb: float, mem_total_mb: float) -> float:
    return throughput_norm * max(0.0, 1.0 - mem_used_mb / mem_total_mb)


def convergence_step(history: Sequence[float], window: int = 200, tolerance: float = 0.01) -> Optional[int]:
    """History length at which detect_convergence first becomes true, or None."""
    if window < 2:
        raise ValueError(f"Convergence window must be >= 2, got {window}")
    rewards = np.asarray(history, dtype=np.float64)
    if len(rewards) < 2 * window:
        return None
    sums = np.cumsum(np.concatenate(([0.0], rewards)))
    averages = (sums[window:] - sums[:-window]) / window
    stable = np.abs(np.diff(averages)) < tolerance
    run = 0
    for i, ok in enumerate(stable):
        run = run + 1 if ok else 0
        if run >= window:
            # stable[i] compares the averages ending at i + window and i + window - 1
            return i + window + 1
    return None


def detect_convergence(history: Sequence[float], window: int = 200, tolerance: float = 0.01) -> bool:
    """True when the last `window` differences between consecutive moving
    averages of the reward all stay below `tolerance`."""
    if window < 2:
        raise ValueError(f"Convergence window must be >= 2, got {window}")
    rewards = np.asarray(history, dtype=np.float64)
    if len(rewards) < 2 * window:
        return False
    tail = rewards[-2 * window :]
    sums = np.cumsum(np.concatenate(([0.0], tail)))
    averages = (sums[window:] - sums[:-window]) / window
    return bool(np.all(np.abs(np.diff(averages)) < tolerance))


class PipelineEnv(Module):
    """Single-owner environment over the pipeline simulator."""

    def __init__(
        self,
        pipeline: PipelineSpec,
        machine: MachineSpec,
        workload: WorkloadSpec,
        config: EnvConfig = EnvConfig(),
        log_level=logging.INFO,
        tunable: Optional[Sequence[bool]] = None,
    ):
        super().__init__(__name__, {}, log_level)
        if machine.total_cpus < pipeline.cpu_knobs:
            raise EnvError(
                f"Machine has {machine.total_cpus} CPUs, pipeline needs at least {pipeline.cpu_knobs}"
            )
        self.pipeline = pipeline
        self.workload = workload
        self.config = config
        self._initial_machine = machine
        self.r = pipeline.knobs
        self._actions = action_table(self.r)
        self._frozen = np.zeros(self.r, dtype=bool)
        if tunable is not None:
            if len(tunable) != self.r:
                raise EnvError(f"tunable has {len(tunable)} entries, pipeline has {self.r} knobs")
            self._frozen = ~np.asarray(tunable, dtype=bool)
        self._stage_mem_fixed = sum(stage.mem_fixed for stage in pipeline.stages)
        self._mem_per_replica = np.array(
            [stage.mem_per_replica for stage in pipeline.cpu_stages], dtype=np.float64
        )
        self._unit_mb = prefetch_unit_mb(pipeline, workload)
        self.reset()

    @property
    def state_dim(self) -> int:
        return STATIC_FACTORS + self.r

    @property
    def action_count(self) -> int:
        return len(self._actions)

    @property
    def budget(self) -> int:
        return self.machine.total_cpus

    @property
    def in_downtime(self) -> bool:
        return self._downtime_remaining > 0

    def _baseline_allocation(self) -> Allocation:
        return even_allocation(self.pipeline, self.budget)

    def reset(self, random_start: Optional[np.random.Generator] = None) -> EnvState:
        self.machine = self._initial_machine
        self.step_index = 0
        self._downtime_remaining = 0
        self._downtime_kind = None
        self._pending_allocation = None
        if random_start is None:
            self.allocation = self._baseline_allocation()
        else:
            self.allocation = self._random_allocation(random_start)
        self._last_safe = self.allocation
        self._last_report = self._simulate(self.allocation)
        return self.state()

    def _random_allocation(self, rng: np.random.Generator) -> Allocation:
        knobs = self.pipeline.cpu_knobs
        used = int(rng.integers(knobs, self.budget + 1))
        cpus = tuple(int(c) + 1 for c in rng.multinomial(used - knobs, [1.0 / knobs] * knobs))
        prefetch = 0
        if self.pipeline.has_prefetch:
            limit = self.config.mem_guard_frac * self.machine.total_mem_mb
            prefetch = int(
                rng.integers(0, max_prefetch_units(self.pipeline, cpus, self.workload, limit, cap=32) + 1)
            )
        return Allocation(cpus=cpus, prefetch_units=prefetch)

    def _noise_seed(self):
        if self.config.noise_seed is None:
            return None
        return np.random.default_rng([self.config.noise_seed, self.step_index])

    def _simulate(self, allocation: Allocation) -> ThroughputReport:
        return pipeline_throughput(
            self.pipeline, allocation, self.machine, self.workload, self._noise_seed()
        )

    def _throughput_norm(self, report: Optional[ThroughputReport]) -> float:
        if report is None:
            return 0.0
        return min(report.achieved_rate / self.workload.target_rate, 1.0)

    def state(self) -> EnvState:
        report = None if self.in_downtime else self._last_report
        mem_used = report.mem_used_mb if report else 0.0
        total_mem = self.machine.total_mem_mb
        return EnvState(
            throughput_norm=self._throughput_norm(report),
            free_cpus_frac=(self.budget - self.allocation.total_cpus) / self.budget,
            free_mem_frac=max(0.0, (total_mem - mem_used) / total_mem),
            model_latency_norm=self.workload.model_latency_s / LATENCY_REF_S,
            bandwidth_norm=self.machine.dram_bandwidth_mbps / BANDWIDTH_REF_MBPS,
            ghz_norm=self.machine.cpu_ghz / GHZ_REF,
            alloc_frac=tuple(
                v / self.budget for v in self.allocation.knob_values(self.pipeline.has_prefetch)
            ),
        )

    def set_allocation(self, allocation: Allocation):
        """Install an allocation chosen outside the agent (baselines)."""
        validate_allocation(self.pipeline, allocation, self.machine)
        self.allocation = allocation
        self._last_report = self._simulate(allocation)

    def relaunch(self, allocation: Allocation, downtime_steps: Optional[int] = None):
        """Tear the pipeline down and bring it back with a new allocation."""
        steps = self.config.relaunch_downtime_steps if downtime_steps is None else downtime_steps
        self.set_allocation(allocation)
        if steps > 0:
            self._downtime_remaining = steps
            self._downtime_kind = EVENT_RELAUNCH
            self._pending_allocation = allocation
        self._logger.info(f"Relaunched with {allocation.as_dict()}, downtime {steps} steps")

    def feasible_mask(self) -> np.ndarray:
        current = np.array(
            self.allocation.knob_values(self.pipeline.has_prefetch), dtype=np.int64
        )
        proposed = current + self._actions
        knobs = self.pipeline.cpu_knobs
        cpus = proposed[:, :knobs]
        mask = np.all(cpus >= 1, axis=1) & (cpus.sum(axis=1) <= self.budget)
        if self.pipeline.has_prefetch:
            mask &= proposed[:, knobs] >= 0
        if self.config.mem_guard:
            mem = self._stage_mem_fixed + cpus @ self._mem_per_replica
            if self.pipeline.has_prefetch:
                mem = mem + proposed[:, knobs] * self._unit_mb
            mask &= mem <= self.config.mem_guard_frac * self.machine.total_mem_mb
        if self._frozen.any():
            mask &= np.all(self._actions[:, self._frozen] == 0, axis=1)
        mask[maintain_index(self.r)] = True
        return mask

    def shrink_to_budget(self, allocation: Allocation) -> Allocation:
        cpus = list(allocation.cpus)
        while sum(cpus) > self.budget:
            largest = max(cpus)
            index = len(cpus) - 1 - cpus[::-1].index(largest)
            cpus[index] -= 1
        return Allocation(cpus=tuple(cpus), prefetch_units=allocation.prefetch_units)

    def _apply_deltas(self, deltas: Sequence[int]) -> tuple[Allocation, bool]:
        knobs = self.pipeline.cpu_knobs
        current = self.allocation.knob_values(self.pipeline.has_prefetch)
        proposed = [value + delta for value, delta in zip(current, deltas)]
        clamped = False
        for i in range(knobs):
            if proposed[i] < 1:
                proposed[i], clamped = 1, True
        if self.pipeline.has_prefetch and proposed[knobs] < 0:
            proposed[knobs], clamped = 0, True
        for i in reversed(range(knobs)):
            if sum(proposed[:knobs]) <= self.budget:
                break
            if deltas[i] > 0:
                proposed[i] -= deltas[i]
                clamped = True
        return Allocation.from_knobs(proposed, self.pipeline.has_prefetch), clamped

    def _end_downtime(self):
        if self._downtime_kind == EVENT_OOM:
            if (
                self.config.reset_policy_after_oom is ResetPolicy.LAST_SAFE
                and self._last_safe.total_cpus <= self.budget
            ):
                self.allocation = self._last_safe
            else:
                self.allocation = self._baseline_allocation()
        elif self._pending_allocation is not None:
            self.allocation = self.shrink_to_budget(self._pending_allocation)
        self._downtime_kind = None
        self._pending_allocation = None
        self._last_report = self._simulate(self.allocation)
        self._logger.debug(f"Downtime over at step {self.step_index}, allocation {self.allocation.as_dict()}")

    def step(self, action: Union[int, Sequence[int]]) -> StepOutcome:
        if isinstance(action, (int, np.integer)):
            deltas = decode_action(int(action), self.r)
        else:
            deltas = tuple(int(d) for d in action)
            if len(deltas) != self.r:
                raise ActionError(f"Action has {len(deltas)} entries, expected {self.r}")
            if any(d not in ACTION_DELTAS for d in deltas):
                raise ActionError(f"Action {deltas} has deltas outside {ACTION_DELTAS}")

        event = EVENT_NONE
        clamped = False
        resize = self.config.resize_at(self.step_index)
        if resize is not None:
            self.machine = apply_resize(self.machine, resize, self.pipeline.cpu_knobs)
            shrunk = self.shrink_to_budget(self.allocation)
            clamped = shrunk != self.allocation
            self.allocation = shrunk
            event = EVENT_RESIZE
            self._logger.info(f"Step {self.step_index}: CPU budget resized to {self.budget}")

        if self.in_downtime:
            kind = self._downtime_kind
            self._downtime_remaining -= 1
            if self._downtime_remaining == 0:
                self._end_downtime()
            outcome = StepOutcome(
                state=self.state(),
                reward=0.0,
                crashed=False,
                info=self._info(None, event if event != EVENT_NONE else kind, clamped, downtime=True),
            )
            self.step_index += 1
            return outcome

        allocation, was_clamped = self._apply_deltas(deltas)
        clamped = clamped or was_clamped
        self.allocation = allocation
        report = self._simulate(allocation)
        self._last_report = report

        if report.oom:
            self._logger.warning(
                f"Step {self.step_index}: OOM with {report.mem_used_mb:.1f} MB used of {self.machine.total_mem_mb:.1f} MB"
            )
            self._downtime_remaining = self.config.oom_downtime_steps
            self._downtime_kind = EVENT_OOM
            outcome = StepOutcome(
                state=self.state(),
                reward=0.0,
                crashed=True,
                info=self._info(report, event if event != EVENT_NONE else EVENT_OOM, clamped),
            )
        else:
            self._last_safe = allocation
            reward = compute_reward(
                self._throughput_norm(report), report.mem_used_mb, self.machine.total_mem_mb
            )
            outcome = StepOutcome(
                state=self.state(),
                reward=reward,
                crashed=False,
                info=self._info(report, event, clamped),
            )
        self.step_index += 1
        return outcome

    def _info(self, report: Optional[ThroughputReport], event: str, clamped: bool, downtime=False) -> dict:
        return {
            "step": self.step_index,
            "achieved_rate": report.achieved_rate if report else 0.0,
            "mem_used_mb": report.mem_used_mb if report else 0.0,
            "bottleneck_stage": report.bottleneck_stage if report else -1,
            "cpu_budget": self.budget,
            "clamped": clamped,
            "event": event,
            "downtime": downtime,
            "allocation": self.allocation,
        }
