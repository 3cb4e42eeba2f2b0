"""Experiment runner: drives one policy (the agent or an allocator baseline)
through a simulated run per seed and reports per-step metrics plus a summary."""
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from agent.qnet.checkpoint import load_checkpoint
from agent.qnet.qnet_agent import AgentHyperparams, QnetAgent
from allocator.allocator import AllocatorKind, EstimatorBias, load_allocator
from common.error_manager import ErrorManager, RunContext
from common.pipeline_model import MachineSpec, PipelineSpec, WorkloadSpec
from environment.env_sampler import EnvSampler
from environment.rl_env import (
    EVENT_OOM,
    EVENT_RESIZE,
    EnvConfig,
    PipelineEnv,
    StepOutcome,
    convergence_step,
    maintain_index,
)
from shared_state.global_shared_state import GLOBAL_SHARED_STATE

AGENT = "agent"
OUTPUT_FORMATS = ("csv", "json")
TRAILING_WINDOW = 200

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration; `path` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class PolicySpec:
    kind: str = AGENT
    adaptive: bool = False
    bias: EstimatorBias = field(default_factory=EstimatorBias)
    prefetch_units_per_cpu: float = 0.25

    def __post_init__(self):
        if self.kind != AGENT:
            try:
                object.__setattr__(self, "kind", AllocatorKind(self.kind).value)
            except ValueError:
                raise ConfigError("policy.kind", f"unknown policy {self.kind!r}")
        if self.adaptive and self.kind == AGENT:
            raise ConfigError("policy.adaptive", "the agent adapts online and is never relaunched")
        if self.prefetch_units_per_cpu < 0:
            raise ConfigError("policy.prefetch_units_per_cpu", "must be >= 0")

    @property
    def is_agent(self) -> bool:
        return self.kind == AGENT

    @property
    def label(self) -> str:
        return self.kind + ("_adaptive" if self.adaptive else "")

    def allocator_params(self) -> dict:
        return {"bias": self.bias.factors, "prefetch_units_per_cpu": self.prefetch_units_per_cpu}


GREEDY_REFERENCE = PolicySpec(AllocatorKind.GREEDY_ESTIMATED.value)
UNOPTIMIZED = PolicySpec(AllocatorKind.SINGLE_CPU.value)


@dataclass(frozen=True)
class AgentSettings:
    checkpoint: Optional[str] = None
    pretrain_steps: int = 0
    hyperparams: AgentHyperparams = field(default_factory=AgentHyperparams)
    # randomization of the offline training environments
    cost_jitter: float = 0.2
    latency_jitter: float = 0.0
    cpu_range: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.pretrain_steps < 0:
            raise ConfigError("agent.pretrain_steps", "must be >= 0")
        if self.cost_jitter < 0 or self.latency_jitter < 0:
            raise ConfigError("agent", "jitter values must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: PipelineSpec
    machine: MachineSpec
    workload: WorkloadSpec
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicySpec = field(default_factory=PolicySpec)
    agent: AgentSettings = field(default_factory=AgentSettings)
    seeds: tuple[int, ...] = (0,)
    steps: int = 1000
    output_dir: str = "out"
    format: str = "csv"
    policies: tuple[PolicySpec, ...] = ()
    greedy_reference: PolicySpec = GREEDY_REFERENCE
    convergence_window: int = TRAILING_WINDOW
    convergence_tolerance: float = 0.01
    log_level: int = logging.INFO

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "policies", tuple(self.policies))
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if self.steps < 1:
            raise ConfigError("steps", f"must be >= 1, got {self.steps}")
        if self.format not in OUTPUT_FORMATS:
            raise ConfigError("format", f"must be one of {OUTPUT_FORMATS}, got {self.format!r}")
        if self.machine.total_cpus < self.pipeline.cpu_knobs:
            raise ConfigError(
                "machine.total_cpus",
                f"{self.machine.total_cpus} CPUs cannot hold {self.pipeline.cpu_knobs} stages",
            )

    def with_policy(self, policy: PolicySpec) -> "ExperimentConfig":
        return replace(self, policy=policy)

    def run_id(self, seed: int) -> str:
        return f"{self.policy.label}_s{seed}"

    def env_config_for(self, seed: int) -> EnvConfig:
        if self.env.noise_seed is None:
            return self.env
        return replace(self.env, noise_seed=self.env.noise_seed + seed)

    def fingerprint(self) -> str:
        """Identity of a run up to its seed, used to share baseline runs."""
        return repr((self.pipeline, self.machine, self.workload, self.env, self.steps, self.policy))

    def validate_checkpoint(self):
        if self.policy.is_agent and self.agent.checkpoint:
            try:
                load_checkpoint(self.agent.checkpoint, expected_r=self.pipeline.knobs)
            except ValueError as e:
                raise ConfigError("agent.checkpoint", str(e))


@dataclass(frozen=True, slots=True)
class MetricsRow:
    run_id: str
    seed: int
    step: int
    cpu_budget: int
    allocation: tuple[int, ...]
    achieved_rate: float
    throughput_norm: float
    reward: float
    mem_used_mb: float
    oom: bool
    event: str

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True, slots=True)
class RunSummary:
    run_id: str
    policy: str
    seed: int
    steps: int
    mean_achieved_rate: float
    mean_throughput_norm: float
    final_throughput_norm: float
    crash_count: int
    convergence_step: Optional[int]
    convergence_wall_clock_s: Optional[float]
    ratio_vs_unoptimized: float
    ratio_vs_greedy: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def rate_ratio(rates, baseline_rates) -> float:
    mean, base = float(np.mean(rates)), float(np.mean(baseline_rates))
    if base == 0.0:
        return 1.0 if mean == 0.0 else math.inf
    return mean / base


def normalized_series(rates, baseline_rates) -> np.ndarray:
    """Per-step ratio to a baseline run; steps where both are 0 count as 1."""
    rates = np.asarray(rates, dtype=np.float64)
    base = np.asarray(baseline_rates, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = rates / base
    ratios[(base == 0.0) & (rates == 0.0)] = 1.0
    return ratios


def build_env(config: ExperimentConfig, seed: int) -> PipelineEnv:
    return PipelineEnv(
        config.pipeline, config.machine, config.workload, config.env_config_for(seed), config.log_level
    )


def env_sampler(config: ExperimentConfig) -> EnvSampler:
    return EnvSampler(
        config.pipeline,
        config.machine,
        config.workload,
        config.env,
        cost_jitter=config.agent.cost_jitter,
        cpu_range=config.agent.cpu_range,
        latency_jitter=config.agent.latency_jitter,
    )


def pretrain_agent(config: ExperimentConfig, seed: int, steps: Optional[int] = None) -> QnetAgent:
    hyper = replace(config.agent.hyperparams, seed=seed)
    agent = QnetAgent(config.pipeline.knobs, hyper, log_level=config.log_level)
    agent.pretrain_offline(env_sampler(config), config.agent.pretrain_steps if steps is None else steps)
    return agent


def pretraining_key(config: ExperimentConfig, seed: int) -> tuple:
    """Identity of an offline training run.

    With agent.cpu_range set the sampler draws each budget from the range, so
    machines that differ only in total_cpus share one pretrained model.
    """
    machine = config.machine
    if config.agent.cpu_range is not None:
        machine = replace(machine, total_cpus=config.agent.cpu_range[0])
    return repr((config.pipeline, machine, config.workload, config.env, config.agent)), seed


def build_agent(config: ExperimentConfig, seed: int, shared_state: dict) -> QnetAgent:
    settings = config.agent
    hyper = replace(settings.hyperparams, seed=seed)
    r = config.pipeline.knobs
    if settings.checkpoint:
        params, saved, _ = load_checkpoint(settings.checkpoint, expected_r=r)
        hyper = replace(hyper, hidden_sizes=saved.hidden_sizes, head=saved.head)
        return QnetAgent(r, hyper, params=params, log_level=config.log_level)
    if settings.pretrain_steps > 0:
        cache = shared_state.setdefault("PRETRAINED", {})
        key = pretraining_key(config, seed)
        if key not in cache:
            cache[key] = pretrain_agent(config, seed).params
        return QnetAgent(r, hyper, params=cache[key].copy(), log_level=config.log_level)
    return QnetAgent(r, hyper, log_level=config.log_level)


def _drive_baseline(
    config: ExperimentConfig, env: PipelineEnv, shared_state: dict, error_manager: ErrorManager
) -> list[StepOutcome]:
    policy = config.policy
    allocator = load_allocator(policy.kind, policy.allocator_params(), shared_state, config.log_level)
    allocation = allocator.allocate(config.pipeline, env.machine, config.workload)
    env.set_allocation(allocation)
    maintain = maintain_index(env.r)
    trajectory = []
    recovering = False
    for _ in range(config.steps):
        outcome = env.step(maintain)
        if policy.adaptive and outcome.info["event"] == EVENT_RESIZE:
            allocation = allocator.allocate(config.pipeline, env.machine, config.workload)
            env.relaunch(allocation)
            recovering = False
            error_manager.context.step = outcome.info["step"]
            error_manager.add_error(
                f"{policy.label} relaunched for {env.budget} CPUs", kind="relaunch", notes=str(allocation.cpus)
            )
        elif outcome.crashed:
            recovering = True
        # a restarted baseline comes back with its own allocation
        if recovering and not env.in_downtime:
            env.set_allocation(env.shrink_to_budget(allocation))
            recovering = False
        trajectory.append(outcome)
    return trajectory


def _trajectory(config: ExperimentConfig, seed: int, shared_state: dict, error_manager: ErrorManager) -> list[StepOutcome]:
    env = build_env(config, seed)
    if config.policy.is_agent:
        return build_agent(config, seed, shared_state).fine_tune_online(env, config.steps)
    return _drive_baseline(config, env, shared_state, error_manager)


def _achieved_rates(trajectory: list[StepOutcome]) -> np.ndarray:
    return np.array([outcome.info["achieved_rate"] for outcome in trajectory], dtype=np.float64)


def baseline_rates(config: ExperimentConfig, policy: PolicySpec, seed: int, shared_state: dict) -> np.ndarray:
    """Per-step achieved rates of a baseline run with the same scenario, schedule and seed."""
    baseline = config.with_policy(policy)
    cache = shared_state.setdefault("BASELINE_RUNS", {})
    key = (baseline.fingerprint(), seed)
    if key not in cache:
        manager = ErrorManager(logger, RunContext(run_id=baseline.run_id(seed), seed=seed, policy=policy.label))
        cache[key] = _achieved_rates(_trajectory(baseline, seed, shared_state, manager))
    return cache[key]


def _rows(config: ExperimentConfig, seed: int, trajectory: list[StepOutcome]) -> list[MetricsRow]:
    target = config.workload.target_rate
    has_prefetch = config.pipeline.has_prefetch
    rows = []
    for outcome in trajectory:
        info = outcome.info
        rows.append(
            MetricsRow(
                run_id=config.run_id(seed),
                seed=seed,
                step=info["step"],
                cpu_budget=info["cpu_budget"],
                allocation=info["allocation"].knob_values(has_prefetch),
                achieved_rate=info["achieved_rate"],
                throughput_norm=min(info["achieved_rate"] / target, 1.0),
                reward=outcome.reward,
                mem_used_mb=info["mem_used_mb"],
                oom=outcome.crashed,
                event=info["event"],
            )
        )
    return rows


def run_seed(
    config: ExperimentConfig,
    seed: int,
    shared_state: Optional[dict] = None,
    error_manager: Optional[ErrorManager] = None,
) -> tuple[list[MetricsRow], RunSummary]:
    shared_state = GLOBAL_SHARED_STATE if shared_state is None else shared_state
    run_id = config.run_id(seed)
    if error_manager is None:
        error_manager = ErrorManager(logger)
    error_manager.context = RunContext(run_id=run_id, seed=seed, policy=config.policy.label)

    trajectory = _trajectory(config, seed, shared_state, error_manager)
    rows = _rows(config, seed, trajectory)
    for row in rows:
        if row.oom:
            error_manager.context.step = row.step
            error_manager.add_error(
                f"{run_id} ran out of memory ({row.mem_used_mb:.1f} MB)", kind=EVENT_OOM, error_level="WARNING"
            )

    rates = _achieved_rates(trajectory)
    if config.policy in (UNOPTIMIZED, config.greedy_reference):
        shared_state.setdefault("BASELINE_RUNS", {})[(config.fingerprint(), seed)] = rates
    norms = np.array([row.throughput_norm for row in rows])
    rewards = [row.reward for row in rows]
    converged = convergence_step(rewards, config.convergence_window, config.convergence_tolerance)
    summary = RunSummary(
        run_id=run_id,
        policy=config.policy.label,
        seed=seed,
        steps=len(rows),
        mean_achieved_rate=float(rates.mean()),
        mean_throughput_norm=float(norms.mean()),
        final_throughput_norm=float(norms[-TRAILING_WINDOW:].mean()),
        crash_count=sum(1 for row in rows if row.oom),
        convergence_step=converged,
        convergence_wall_clock_s=None if converged is None else converged * config.env.step_time_s,
        ratio_vs_unoptimized=rate_ratio(rates, baseline_rates(config, UNOPTIMIZED, seed, shared_state)),
        ratio_vs_greedy=rate_ratio(rates, baseline_rates(config, config.greedy_reference, seed, shared_state)),
    )
    return rows, summary


def run_experiment(
    config: ExperimentConfig,
    shared_state: Optional[dict] = None,
    error_manager: Optional[ErrorManager] = None,
) -> tuple[list[MetricsRow], list[RunSummary]]:
    config.validate_checkpoint()
    rows, summaries = [], []
    for seed in config.seeds:
        logger.info(f"Starting run {config.run_id(seed)} for {config.steps} steps")
        seed_rows, summary = run_seed(config, seed, shared_state, error_manager)
        rows.extend(seed_rows)
        summaries.append(summary)
        logger.info(
            f"Finished run {summary.run_id}: mean throughput {summary.mean_throughput_norm:.4f} of target, "
            f"{summary.crash_count} crashes, x{summary.ratio_vs_unoptimized:.3f} vs unoptimized"
        )
    return rows, summaries
