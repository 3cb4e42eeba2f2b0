"""Scaling studies: agent against the greedy baseline as pipeline length,
machine size and batch size grow. Each study returns one StudyRow per point."""
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .experiment import AGENT, ExperimentConfig, PolicySpec, rate_ratio, run_experiment
from common.pipeline_model import WorkloadSpec
from simulator.default_pipelines import truncate_to_length
from simulator.pipeline_simulator import scale_for_batch, throughput_upper_bound

COMPLEXITY_LENGTHS = (2, 3, 4, 5)
CPU_BUDGETS = tuple(range(8, 129, 2))
BATCH_SIZES = (1024, 4096, 16384, 24096, 65536)
# target rate in the no-idle regime, relative to the continuous throughput bound
UNBOUNDED_TARGET_FACTOR = 2.0

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class StudyRow:
    study: str
    x: int
    policy: str
    policy_throughput_norm: float
    greedy_throughput_norm: float
    ratio: float


def _mean_rate_and_norm(config: ExperimentConfig, shared_state: Optional[dict]) -> tuple[np.ndarray, float]:
    rows, _ = run_experiment(config, shared_state)
    rates = np.array([row.achieved_rate for row in rows])
    return rates, float(np.mean([row.throughput_norm for row in rows]))


def _study_point(study: str, x: int, config: ExperimentConfig, policy: PolicySpec, shared_state) -> StudyRow:
    policy_rates, policy_norm = _mean_rate_and_norm(config.with_policy(policy), shared_state)
    greedy_rates, greedy_norm = _mean_rate_and_norm(config.with_policy(config.greedy_reference), shared_state)
    row = StudyRow(
        study=study,
        x=x,
        policy=policy.label,
        policy_throughput_norm=policy_norm,
        greedy_throughput_norm=greedy_norm,
        ratio=rate_ratio(policy_rates, greedy_rates),
    )
    logger.info(f"{study} x={x}: {policy.label} x{row.ratio:.3f} vs greedy")
    return row


def _study_policy(config: ExperimentConfig, policy: Optional[PolicySpec]) -> PolicySpec:
    if policy is not None:
        return policy
    return config.policy if config.policy.is_agent else PolicySpec(AGENT)


def scaling_study_complexity(
    config: ExperimentConfig,
    policy: Optional[PolicySpec] = None,
    lengths: Iterable[int] = COMPLEXITY_LENGTHS,
    shared_state: Optional[dict] = None,
) -> list[StudyRow]:
    """Grow the pipeline one stage at a time with the model never idling the pipeline."""
    policy = _study_policy(config, policy)
    # checkpoints are tied to one pipeline length
    agent = replace(config.agent, checkpoint=None)
    rows = []
    for length in lengths:
        pipeline = truncate_to_length(config.pipeline, length)
        target = UNBOUNDED_TARGET_FACTOR * throughput_upper_bound(pipeline.without_noise(), config.machine)
        point = replace(
            config,
            pipeline=pipeline,
            workload=WorkloadSpec.for_target_rate(config.workload.batch_size, target),
            agent=agent,
        )
        rows.append(_study_point("complexity", length, point, policy, shared_state))
    return rows


def scaling_study_cpus(
    config: ExperimentConfig,
    policy: Optional[PolicySpec] = None,
    budgets: Iterable[int] = CPU_BUDGETS,
    shared_state: Optional[dict] = None,
) -> list[StudyRow]:
    """One fixed-size machine per budget; the greedy baseline is launched fresh at each size.

    The agent is pretrained once per seed over the whole budget range and reused at every point.
    """
    policy = _study_policy(config, policy)
    budgets = tuple(budgets)
    env = replace(config.env, resize_schedule=())
    low, high = config.agent.cpu_range or (config.machine.total_cpus, config.machine.total_cpus)
    agent = replace(config.agent, cpu_range=(min(low, *budgets), max(high, *budgets)))
    rows = []
    for budget in budgets:
        point = replace(config, machine=replace(config.machine, total_cpus=budget), env=env, agent=agent)
        rows.append(_study_point("cpus", budget, point, policy, shared_state))
    return rows


def scaling_study_batch(
    config: ExperimentConfig,
    policy: Optional[PolicySpec] = None,
    batch_sizes: Iterable[int] = BATCH_SIZES,
    shared_state: Optional[dict] = None,
) -> list[StudyRow]:
    """Sweep the batch size at a constant target sample rate, rescaling batch-dependent costs."""
    policy = _study_policy(config, policy)
    reference = config.workload.batch_size
    rows = []
    for batch_size in batch_sizes:
        point = replace(
            config,
            pipeline=scale_for_batch(config.pipeline, batch_size, reference),
            workload=WorkloadSpec.for_target_rate(batch_size, config.workload.target_rate),
        )
        rows.append(_study_point("batch", batch_size, point, policy, shared_state))
    return rows
