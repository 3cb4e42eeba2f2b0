import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .experiment import (
    UNOPTIMIZED,
    ConfigError,
    ExperimentConfig,
    MetricsRow,
    RunSummary,
    baseline_rates,
    normalized_series,
    rate_ratio,
    run_experiment,
)
from common.error_manager import ErrorManager
from shared_state.global_shared_state import GLOBAL_SHARED_STATE

SHARED_FIELDS = ("pipeline", "machine", "workload", "env", "seeds", "steps")

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class ComparisonRow:
    step: int
    policy: str
    normalized_throughput: float


@dataclass
class ComparisonTable:
    labels: list[str] = field(default_factory=list)
    # per-step values averaged over seeds
    rates: dict[str, np.ndarray] = field(default_factory=dict)
    series: dict[str, np.ndarray] = field(default_factory=dict)
    summaries: dict[str, list[RunSummary]] = field(default_factory=dict)
    rows: list[MetricsRow] = field(default_factory=list)

    def ratio(self, label: str, baseline_label: str) -> float:
        return rate_ratio(self.rates[label], self.rates[baseline_label])

    def comparison_rows(self) -> list[ComparisonRow]:
        return [
            ComparisonRow(step=step, policy=label, normalized_throughput=float(value))
            for label in self.labels
            for step, value in enumerate(self.series[label])
        ]

    def summary_ratios(self) -> dict[str, dict]:
        return {
            label: {
                "ratio_vs_unoptimized": float(np.mean([s.ratio_vs_unoptimized for s in self.summaries[label]])),
                "ratio_vs_greedy": float(np.mean([s.ratio_vs_greedy for s in self.summaries[label]])),
                "crash_count": int(sum(s.crash_count for s in self.summaries[label])),
            }
            for label in self.labels
        }


def check_shared_fields(configs: list[ExperimentConfig]):
    if not configs:
        raise ConfigError("policies", "a comparison needs at least one policy")
    first = configs[0]
    for config in configs[1:]:
        for name in SHARED_FIELDS:
            if getattr(config, name) != getattr(first, name):
                raise ConfigError(name, f"differs between {first.policy.label} and {config.policy.label}")


def _unique_label(label: str, taken: list[str]) -> str:
    if label not in taken:
        return label
    index = 2
    while f"{label}#{index}" in taken:
        index += 1
    return f"{label}#{index}"


def run_comparison(
    configs: list[ExperimentConfig],
    shared_state: Optional[dict] = None,
    error_manager: Optional[ErrorManager] = None,
) -> ComparisonTable:
    """Run every policy on the same scenario and normalize each per-step
    throughput against the single-CPU run with the same seed."""
    check_shared_fields(configs)
    shared_state = GLOBAL_SHARED_STATE if shared_state is None else shared_state
    table = ComparisonTable()
    for config in configs:
        label = _unique_label(config.policy.label, table.labels)
        rows, summaries = run_experiment(config, shared_state, error_manager)
        per_seed = [
            np.array([row.achieved_rate for row in rows if row.seed == seed]) for seed in config.seeds
        ]
        normalized = [
            normalized_series(rates, baseline_rates(config, UNOPTIMIZED, seed, shared_state))
            for seed, rates in zip(config.seeds, per_seed)
        ]
        table.labels.append(label)
        table.rates[label] = np.mean(per_seed, axis=0)
        table.series[label] = np.mean(normalized, axis=0)
        table.summaries[label] = summaries
        table.rows.extend(rows)
        logger.info(f"Compared {label}: x{table.ratio(label, table.labels[0]):.3f} vs {table.labels[0]}")
    return table
