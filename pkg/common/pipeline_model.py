from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional


class StageKind(str, Enum):
    DISK_LOAD = "DiskLoad"
    BATCH = "Batch"
    SHUFFLE = "Shuffle"
    UDF_MAP = "UdfMap"
    PREFETCH = "Prefetch"


@dataclass(frozen=True, slots=True)
class StageSpec:
    name: str
    kind: StageKind
    cost_per_item: float = 0.0  # cpu-seconds per sample at 1.0 GHz
    mem_fixed: float = 0.0  # MB
    mem_per_replica: float = 0.0  # MB per allocated CPU
    scalable: bool = True
    noise_cv: float = 0.0
    batch_cost_exponent: float = 0.0

    def __post_init__(self):
        if not isinstance(self.kind, StageKind):
            object.__setattr__(self, "kind", StageKind(self.kind))
        if self.kind is not StageKind.PREFETCH and self.cost_per_item <= 0:
            raise ValueError(
                f"Stage {self.name}: cost_per_item must be > 0, got {self.cost_per_item}"
            )
        if self.noise_cv < 0:
            raise ValueError(f"Stage {self.name}: noise_cv must be >= 0")
        if self.mem_fixed < 0 or self.mem_per_replica < 0:
            raise ValueError(f"Stage {self.name}: memory fields must be >= 0")

    @property
    def is_prefetch(self) -> bool:
        return self.kind is StageKind.PREFETCH


@dataclass(frozen=True, slots=True)
class PipelineSpec:
    stages: tuple[StageSpec, ...]
    sample_size_mb: float = 0.01
    batch_normalizer_mb: float = 256.0
    prefetch_quantum_mb: float = 64.0
    jitter_max: float = 0.3
    u_half: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not 2 <= len(self.stages) <= 8:
            raise ValueError(
                f"Pipeline must have between 2 and 8 stages, got {len(self.stages)}"
            )
        names = [stage.name for stage in self.stages]
        if len(set(names)) != len(names):
            raise ValueError(f"Stage names must be unique: {names}")
        prefetch_positions = [i for i, s in enumerate(self.stages) if s.is_prefetch]
        if len(prefetch_positions) > 1:
            raise ValueError("At most one Prefetch stage is allowed")
        if prefetch_positions and prefetch_positions[0] != len(self.stages) - 1:
            raise ValueError("The Prefetch stage must be the last stage")
        if self.sample_size_mb <= 0 or self.batch_normalizer_mb <= 0:
            raise ValueError("sample_size_mb and batch_normalizer_mb must be > 0")
        if self.prefetch_quantum_mb < 0:
            raise ValueError("prefetch_quantum_mb must be >= 0")
        if not 0 <= self.jitter_max < 1:
            raise ValueError(f"jitter_max must be in [0, 1), got {self.jitter_max}")
        if self.u_half <= 0:
            raise ValueError("u_half must be > 0")

    @property
    def cpu_stages(self) -> tuple[StageSpec, ...]:
        return tuple(stage for stage in self.stages if not stage.is_prefetch)

    @property
    def has_prefetch(self) -> bool:
        return self.stages[-1].is_prefetch

    @property
    def cpu_knobs(self) -> int:
        return len(self.cpu_stages)

    @property
    def knobs(self) -> int:
        """Number of tunable knobs r: one per CPU stage plus the prefetch knob."""
        return self.cpu_knobs + (1 if self.has_prefetch else 0)

    def with_costs_scaled(self, factor: float) -> "PipelineSpec":
        return replace(
            self,
            stages=tuple(
                stage
                if stage.is_prefetch
                else replace(stage, cost_per_item=stage.cost_per_item * factor)
                for stage in self.stages
            ),
        )

    def without_noise(self) -> "PipelineSpec":
        return replace(
            self, stages=tuple(replace(stage, noise_cv=0.0) for stage in self.stages)
        )


@dataclass(frozen=True, slots=True)
class MachineSpec:
    total_cpus: int
    cpu_ghz: float = 3.0
    total_mem_mb: float = 65536.0
    dram_bandwidth_mbps: float = 25600.0
    io_bandwidth_mbps: float = 2000.0

    def __post_init__(self):
        for name in (
            "total_cpus",
            "cpu_ghz",
            "total_mem_mb",
            "dram_bandwidth_mbps",
            "io_bandwidth_mbps",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"MachineSpec.{name} must be > 0")


@dataclass(frozen=True, slots=True)
class WorkloadSpec:
    batch_size: int
    model_latency_s: float
    target_rate: float = field(init=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.model_latency_s <= 0:
            raise ValueError("model_latency_s must be > 0")
        object.__setattr__(self, "target_rate", self.batch_size / self.model_latency_s)

    @classmethod
    def for_target_rate(cls, batch_size: int, target_rate: float) -> "WorkloadSpec":
        return cls(batch_size=batch_size, model_latency_s=batch_size / target_rate)


@dataclass(frozen=True, slots=True)
class ResizeEvent:
    step: int
    new_cpu_count: int


@dataclass(frozen=True, slots=True)
class Allocation:
    cpus: tuple[int, ...]
    prefetch_units: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cpus", tuple(int(c) for c in self.cpus))

    @property
    def total_cpus(self) -> int:
        return sum(self.cpus)

    def knob_values(self, has_prefetch: bool) -> tuple[int, ...]:
        return self.cpus + ((self.prefetch_units,) if has_prefetch else ())

    @classmethod
    def from_knobs(cls, values, has_prefetch: bool) -> "Allocation":
        values = tuple(int(v) for v in values)
        if has_prefetch:
            return cls(cpus=values[:-1], prefetch_units=values[-1])
        return cls(cpus=values, prefetch_units=0)

    def as_dict(self) -> dict:
        return {"cpus": list(self.cpus), "prefetch_units": self.prefetch_units}


@dataclass(frozen=True, slots=True)
class ThroughputReport:
    pipeline_rate: float
    achieved_rate: float
    bottleneck_stage: int
    mem_used_mb: float
    oom: bool
    stage_rates: Optional[tuple[float, ...]] = None

    def as_dict(self) -> dict:
        return {
            "pipeline_rate": self.pipeline_rate,
            "achieved_rate": self.achieved_rate,
            "bottleneck_stage": self.bottleneck_stage,
            "mem_used_mb": self.mem_used_mb,
            "oom": self.oom,
            "stage_rates": None if self.stage_rates is None else list(self.stage_rates),
        }
