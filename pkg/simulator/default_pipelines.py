"""Reference pipelines used by the scenarios, the scaling studies and the tests.

Stage costs follow the CPU-time breakdown of a production recommendation
ingestion pipeline: UDF work dominates, batching is second, disk reads and
shuffling are comparable.
"""
from dataclasses import replace

from common.pipeline_model import MachineSpec, PipelineSpec, StageKind, StageSpec, WorkloadSpec

# share of per-sample CPU time
STAGE_SHARES = {
    StageKind.DISK_LOAD: 0.14,
    StageKind.SHUFFLE: 0.117,
    StageKind.UDF_MAP: 0.423,
    StageKind.BATCH: 0.28,
}
COST_SCALE = 0.01
DEFAULT_BATCH_SIZE = 24096

# order in which stages are added when a pipeline grows
LENGTH_ORDER = (
    StageKind.DISK_LOAD,
    StageKind.BATCH,
    StageKind.SHUFFLE,
    StageKind.UDF_MAP,
    StageKind.PREFETCH,
)
CASE_STUDY_ORDER = (
    StageKind.DISK_LOAD,
    StageKind.SHUFFLE,
    StageKind.UDF_MAP,
    StageKind.BATCH,
    StageKind.PREFETCH,
)

_MEM_FIXED = {
    StageKind.DISK_LOAD: 64.0,
    StageKind.BATCH: 32.0,
    StageKind.SHUFFLE: 256.0,
    StageKind.UDF_MAP: 32.0,
    StageKind.PREFETCH: 0.0,
}
_NAMES = {
    StageKind.DISK_LOAD: "disk_load",
    StageKind.BATCH: "batch",
    StageKind.SHUFFLE: "shuffle",
    StageKind.UDF_MAP: "udf_map",
    StageKind.PREFETCH: "prefetch",
}


def reference_stage(kind: StageKind, noise: bool = True) -> StageSpec:
    if kind is StageKind.PREFETCH:
        return StageSpec(name=_NAMES[kind], kind=kind)
    return StageSpec(
        name=_NAMES[kind],
        kind=kind,
        cost_per_item=COST_SCALE * STAGE_SHARES[kind],
        mem_fixed=_MEM_FIXED[kind],
        mem_per_replica=8.0,
        noise_cv=(0.5 if kind is StageKind.UDF_MAP else 0.1) if noise else 0.0,
        batch_cost_exponent=0.05 if kind is StageKind.BATCH else 0.0,
    )


def default_pipeline(length: int = 5, noise: bool = True) -> PipelineSpec:
    if not 2 <= length <= len(LENGTH_ORDER):
        raise ValueError(f"Reference pipelines have 2 to {len(LENGTH_ORDER)} stages, got {length}")
    return PipelineSpec(stages=tuple(reference_stage(kind, noise) for kind in LENGTH_ORDER[:length]))


def case_study_pipeline(noise: bool = True) -> PipelineSpec:
    return PipelineSpec(stages=tuple(reference_stage(kind, noise) for kind in CASE_STUDY_ORDER))


def default_machine(total_cpus: int = 128) -> MachineSpec:
    return MachineSpec(total_cpus=total_cpus, cpu_ghz=3.0, total_mem_mb=16384.0)


def default_workload(batch_size: int = DEFAULT_BATCH_SIZE) -> WorkloadSpec:
    return WorkloadSpec(batch_size=batch_size, model_latency_s=0.5 * batch_size / DEFAULT_BATCH_SIZE)


def toy_pipeline() -> PipelineSpec:
    """Two noiseless, memory-free stages with costs 1.0 and 2.0."""
    return PipelineSpec(
        stages=(
            StageSpec(name="load", kind=StageKind.DISK_LOAD, cost_per_item=1.0),
            StageSpec(name="map", kind=StageKind.UDF_MAP, cost_per_item=2.0),
        )
    )


def toy_machine(total_cpus: int = 6) -> MachineSpec:
    return MachineSpec(total_cpus=total_cpus, cpu_ghz=1.0)


def truncate_to_length(pipeline: PipelineSpec, length: int) -> PipelineSpec:
    """Keep the first `length` stages of the pipeline in growth order
    (disk, batch, shuffle, UDF, prefetch); the Prefetch stage stays last."""
    ordered = sorted(pipeline.stages, key=lambda stage: LENGTH_ORDER.index(stage.kind))
    if not 2 <= length <= len(ordered):
        raise ValueError(f"Cannot cut a {len(ordered)}-stage pipeline to {length} stages")
    return replace(pipeline, stages=tuple(ordered[:length]))
