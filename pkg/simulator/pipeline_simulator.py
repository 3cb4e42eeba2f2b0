"""Analytical model of a staged data-ingestion pipeline.

A pipeline runs as fast as its slowest stage: every stage must sustain the
same rate or the faster ones idle. Stage rates scale with the CPUs they are
given, DiskLoad is additionally bounded by read bandwidth, and prefetching
hides the phase misalignment between the pipeline and the model.
"""
import logging
import math
from dataclasses import replace
from typing import Optional, Union

import numpy as np

from common.pipeline_model import (
    Allocation,
    MachineSpec,
    PipelineSpec,
    ResizeEvent,
    StageKind,
    StageSpec,
    ThroughputReport,
    WorkloadSpec,
)

logger = logging.getLogger(__name__)

RngLike = Union[None, int, np.random.Generator]


class PreconditionError(ValueError):
    pass


class AllocationError(ValueError):
    pass


class ResizeError(ValueError):
    pass


def as_generator(rng_seed: RngLike) -> Optional[np.random.Generator]:
    if rng_seed is None or isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def lognormal_factor(rng: np.random.Generator, cv: float) -> float:
    """Multiplicative noise with mean 1 and coefficient of variation cv."""
    sigma2 = math.log1p(cv * cv)
    return float(rng.lognormal(mean=-sigma2 / 2.0, sigma=math.sqrt(sigma2)))


def stage_rate(
    stage: StageSpec,
    cpus: int,
    machine: MachineSpec,
    sample_size_mb: Optional[float] = None,
    rng_seed: RngLike = None,
) -> float:
    if stage.is_prefetch:
        raise PreconditionError(f"Stage {stage.name} is a Prefetch stage and has no rate")
    if cpus < 1:
        raise PreconditionError(f"Stage {stage.name} needs at least 1 CPU, got {cpus}")

    replicas = cpus if stage.scalable else 1
    rate = replicas * machine.cpu_ghz / stage.cost_per_item
    if stage.kind is StageKind.DISK_LOAD and sample_size_mb:
        rate = min(rate, machine.io_bandwidth_mbps / sample_size_mb)

    rng = as_generator(rng_seed)
    if rng is not None and stage.noise_cv > 0:
        rate *= lognormal_factor(rng, stage.noise_cv)
    return rate


def overlap_factor(prefetch_units: int, jitter_max: float = 0.3, u_half: float = 4.0) -> float:
    return 1.0 - jitter_max * math.exp(-prefetch_units / u_half)


def pipeline_overlap(pipeline: PipelineSpec, prefetch_units: int) -> float:
    if not pipeline.has_prefetch:
        return 1.0
    return overlap_factor(prefetch_units, pipeline.jitter_max, pipeline.u_half)


def validate_allocation(pipeline: PipelineSpec, alloc: Allocation, machine: MachineSpec):
    if len(alloc.cpus) != pipeline.cpu_knobs:
        raise AllocationError(
            f"Allocation has {len(alloc.cpus)} CPU entries, pipeline has {pipeline.cpu_knobs} CPU stages"
        )
    if any(c < 1 for c in alloc.cpus):
        raise AllocationError(f"Every stage needs at least 1 CPU: {alloc.cpus}")
    if alloc.total_cpus > machine.total_cpus:
        raise AllocationError(
            f"Allocation uses {alloc.total_cpus} CPUs, budget is {machine.total_cpus}"
        )
    if alloc.prefetch_units < 0:
        raise AllocationError(f"prefetch_units must be >= 0, got {alloc.prefetch_units}")
    if alloc.prefetch_units and not pipeline.has_prefetch:
        raise AllocationError("prefetch_units given for a pipeline without a Prefetch stage")


def prefetch_unit_mb(pipeline: PipelineSpec, workload: WorkloadSpec) -> float:
    batch_term = workload.batch_size * pipeline.sample_size_mb / pipeline.batch_normalizer_mb
    return pipeline.prefetch_quantum_mb * batch_term


def memory_usage(pipeline: PipelineSpec, alloc: Allocation, workload: WorkloadSpec) -> float:
    cpus = iter(alloc.cpus)
    used = 0.0
    for stage in pipeline.stages:
        replicas = 0 if stage.is_prefetch else next(cpus)
        used += stage.mem_fixed + replicas * stage.mem_per_replica
    return used + alloc.prefetch_units * prefetch_unit_mb(pipeline, workload)


def pipeline_throughput(
    pipeline: PipelineSpec,
    alloc: Allocation,
    machine: MachineSpec,
    workload: WorkloadSpec,
    rng_seed: RngLike = None,
) -> ThroughputReport:
    validate_allocation(pipeline, alloc, machine)
    rng = as_generator(rng_seed)

    rates = tuple(
        stage_rate(stage, cpus, machine, pipeline.sample_size_mb, rng)
        for stage, cpus in zip(pipeline.cpu_stages, alloc.cpus)
    )
    bottleneck = int(np.argmin(rates))
    pipeline_rate = pipeline_overlap(pipeline, alloc.prefetch_units) * rates[bottleneck]
    mem_used = memory_usage(pipeline, alloc, workload)

    return ThroughputReport(
        pipeline_rate=pipeline_rate,
        achieved_rate=min(pipeline_rate, workload.target_rate),
        bottleneck_stage=bottleneck,
        mem_used_mb=mem_used,
        oom=mem_used > machine.total_mem_mb,
        stage_rates=rates,
    )


def apply_resize(machine: MachineSpec, event: ResizeEvent, stage_count: int = 1) -> MachineSpec:
    if event.new_cpu_count < stage_count:
        raise ResizeError(
            f"Cannot resize to {event.new_cpu_count} CPUs: {stage_count} stages need 1 CPU each"
        )
    if event.new_cpu_count == machine.total_cpus:
        return machine
    logger.debug(f"Resizing machine {machine.total_cpus} -> {event.new_cpu_count} CPUs")
    return replace(machine, total_cpus=event.new_cpu_count)


def max_prefetch_units(
    pipeline: PipelineSpec,
    cpus: tuple[int, ...],
    workload: WorkloadSpec,
    mem_limit_mb: float,
    cap: int = 64,
) -> int:
    """Largest prefetch level (up to cap) that keeps memory within mem_limit_mb."""
    if not pipeline.has_prefetch:
        return 0
    base = memory_usage(pipeline, Allocation(cpus=cpus, prefetch_units=0), workload)
    unit = prefetch_unit_mb(pipeline, workload)
    if base > mem_limit_mb:
        return 0
    if unit <= 0:
        return cap
    return int(min(cap, math.floor((mem_limit_mb - base) / unit)))


def throughput_upper_bound(pipeline: PipelineSpec, machine: MachineSpec) -> float:
    """Continuous bound on the noiseless pipeline rate with a perfect overlap."""
    scalable = [s for s in pipeline.cpu_stages if s.scalable]
    fixed = [machine.cpu_ghz / s.cost_per_item for s in pipeline.cpu_stages if not s.scalable]
    spare = machine.total_cpus - len(fixed)
    bound = spare * machine.cpu_ghz / sum(s.cost_per_item for s in scalable) if scalable else math.inf
    disk = [s for s in pipeline.cpu_stages if s.kind is StageKind.DISK_LOAD]
    if disk:
        fixed.append(machine.io_bandwidth_mbps / pipeline.sample_size_mb)
    return min([bound] + fixed)


def calibrate_cost_scale(
    pipeline: PipelineSpec,
    machine: MachineSpec,
    workload: WorkloadSpec,
    target_fraction: float,
) -> PipelineSpec:
    """Scale every stage cost by one scalar so the single-CPU allocation
    reaches target_fraction of the model's target rate."""
    if not 0 < target_fraction <= 1:
        raise ValueError(f"target_fraction must be in (0, 1], got {target_fraction}")
    single = Allocation(
        cpus=(1,) * pipeline.cpu_knobs, prefetch_units=1 if pipeline.has_prefetch else 0
    )
    slowest_cost = max(s.cost_per_item for s in pipeline.cpu_stages)
    rate = pipeline_overlap(pipeline, single.prefetch_units) * machine.cpu_ghz / slowest_cost
    factor = rate / (target_fraction * workload.target_rate)
    logger.debug(f"Calibrated cost scale factor: {factor:.6g}")
    return pipeline.with_costs_scaled(factor)


def scale_for_batch(
    pipeline: PipelineSpec, batch_size: int, reference_batch_size: int
) -> PipelineSpec:
    ratio = batch_size / reference_batch_size
    return replace(
        pipeline,
        stages=tuple(
            stage
            if stage.is_prefetch or not stage.batch_cost_exponent
            else replace(
                stage, cost_per_item=stage.cost_per_item * ratio**stage.batch_cost_exponent
            )
            for stage in pipeline.stages
        ),
    )
