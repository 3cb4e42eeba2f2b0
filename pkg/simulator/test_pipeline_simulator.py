import math

import numpy as np
import pytest
from .default_pipelines import (
    case_study_pipeline,
    default_machine,
    default_pipeline,
    default_workload,
    toy_machine,
    toy_pipeline,
    truncate_to_length,
)
from .pipeline_simulator import (
    AllocationError,
    PreconditionError,
    ResizeError,
    apply_resize,
    calibrate_cost_scale,
    max_prefetch_units,
    memory_usage,
    overlap_factor,
    pipeline_throughput,
    scale_for_batch,
    stage_rate,
    throughput_upper_bound,
)
from common.pipeline_model import (
    Allocation,
    MachineSpec,
    PipelineSpec,
    ResizeEvent,
    StageKind,
    StageSpec,
    WorkloadSpec,
)


@pytest.fixture
def unit_machine():
    return MachineSpec(total_cpus=8, cpu_ghz=1.0)


@pytest.fixture
def two_stage():
    return toy_pipeline()


@pytest.mark.parametrize(
    "cost,cpus,expected",
    [(1.0, 1, 1.0), (2.0, 4, 2.0)],
    ids=["identity", "linear-scaling"],
)
def test_stage_rate(unit_machine, cost, cpus, expected):
    stage = StageSpec(name="s", kind=StageKind.UDF_MAP, cost_per_item=cost)
    assert stage_rate(stage, cpus, unit_machine) == expected


def test_disk_load_is_bandwidth_capped():
    machine = MachineSpec(total_cpus=8, cpu_ghz=1.0, io_bandwidth_mbps=10.0)
    stage = StageSpec(name="disk", kind=StageKind.DISK_LOAD, cost_per_item=0.1)
    assert stage_rate(stage, 8, machine, sample_size_mb=1.0) == 10.0


def test_non_scalable_stage_ignores_extra_cpus(unit_machine):
    stage = StageSpec(name="s", kind=StageKind.SHUFFLE, cost_per_item=0.5, scalable=False)
    assert stage_rate(stage, 1, unit_machine) == stage_rate(stage, 6, unit_machine) == 2.0


def test_stage_rate_preconditions(unit_machine):
    with pytest.raises(PreconditionError):
        stage_rate(StageSpec(name="s", kind=StageKind.BATCH, cost_per_item=1.0), 0, unit_machine)
    with pytest.raises(PreconditionError):
        stage_rate(StageSpec(name="p", kind=StageKind.PREFETCH), 1, unit_machine)


def test_noise_has_mean_one_and_requested_cv(unit_machine):
    stage = StageSpec(name="s", kind=StageKind.UDF_MAP, cost_per_item=1.0, noise_cv=0.5)
    rng = np.random.default_rng(7)
    draws = np.array([stage_rate(stage, 1, unit_machine, rng_seed=rng) for _ in range(20000)])
    assert draws.mean() == pytest.approx(1.0, abs=0.02)
    assert draws.std() / draws.mean() == pytest.approx(0.5, abs=0.03)
    assert stage_rate(stage, 1, unit_machine) == 1.0


@pytest.mark.parametrize(
    "cpus,target,pipeline_rate,achieved,bottleneck",
    [((1, 1), 10.0, 0.5, 0.5, 1), ((1, 2), 10.0, 1.0, 1.0, 0), ((1, 2), 0.8, 1.0, 0.8, 0)],
    ids=["second-stage-bottleneck", "balanced", "model-capped"],
)
def test_pipeline_throughput_min_rule(two_stage, unit_machine, cpus, target, pipeline_rate, achieved, bottleneck):
    workload = WorkloadSpec.for_target_rate(1, target)
    report = pipeline_throughput(two_stage, Allocation(cpus=cpus), unit_machine, workload)
    assert report.pipeline_rate == pipeline_rate
    assert report.achieved_rate == pytest.approx(achieved)
    assert report.bottleneck_stage == bottleneck
    assert not report.oom


def test_pipeline_throughput_rejects_invalid_allocations(two_stage, unit_machine):
    workload = WorkloadSpec.for_target_rate(1, 10.0)
    for allocation in (Allocation(cpus=(1,)), Allocation(cpus=(0, 2)), Allocation(cpus=(5, 5)), Allocation(cpus=(1, 1), prefetch_units=1)):
        with pytest.raises(AllocationError):
            pipeline_throughput(two_stage, allocation, unit_machine, workload)


def test_pipeline_throughput_is_deterministic_per_seed():
    pipeline, machine, workload = default_pipeline(), default_machine(), default_workload()
    allocation = Allocation(cpus=(32, 32, 32, 32), prefetch_units=4)
    first = pipeline_throughput(pipeline, allocation, machine, workload, rng_seed=11)
    second = pipeline_throughput(pipeline, allocation, machine, workload, rng_seed=11)
    assert first == second
    assert first.achieved_rate <= workload.target_rate


def test_prefetch_overlap_and_min_rule():
    pipeline, machine, workload = default_pipeline(noise=False), default_machine(), default_workload()
    allocation = Allocation(cpus=(16, 32, 16, 64), prefetch_units=8)
    report = pipeline_throughput(pipeline, allocation, machine, workload)
    assert report.pipeline_rate / overlap_factor(8) == pytest.approx(min(report.stage_rates))
    assert overlap_factor(0) == pytest.approx(0.7)
    assert overlap_factor(4) == pytest.approx(1 - 0.3 * math.exp(-1))


def test_pipeline_rate_monotone_in_cpus():
    pipeline, machine, workload = default_pipeline(noise=False), default_machine(), default_workload()
    base = Allocation(cpus=(10, 10, 10, 10), prefetch_units=2)
    rate = pipeline_throughput(pipeline, base, machine, workload).pipeline_rate
    for i in range(4):
        cpus = list(base.cpus)
        cpus[i] += 5
        bigger = pipeline_throughput(pipeline, Allocation(cpus=tuple(cpus), prefetch_units=2), machine, workload)
        assert bigger.pipeline_rate >= rate


def test_memory_usage_examples():
    zero = PipelineSpec(
        stages=(
            StageSpec(name="a", kind=StageKind.BATCH, cost_per_item=1.0),
            StageSpec(name="b", kind=StageKind.UDF_MAP, cost_per_item=1.0, mem_per_replica=10.0),
            StageSpec(name="p", kind=StageKind.PREFETCH),
        ),
        sample_size_mb=1.0,
        batch_normalizer_mb=1.0,
    )
    workload = WorkloadSpec(batch_size=1, model_latency_s=1.0)
    assert memory_usage(zero, Allocation(cpus=(1, 3)), workload) == 30.0
    assert memory_usage(zero, Allocation(cpus=(1, 3), prefetch_units=2), workload) == 30.0 + 128.0
    assert memory_usage(toy_pipeline(), Allocation(cpus=(2, 4)), workload) == 0.0


def test_oom_flag_set_when_memory_exceeds_machine():
    pipeline = default_pipeline(noise=False)
    machine = MachineSpec(total_cpus=32, total_mem_mb=512.0)
    report = pipeline_throughput(pipeline, Allocation(cpus=(8, 8, 8, 8), prefetch_units=8), machine, default_workload())
    assert report.mem_used_mb > 512.0
    assert report.oom


def test_apply_resize():
    machine = MachineSpec(total_cpus=32)
    assert apply_resize(machine, ResizeEvent(step=0, new_cpu_count=64)).total_cpus == 64
    assert apply_resize(machine, ResizeEvent(step=0, new_cpu_count=32)) is machine
    with pytest.raises(ResizeError):
        apply_resize(MachineSpec(total_cpus=128), ResizeEvent(step=0, new_cpu_count=2), stage_count=5)


def test_max_prefetch_units_respects_limit():
    pipeline, workload = default_pipeline(), default_workload()
    cpus = (8, 8, 8, 8)
    units = max_prefetch_units(pipeline, cpus, workload, 1024.0)
    assert memory_usage(pipeline, Allocation(cpus=cpus, prefetch_units=units), workload) <= 1024.0
    assert memory_usage(pipeline, Allocation(cpus=cpus, prefetch_units=units + 1), workload) > 1024.0
    assert max_prefetch_units(toy_pipeline(), (1, 1), workload, 1024.0) == 0


def test_upper_bound_dominates_integer_allocations():
    pipeline, machine = toy_pipeline(), toy_machine()
    assert throughput_upper_bound(pipeline, machine) == pytest.approx(2.0)


def test_calibration_hits_single_cpu_fraction():
    machine, workload = MachineSpec(total_cpus=16), default_workload()
    pipeline = calibrate_cost_scale(case_study_pipeline(noise=False), machine, workload, 0.11)
    single = Allocation(cpus=(1, 1, 1, 1), prefetch_units=1)
    report = pipeline_throughput(pipeline, single, machine, workload)
    assert report.achieved_rate / workload.target_rate == pytest.approx(0.11)
    with pytest.raises(ValueError):
        calibrate_cost_scale(pipeline, machine, workload, 0.0)


def test_scale_for_batch_only_touches_batch_dependent_stages():
    pipeline = default_pipeline()
    scaled = scale_for_batch(pipeline, 4 * 24096, 24096)
    for before, after in zip(pipeline.stages, scaled.stages):
        if before.kind is StageKind.BATCH:
            assert after.cost_per_item == pytest.approx(before.cost_per_item * 4**0.05)
        else:
            assert after.cost_per_item == before.cost_per_item


@pytest.mark.parametrize("length,last_kind", [(2, StageKind.BATCH), (3, StageKind.SHUFFLE), (4, StageKind.UDF_MAP), (5, StageKind.PREFETCH)])
def test_reference_pipeline_lengths(length, last_kind):
    pipeline = default_pipeline(length)
    assert len(pipeline.stages) == length
    assert pipeline.stages[-1].kind is last_kind
    assert truncate_to_length(case_study_pipeline(), length).stages == pipeline.stages
