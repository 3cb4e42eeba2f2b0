import numpy as np
import pytest
from .env_sampler import EnvSampler
from .rl_env import (
    EVENT_NONE,
    EVENT_OOM,
    EVENT_RELAUNCH,
    EVENT_RESIZE,
    ActionError,
    EnvConfig,
    EnvError,
    PipelineEnv,
    ResetPolicy,
    action_space_size,
    allocation_space_size,
    compute_reward,
    convergence_step,
    decode_action,
    detect_convergence,
    encode_action,
    even_split,
    maintain_index,
)
from common.pipeline_model import Allocation, MachineSpec, ResizeEvent, WorkloadSpec
from simulator.default_pipelines import default_pipeline, default_workload, toy_machine, toy_pipeline
from simulator.pipeline_simulator import ResizeError


@pytest.fixture
def toy_env():
    return PipelineEnv(toy_pipeline(), toy_machine(6), WorkloadSpec.for_target_rate(1, 10.0))


def tight_env(total_mem_mb: float, **config) -> PipelineEnv:
    return PipelineEnv(
        default_pipeline(noise=False),
        MachineSpec(total_cpus=32, total_mem_mb=total_mem_mb),
        default_workload(),
        EnvConfig(**config),
    )


@pytest.mark.parametrize(
    "budget,knobs,expected",
    [(10, 4, (3, 3, 2, 2)), (7, 3, (3, 2, 2)), (6, 2, (3, 3)), (5, 5, (1, 1, 1, 1, 1))],
)
def test_even_split(budget, knobs, expected):
    assert even_split(budget, knobs) == expected


def test_even_split_needs_one_cpu_per_stage():
    with pytest.raises(EnvError):
        even_split(4, 5)


@pytest.mark.parametrize(
    "throughput_norm,mem_used,mem_total,expected",
    [(1.0, 500.0, 1000.0, 0.5), (0.5, 1000.0, 1000.0, 0.0), (0.31, 500.0, 1000.0, 0.155), (1.0, 2000.0, 1000.0, 0.0)],
)
def test_compute_reward(throughput_norm, mem_used, mem_total, expected):
    assert compute_reward(throughput_norm, mem_used, mem_total) == pytest.approx(expected)


def test_action_encoding():
    assert maintain_index(3) == 62
    assert action_space_size(5) == 3125
    assert decode_action(62, 3) == (0, 0, 0)
    assert decode_action(0, 2) == (-5, -5)
    for deltas in [(-5, 1, 0), (5, 5, 5), (0, -1, 5)]:
        assert decode_action(encode_action(deltas), 3) == deltas


def test_action_encoding_errors():
    with pytest.raises(ActionError):
        encode_action((2, 0))
    with pytest.raises(ActionError):
        decode_action(125, 3)


@pytest.mark.parametrize("n,r,expected", [(128, 5, 12082785), (2, 2, 3), (0, 4, 1), (0, 1, 1)])
def test_allocation_space_size(n, r, expected):
    assert allocation_space_size(n, r) == expected


def test_allocation_space_size_limit():
    with pytest.raises(OverflowError):
        allocation_space_size(128, 5, limit=1_000_000)


def test_reset_uses_even_split(toy_env):
    assert toy_env.allocation == Allocation(cpus=(3, 3))
    state = toy_env.state()
    assert state.as_vector().shape == (toy_env.state_dim,)
    assert state.alloc_frac == (0.5, 0.5)
    assert state.free_cpus_frac == 0.0


def test_feasible_mask_budget_and_floor(toy_env):
    mask = toy_env.feasible_mask()
    assert mask.shape == (25,)
    assert mask[maintain_index(2)]
    assert not mask[encode_action((1, 0))]
    assert not mask[encode_action((-5, 0))]
    assert mask[encode_action((-1, 1))]
    assert mask[encode_action((-1, -1))]


def test_feasible_mask_ignores_memory_by_default():
    env = tight_env(780.0)
    assert not env.config.mem_guard
    mask = env.feasible_mask()
    assert mask[encode_action((0, 0, 0, 0, 1))]
    assert mask[encode_action((0, 0, 0, 0, 5))]
    assert not mask[encode_action((0, 0, 0, 0, -5))]


def test_feasible_mask_opt_in_memory_guard():
    # 640 MB of stages plus one 60.24 MB prefetch unit; the guard sits at 741 MB
    env = tight_env(780.0, mem_guard=True)
    mask = env.feasible_mask()
    assert mask[maintain_index(5)]
    assert not mask[encode_action((0, 0, 0, 0, 1))]
    assert mask[encode_action((0, 0, 0, 0, -1))]
    assert mask[encode_action((1, -1, 0, 0, 0))]


def test_feasible_mask_frozen_knobs():
    env = PipelineEnv(
        toy_pipeline(), toy_machine(6), WorkloadSpec.for_target_rate(1, 10.0), tunable=[True, False]
    )
    mask = env.feasible_mask()
    assert mask[encode_action((-1, 0))]
    assert not mask[encode_action((-1, 1))]
    assert not mask[encode_action((0, -1))]
    with pytest.raises(EnvError):
        PipelineEnv(toy_pipeline(), toy_machine(6), WorkloadSpec.for_target_rate(1, 10.0), tunable=[True])


def test_step_applies_deltas(toy_env):
    outcome = toy_env.step((-1, 0))
    assert toy_env.allocation == Allocation(cpus=(2, 3))
    assert outcome.info["event"] == EVENT_NONE
    assert not outcome.crashed
    # rates 2.0 and 1.5 against a target of 10
    assert outcome.reward == pytest.approx(0.15)
    assert outcome.state.free_cpus_frac == pytest.approx(1 / 6)


def test_step_clamps_to_floor_and_budget(toy_env):
    outcome = toy_env.step((-5, 5))
    assert toy_env.allocation == Allocation(cpus=(1, 3))
    assert outcome.info["clamped"]


def test_step_rejects_malformed_actions(toy_env):
    with pytest.raises(ActionError):
        toy_env.step((0,))
    with pytest.raises(ActionError):
        toy_env.step((0, 3))
    with pytest.raises(ActionError):
        toy_env.step(25)


def test_oom_downtime_then_even_split_reset():
    env = tight_env(720.0, mem_guard=False, oom_downtime_steps=3)
    start = env.allocation
    crash = env.step((0, 0, 0, 0, 5))
    assert crash.crashed
    assert crash.reward == 0.0
    assert crash.info["event"] == EVENT_OOM
    downtime = [env.step(maintain_index(5)) for _ in range(3)]
    assert all(o.reward == 0.0 and o.info["downtime"] and o.info["event"] == EVENT_OOM for o in downtime)
    assert env.allocation == start
    after = env.step(maintain_index(5))
    assert not after.info["downtime"]
    assert after.info["event"] == EVENT_NONE
    assert after.reward > 0


def test_oom_reset_to_last_safe_allocation():
    env = tight_env(720.0, mem_guard=False, oom_downtime_steps=1, reset_policy_after_oom=ResetPolicy.LAST_SAFE)
    env.step((1, -1, 0, 0, 0))
    safe = env.allocation
    assert env.step((0, 0, 0, 0, 5)).crashed
    env.step(maintain_index(5))
    assert env.allocation == safe


def test_resize_shrinks_allocation_at_the_scheduled_step():
    env = PipelineEnv(
        toy_pipeline(),
        toy_machine(6),
        WorkloadSpec.for_target_rate(1, 10.0),
        EnvConfig(resize_schedule=(ResizeEvent(step=2, new_cpu_count=4),)),
    )
    outcomes = [env.step(maintain_index(2)) for _ in range(4)]
    assert [o.info["cpu_budget"] for o in outcomes] == [6, 6, 4, 4]
    assert [o.info["event"] for o in outcomes] == [EVENT_NONE, EVENT_NONE, EVENT_RESIZE, EVENT_NONE]
    assert outcomes[2].info["clamped"]
    assert env.allocation == Allocation(cpus=(2, 2))


def test_resize_below_stage_count_fails():
    env = PipelineEnv(
        toy_pipeline(),
        toy_machine(6),
        WorkloadSpec.for_target_rate(1, 10.0),
        EnvConfig(resize_schedule=(ResizeEvent(step=0, new_cpu_count=1),)),
    )
    with pytest.raises(ResizeError):
        env.step(maintain_index(2))


def test_relaunch_downtime(toy_env):
    toy_env.relaunch(Allocation(cpus=(2, 4)), downtime_steps=2)
    outcomes = [toy_env.step(maintain_index(2)) for _ in range(3)]
    assert [o.info["event"] for o in outcomes] == [EVENT_RELAUNCH, EVENT_RELAUNCH, EVENT_NONE]
    assert [o.reward for o in outcomes[:2]] == [0.0, 0.0]
    assert toy_env.allocation == Allocation(cpus=(2, 4))
    assert outcomes[2].reward == pytest.approx(0.2)


def test_noise_is_deterministic_per_seed():
    def rewards(seed):
        env = PipelineEnv(default_pipeline(), MachineSpec(total_cpus=32), default_workload(), EnvConfig(noise_seed=seed))
        return [env.step(encode_action((1, -1, 0, 0, 0))).reward for _ in range(5)]

    assert rewards(3) == rewards(3)
    assert rewards(3) != rewards(4)


def test_detect_convergence():
    assert detect_convergence([0.7] * 40, window=10)
    assert not detect_convergence([0.7] * 19, window=10)
    assert not detect_convergence([0.1 * i for i in range(40)], window=10)
    with pytest.raises(ValueError):
        detect_convergence([0.0] * 10, window=1)


def test_convergence_after_plateau():
    history = [float(i) for i in range(11)] + [10.0] * 30
    assert not detect_convergence(history[:29], window=10)
    assert detect_convergence(history[:30], window=10)
    assert convergence_step(history, window=10) == 30
    assert convergence_step([0.1 * i for i in range(40)], window=10) is None


def test_env_sampler_keeps_knob_count():
    sampler = EnvSampler(
        default_pipeline(), MachineSpec(total_cpus=64), default_workload(), cost_jitter=0.2, cpu_range=(16, 64)
    )
    rng = np.random.default_rng(0)
    envs = [sampler(rng) for _ in range(20)]
    assert {env.r for env in envs} == {5}
    assert all(16 <= env.budget <= 64 for env in envs)
    for env in envs:
        for base, drawn in zip(default_pipeline().cpu_stages, env.pipeline.cpu_stages):
            assert base.cost_per_item / 1.2 <= drawn.cost_per_item <= base.cost_per_item * 1.2


def test_env_sampler_is_seeded():
    sampler = EnvSampler(default_pipeline(), MachineSpec(total_cpus=64), default_workload(), cpu_range=(8, 64))
    first = sampler(np.random.default_rng(5))
    second = sampler(np.random.default_rng(5))
    assert first.budget == second.budget
    assert first.config.noise_seed == second.config.noise_seed
    with pytest.raises(ValueError):
        EnvSampler(default_pipeline(), MachineSpec(total_cpus=64), default_workload(), cpu_range=(2, 64))
