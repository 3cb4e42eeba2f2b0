import logging

import numpy as np
import pytest
from scipy.stats import chisquare
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .mlp import (
    DimensionMismatchError,
    MlpParams,
    TrainingError,
    digit_columns,
    forward,
    init_params,
    loss_and_gradients,
    select_action,
    td_targets,
    zero_params,
)
from .qnet_agent import AgentHyperparams, QnetAgent, network_dims, sgd_step
from .replay_buffer import ReplayBuffer, Transition
from common.pipeline_model import Allocation, WorkloadSpec
from environment.env_sampler import EnvSampler
from environment.rl_env import EnvConfig, PipelineEnv, maintain_index
from simulator.default_pipelines import toy_machine, toy_pipeline


@pytest.fixture
def bias_only():
    """Zero weights, so Q(s, a) = a for every state."""
    params = zero_params((6, 8, 8, 10))
    params.biases[-1] = np.arange(10, dtype=np.float64)
    return params


def test_forward_hand_computed():
    params = MlpParams(
        weights=[np.eye(2), np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([[2.0, -1.0]])],
        biases=[np.array([0.0, -1.0]), np.zeros(2), np.array([0.5])],
    )
    assert forward(params, np.array([3.0, 2.0]))[0] == pytest.approx(7.5)
    assert forward(params, np.array([-1.0, 2.0]))[0] == pytest.approx(1.5)
    assert params.layer_dims == (2, 2, 2, 1)
    assert params.mac_count() == 4 + 4 + 2


def test_forward_rejects_wrong_state_size(bias_only):
    with pytest.raises(DimensionMismatchError):
        forward(bias_only, np.zeros(5))


def worst_relative_error(params, states, actions, targets, h=1e-5) -> float:
    """Largest backprop vs central-difference relative error over every parameter."""
    _, grad_w, grad_b = loss_and_gradients(params, states, actions, targets)
    worst = 0.0
    for tensors, grads in ((params.weights, grad_w), (params.biases, grad_b)):
        for tensor, grad in zip(tensors, grads):
            for index in np.ndindex(tensor.shape):
                original = tensor[index]
                tensor[index] = original + h
                up, _, _ = loss_and_gradients(params, states, actions, targets)
                tensor[index] = original - h
                down, _, _ = loss_and_gradients(params, states, actions, targets)
                tensor[index] = original
                numeric = (up - down) / (2 * h)
                # floor keeps parameters of dead ReLUs from dividing roundoff by zero
                scale = max(abs(grad[index]) + abs(numeric), 1e-6)
                worst = max(worst, abs(grad[index] - numeric) / scale)
    return worst


@pytest.mark.parametrize("knob_choices,actions", [(0, 10), (5, 25)], ids=["joint", "factored"])
def test_gradients_match_finite_differences(knob_choices, actions):
    worst = 0.0
    for draw in range(100):
        rng = np.random.default_rng(draw)
        params = init_params((6, 8, 8, 10), seed=draw, knob_choices=knob_choices)
        state = rng.normal(size=(1, 6))
        action = rng.integers(actions, size=1)
        target = rng.normal(size=1)
        worst = max(worst, worst_relative_error(params, state, action, target))
    assert worst <= 1e-4


def test_factored_head_sums_knob_units():
    params = zero_params((6, 8, 8, 10), knob_choices=5)
    params.biases[-1] = np.arange(10, dtype=np.float64)
    assert params.action_count == 25
    q = forward(params, np.zeros(6))
    assert q.shape == (25,)
    # action d0 * 5 + d1 scores unit d0 of knob 0 plus unit 5 + d1 of knob 1
    expected = [d0 + 5 + d1 for d0 in range(5) for d1 in range(5)]
    np.testing.assert_array_equal(q, expected)
    np.testing.assert_array_equal(digit_columns(2, 5)[13], [2, 8])
    with pytest.raises(DimensionMismatchError):
        zero_params((6, 8, 8, 12), knob_choices=5)


def test_td_targets(bias_only):
    rewards = np.full(4, 0.5)
    next_states = np.zeros((4, 6))
    masks = np.ones((4, 10), dtype=bool)
    masks[1, 2:] = False
    masks[2, :] = False
    dones = np.array([False, False, False, True])
    targets = td_targets(bias_only, rewards, next_states, dones, masks, gamma=0.9)
    np.testing.assert_allclose(targets, [0.5 + 0.9 * 9, 0.5 + 0.9 * 1, 0.5, 0.5])


def test_select_action_respects_mask(bias_only):
    rng = np.random.default_rng(0)
    mask = np.ones(10, dtype=bool)
    assert select_action(bias_only, np.zeros(6), mask, 0.0, rng) == 9
    mask[9] = False
    assert select_action(bias_only, np.zeros(6), mask, 0.0, rng) == 8
    only = np.zeros(10, dtype=bool)
    only[[1, 4]] = True
    assert {select_action(bias_only, np.zeros(6), only, 1.0, rng) for _ in range(50)} <= {1, 4}
    with pytest.raises(ValueError):
        select_action(bias_only, np.zeros(6), np.zeros(10, dtype=bool), 0.0, rng)


def test_replay_buffer_is_a_fifo_ring():
    buffer = ReplayBuffer(capacity=3, state_dim=2, action_count=4, seed=0)
    with pytest.raises(ValueError):
        buffer.sample(1)
    for i in range(5):
        buffer.add(Transition(np.zeros(2), i % 4, float(i), np.zeros(2), False, np.ones(4, dtype=bool)))
    assert len(buffer) == 3
    batch = buffer.sample(10)
    assert len(batch) == 3
    assert set(batch.rewards) == {2.0, 3.0, 4.0}
    with pytest.raises(ValueError):
        buffer.add(Transition(np.zeros(2), 0, -1.0, np.zeros(2), False, np.ones(4, dtype=bool)))


def test_sgd_step_fits_immediate_rewards_with_zero_discount():
    hyper = AgentHyperparams(gamma=0.0, learning_rate=0.01)
    params = init_params((6, 8, 8, 10), seed=3)
    state = np.full(6, 0.5)
    rewards = [0.1, 0.9, 0.4, 0.0, 0.7]
    batch = [
        Transition(state, action, reward, state, False, np.ones(10, dtype=bool))
        for action, reward in enumerate(rewards)
    ]
    for _ in range(5000):
        params, loss = sgd_step(params, batch, params, hyper)
    np.testing.assert_allclose(forward(params, state)[:5], rewards, atol=0.01)
    with pytest.raises(ValueError):
        sgd_step(params, [], params, hyper)


def test_hyperparams_from_dict_coerces_yaml_strings():
    hyper = AgentHyperparams.from_dict({"learning_rate": "1e-3", "hidden_sizes": [16, 8], "minibatch_size": "32"})
    assert hyper.learning_rate == 0.001
    assert hyper.hidden_sizes == (16, 8)
    assert hyper.minibatch_size == 32
    with pytest.raises(ValueError):
        AgentHyperparams.from_dict({"learning_rat": 0.1})
    with pytest.raises(ValueError):
        AgentHyperparams(gamma=1.0)


def test_epsilon_schedule():
    hyper = AgentHyperparams(epsilon_start=1.0, epsilon_end=0.1, epsilon_decay_steps=100)
    assert hyper.epsilon(0) == 1.0
    assert hyper.epsilon(50) == pytest.approx(0.55)
    assert hyper.epsilon(1000) == pytest.approx(0.1)


def test_network_dims():
    assert network_dims(5, AgentHyperparams()) == (11, 64, 64, 3125)
    assert network_dims(2, AgentHyperparams(hidden_sizes=(32, 16))) == (8, 32, 16, 25)
    assert network_dims(5, AgentHyperparams(head="factored")) == (11, 64, 64, 25)
    with pytest.raises(ValueError):
        AgentHyperparams(head="dueling")


def test_sgd_step_rejects_a_diverging_update(bias_only):
    hyper = AgentHyperparams(gamma=0.0, learning_rate=1e308)
    batch = [Transition(np.zeros(6), 0, 1000.0, np.zeros(6), False, np.ones(10, dtype=bool))]
    with pytest.raises(TrainingError):
        sgd_step(bias_only, batch, bias_only, hyper)


def test_checkpoint_round_trip(tmp_path):
    hyper = AgentHyperparams(hidden_sizes=(16, 16))
    params = init_params(network_dims(2, hyper), seed=4)
    path = save_checkpoint(tmp_path / "nested" / "toy.json", params, hyper, 2)
    loaded, loaded_hyper, r = load_checkpoint(path, expected_r=2)
    assert loaded.equals(params)
    assert loaded_hyper == hyper
    assert r == 2
    with pytest.raises(DimensionMismatchError):
        load_checkpoint(path, expected_r=3)


def test_checkpoint_keeps_the_factored_head(tmp_path):
    hyper = AgentHyperparams(hidden_sizes=(8, 8), head="factored")
    agent = QnetAgent(3, hyper)
    path = save_checkpoint(tmp_path / "factored.json", agent.params, hyper, 3)
    loaded, loaded_hyper, _ = load_checkpoint(path, expected_r=3)
    assert loaded_hyper.head == "factored"
    assert loaded.knob_choices == 5
    assert loaded.equals(agent.params)
    assert loaded.action_count == 125
    QnetAgent(3, loaded_hyper, params=loaded)
    with pytest.raises(DimensionMismatchError):
        QnetAgent(3, AgentHyperparams(hidden_sizes=(8, 8)), params=loaded)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
    corrupt = tmp_path / "corrupt.json"
    corrupt.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(corrupt)
    incomplete = tmp_path / "incomplete.json"
    incomplete.write_text('{"format_version": 1}')
    with pytest.raises(CheckpointError):
        load_checkpoint(incomplete)


def test_agent_rejects_params_for_other_pipelines():
    params = init_params(network_dims(3, AgentHyperparams()))
    with pytest.raises(DimensionMismatchError):
        QnetAgent(2, AgentHyperparams(), params=params)
    agent = QnetAgent(3, AgentHyperparams(hidden_sizes=(8, 8)))
    env = PipelineEnv(toy_pipeline(), toy_machine(), WorkloadSpec(batch_size=2, model_latency_s=1.0))
    with pytest.raises(DimensionMismatchError):
        agent.fine_tune_online(env, 1)


def test_fine_tune_online_learns_and_stays_within_budget():
    env = PipelineEnv(toy_pipeline(), toy_machine(), WorkloadSpec(batch_size=2, model_latency_s=1.0))
    agent = QnetAgent(2, AgentHyperparams(hidden_sizes=(8, 8), minibatch_size=8))
    trajectory = agent.fine_tune_online(env, 40)
    assert len(trajectory) == 40
    assert agent.updates_done == 40 - 8 + 1
    assert all(o.info["allocation"].total_cpus <= 6 for o in trajectory)
    assert all(0.0 <= o.reward <= 1.0 for o in trajectory)


def toy_split_reached(seed: int) -> bool:
    """Pretrain on the noiseless toy pipeline; greedy episodes must end on (2, 4) in 9 of 10."""
    workload = WorkloadSpec(batch_size=2, model_latency_s=1.0)
    hyper = AgentHyperparams(
        epsilon_decay_steps=10000,
        minibatch_size=32,
        target_sync_steps=200,
        hidden_sizes=(32, 32),
        episode_length=50,
        random_start_prob=1.0,
        seed=seed,
    )
    sampler = EnvSampler(toy_pipeline(), toy_machine(), workload, EnvConfig(noise_seed=None))
    agent = QnetAgent(2, hyper, log_level=logging.WARNING)
    agent.pretrain_offline(sampler, 20000)

    rng = np.random.default_rng(99 + seed)
    reached = 0
    for _ in range(10):
        env = PipelineEnv(toy_pipeline(), toy_machine(), workload, EnvConfig(noise_seed=None))
        env.reset(random_start=rng)
        for _ in range(20):
            env.step(agent.act(env))
        reached += env.allocation == Allocation(cpus=(2, 4))
    return reached >= 9


@pytest.mark.slow
def test_toy_pipeline_agent_finds_the_best_split():
    assert sum(toy_split_reached(seed) for seed in range(10)) >= 8


def test_exploration_is_uniform_over_feasible_actions(bias_only):
    rng = np.random.default_rng(1)
    mask = np.zeros(10, dtype=bool)
    mask[[0, 2, 5, 7, 9]] = True
    picks = [select_action(bias_only, np.zeros(6), mask, 1.0, rng) for _ in range(5000)]
    counts = np.bincount(picks, minlength=10)
    assert counts[~mask].sum() == 0
    assert chisquare(counts[mask]).pvalue > 0.001
