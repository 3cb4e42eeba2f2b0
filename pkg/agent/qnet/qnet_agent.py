import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..agent import Agent
from .mlp import (
    DimensionMismatchError,
    MlpParams,
    TrainingError,
    apply_gradients,
    init_params,
    loss_and_gradients,
    select_action,
    td_targets,
)
from .replay_buffer import ReplayBuffer, Transition, TransitionBatch
from environment.rl_env import (
    ACTION_DELTAS,
    PipelineEnv,
    StepOutcome,
    action_space_size,
    maintain_index,
    STATIC_FACTORS,
)

HEADS = ("joint", "factored")


@dataclass(frozen=True)
class AgentHyperparams:
    gamma: float = 0.9
    learning_rate: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 2000
    minibatch_size: int = 64
    target_sync_steps: int = 500
    replay_capacity: int = 10000
    train_every: int = 1
    hidden_sizes: tuple[int, int] = (64, 64)
    # "factored" scores each knob's delta separately and sums them per joint action
    head: str = "joint"
    episode_length: int = 200
    fine_tune_epsilon: float = 0.05
    random_start_prob: float = 0.5
    log_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ValueError("epsilon schedule must satisfy 0 <= epsilon_end <= epsilon_start <= 1")
        if not 0 <= self.fine_tune_epsilon <= 1:
            raise ValueError("fine_tune_epsilon must be in [0, 1]")
        for name in (
            "learning_rate",
            "epsilon_decay_steps",
            "minibatch_size",
            "target_sync_steps",
            "replay_capacity",
            "train_every",
            "episode_length",
            "log_every",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.hidden_sizes) != 2 or min(self.hidden_sizes) < 1:
            raise ValueError(f"hidden_sizes must be two positive sizes, got {self.hidden_sizes}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")

    def epsilon(self, step: int) -> float:
        progress = min(1.0, step / self.epsilon_decay_steps)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * progress

    def as_dict(self) -> dict:
        values = asdict(self)
        values["hidden_sizes"] = list(self.hidden_sizes)
        return values

    @classmethod
    def from_dict(cls, values: dict) -> "AgentHyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"Unknown hyperparameters: {sorted(unknown)}")
        # yaml reads "1e-3" as a string
        coerced = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            value = values[f.name]
            if f.name == "hidden_sizes":
                coerced[f.name] = tuple(int(v) for v in value)
            else:
                coerced[f.name] = type(f.default)(value)
        return cls(**coerced)


def knob_choices(hyper: AgentHyperparams) -> int:
    return len(ACTION_DELTAS) if hyper.head == "factored" else 0


def network_dims(r: int, hyper: AgentHyperparams) -> tuple[int, ...]:
    outputs = len(ACTION_DELTAS) * r if hyper.head == "factored" else action_space_size(r)
    return (STATIC_FACTORS + r,) + hyper.hidden_sizes + (outputs,)


def sgd_step(
    params: MlpParams,
    minibatch: Union[TransitionBatch, Sequence[Transition]],
    target_params: MlpParams,
    hyper: AgentHyperparams,
) -> tuple[MlpParams, float]:
    if not isinstance(minibatch, TransitionBatch):
        if not minibatch:
            raise ValueError("sgd_step needs a non-empty minibatch")
        minibatch = TransitionBatch.from_transitions(minibatch)
    if len(minibatch) == 0:
        raise ValueError("sgd_step needs a non-empty minibatch")

    targets = td_targets(
        target_params,
        minibatch.rewards,
        minibatch.next_states,
        minibatch.dones,
        minibatch.next_masks,
        hyper.gamma,
    )
    loss, grad_w, grad_b = loss_and_gradients(params, minibatch.states, minibatch.actions, targets)
    if not np.isfinite(loss):
        raise TrainingError(f"Non-finite TD loss: {loss}")
    updated = apply_gradients(params, grad_w, grad_b, hyper.learning_rate)
    if not updated.is_finite():
        raise TrainingError(f"Parameters diverged after an update with loss {loss:.6g}")
    return updated, loss


class QnetAgent(Agent):
    def __init__(
        self,
        r: int,
        hyper: AgentHyperparams = AgentHyperparams(),
        params: Optional[MlpParams] = None,
        log_level=logging.INFO,
    ):
        super().__init__(__name__, {}, log_level)
        self.r = r
        self.hyper = hyper
        dims = network_dims(r, hyper)
        if params is None:
            params = init_params(dims, hyper.seed, knob_choices(hyper))
        elif (
            params.layer_dims[0] != dims[0]
            or params.layer_dims[-1] != dims[-1]
            or params.knob_choices != knob_choices(hyper)
        ):
            raise DimensionMismatchError(
                f"Parameters {params.layer_dims} do not fit a pipeline with r={r} (expected {dims})"
            )
        self.params = params
        self.target_params = params.copy()
        self.buffer = ReplayBuffer(hyper.replay_capacity, dims[0], action_space_size(r), seed=hyper.seed)
        self.rng = np.random.default_rng(hyper.seed)
        self.steps_done = 0
        self.updates_done = 0
        self.training_curve: list[dict] = []
        self._recent_losses: list[float] = []
        self._recent_rewards: list[float] = []

    def check_env(self, env: PipelineEnv):
        if env.r != self.r or env.state_dim != self.params.input_dim:
            raise DimensionMismatchError(
                f"Agent built for r={self.r} ({self.params.input_dim} inputs) cannot drive an env with r={env.r}"
            )

    def sync_target(self):
        self.target_params = self.params.copy()

    def act(self, env: PipelineEnv, epsilon: float = 0.0) -> int:
        return select_action(
            self.params, env.state().as_vector(), env.feasible_mask(), epsilon, self.rng
        )

    def _learn(self, transition: Transition):
        self.buffer.add(transition)
        self.steps_done += 1
        self._recent_rewards.append(transition.reward)
        if (
            self.steps_done % self.hyper.train_every == 0
            and len(self.buffer) >= self.hyper.minibatch_size
        ):
            batch = self.buffer.sample(self.hyper.minibatch_size)
            self.params, loss = sgd_step(self.params, batch, self.target_params, self.hyper)
            self.updates_done += 1
            self._recent_losses.append(loss)
        if self.steps_done % self.hyper.target_sync_steps == 0:
            self.sync_target()
        if self.steps_done % self.hyper.log_every == 0:
            self._record_curve()

    def _record_curve(self):
        point = {
            "step": self.steps_done,
            "loss": float(np.mean(self._recent_losses)) if self._recent_losses else float("nan"),
            "mean_reward": float(np.mean(self._recent_rewards)) if self._recent_rewards else 0.0,
        }
        self.training_curve.append(point)
        self._recent_losses.clear()
        self._recent_rewards.clear()
        self._logger.debug(
            f"step {point['step']}: loss {point['loss']:.6g}, mean reward {point['mean_reward']:.4f}"
        )

    def _interact(self, env: PipelineEnv, epsilon: float) -> StepOutcome:
        if env.in_downtime:
            return env.step(maintain_index(self.r))
        state = env.state().as_vector()
        action = select_action(self.params, state, env.feasible_mask(), epsilon, self.rng)
        outcome = env.step(action)
        self._learn(
            Transition(
                state=state,
                action=action,
                reward=outcome.reward,
                next_state=outcome.state.as_vector(),
                done=outcome.crashed,
                next_mask=env.feasible_mask(),
            )
        )
        return outcome

    def pretrain_offline(self, env_sampler: Callable[[np.random.Generator], PipelineEnv], steps: int) -> MlpParams:
        sampler_r = getattr(env_sampler, "r", self.r)
        if sampler_r != self.r:
            raise DimensionMismatchError(f"Sampler draws r={sampler_r} pipelines, agent has r={self.r}")
        self._logger.info(f"Offline pretraining for {steps} steps (r={self.r})")
        env = None
        episode_step = 0
        for t in range(steps):
            if env is None or episode_step >= self.hyper.episode_length:
                env = env_sampler(self.rng)
                self.check_env(env)
                start = self.rng if self.rng.random() < self.hyper.random_start_prob else None
                env.reset(random_start=start)
                episode_step = 0
            outcome = self._interact(env, self.hyper.epsilon(t))
            episode_step += 1
            if outcome.crashed:
                env = None
        self.sync_target()
        self._logger.info(f"Offline pretraining done after {self.updates_done} updates")
        return self.params

    def fine_tune_online(self, env: PipelineEnv, steps: int) -> list[StepOutcome]:
        self.check_env(env)
        trajectory = []
        for _ in range(steps):
            trajectory.append(self._interact(env, self.hyper.fine_tune_epsilon))
        return trajectory


def pretrain_offline(
    env_sampler: Callable[[np.random.Generator], PipelineEnv],
    hyper: AgentHyperparams,
    steps: int,
    log_level=logging.INFO,
) -> MlpParams:
    agent = QnetAgent(env_sampler.r, hyper, log_level=log_level)
    return agent.pretrain_offline(env_sampler, steps)


def fine_tune_online(
    params: MlpParams,
    env: PipelineEnv,
    hyper: AgentHyperparams,
    steps: int,
    log_level=logging.INFO,
) -> tuple[MlpParams, list[StepOutcome]]:
    if params.input_dim != env.state_dim or params.action_count != env.action_count:
        raise DimensionMismatchError(
            f"Parameters {params.layer_dims} do not match env (state {env.state_dim}, actions {env.action_count})"
        )
    agent = QnetAgent(env.r, hyper, params=params.copy(), log_level=log_level)
    trajectory = agent.fine_tune_online(env, steps)
    return agent.params, trajectory
