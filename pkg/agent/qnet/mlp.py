"""Three-layer ReLU perceptron for Q(s, a) with hand-written backprop.

Weights are stored (out, in), row-major; everything is float64.

The output layer is either one unit per joint action or, with knob_choices set,
one unit per (knob, choice) pair; a joint action then scores the sum of its
knobs' units. Knob 0 is the most significant digit of the joint index.
"""
import functools
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DimensionMismatchError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    knob_choices: int = 0

    def __post_init__(self):
        if self.knob_choices and self.output_dim % self.knob_choices:
            raise DimensionMismatchError(
                f"{self.output_dim} output units do not split into knobs of {self.knob_choices} choices"
            )

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def factored(self) -> bool:
        return self.knob_choices > 0

    @property
    def action_count(self) -> int:
        if not self.factored:
            return self.output_dim
        return self.knob_choices ** (self.output_dim // self.knob_choices)

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            knob_choices=self.knob_choices,
        )

    def mac_count(self) -> int:
        """Multiply-accumulates of one forward pass."""
        return sum(w.size for w in self.weights)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.weights + self.biases)

    def equals(self, other: "MlpParams") -> bool:
        return (
            self.layer_dims == other.layer_dims
            and self.knob_choices == other.knob_choices
            and all(
                np.array_equal(a, b)
                for a, b in zip(self.weights + self.biases, other.weights + other.biases)
            )
        )


def init_params(layer_dims: Sequence[int], seed: int = 0, knob_choices: int = 0) -> MlpParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights=weights, biases=biases, knob_choices=knob_choices)


def zero_params(layer_dims: Sequence[int], knob_choices: int = 0) -> MlpParams:
    return MlpParams(
        weights=[np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
        biases=[np.zeros(o) for o in layer_dims[1:]],
        knob_choices=knob_choices,
    )


def _check_input(params: MlpParams, states: np.ndarray):
    if states.shape[-1] != params.input_dim:
        raise DimensionMismatchError(
            f"State has {states.shape[-1]} features, network expects {params.input_dim}"
        )


def forward_cache(params: MlpParams, states: np.ndarray):
    """Forward pass over a (batch, in) matrix keeping what backprop needs."""
    activations = [states]
    pre_activations = []
    h = states
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre_activations.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        activations.append(h)
    return activations, pre_activations


@functools.lru_cache(maxsize=None)
def digit_columns(knobs: int, choices: int) -> np.ndarray:
    """(choices**knobs, knobs) table: row a holds the output unit of each knob of action a."""
    digits = np.array(list(itertools.product(range(choices), repeat=knobs)), dtype=np.intp)
    columns = digits + choices * np.arange(knobs, dtype=np.intp)
    columns.flags.writeable = False
    return columns


def _head_columns(params: MlpParams) -> np.ndarray:
    return digit_columns(params.output_dim // params.knob_choices, params.knob_choices)


def joint_q(params: MlpParams, head: np.ndarray) -> np.ndarray:
    """Joint action values from a (batch, out) matrix of output activations."""
    if not params.factored:
        return head
    c = params.knob_choices
    q = head[:, :c]
    for start in range(c, head.shape[1], c):
        q = (q[:, :, None] + head[:, None, start : start + c]).reshape(head.shape[0], -1)
    return q


def forward(params: MlpParams, state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    _check_input(params, state)
    activations, _ = forward_cache(params, np.atleast_2d(state))
    q = joint_q(params, activations[-1])
    return q[0] if state.ndim == 1 else q


def loss_and_gradients(
    params: MlpParams,
    states: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared TD error on the taken actions and its exact gradient."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    _check_input(params, states)
    batch = states.shape[0]
    rows = np.arange(batch)

    activations, pre_activations = forward_cache(params, states)
    head = activations[-1]
    if params.factored:
        units = _head_columns(params)[actions]
        errors = head[rows[:, None], units].sum(axis=1) - targets
    else:
        errors = head[rows, actions] - targets
    loss = float(np.mean(errors**2))

    delta = np.zeros_like(head)
    if params.factored:
        delta[rows[:, None], units] = (2.0 * errors / batch)[:, None]
    else:
        delta[rows, actions] = 2.0 * errors / batch

    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    for i in reversed(range(len(params.weights))):
        grad_w[i] = delta.T @ activations[i]
        grad_b[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i]) * (pre_activations[i - 1] > 0)
    return loss, grad_w, grad_b


def td_targets(
    target_params: MlpParams,
    rewards: np.ndarray,
    next_states: np.ndarray,
    dones: np.ndarray,
    next_masks: np.ndarray,
    gamma: float,
) -> np.ndarray:
    q_next = forward(target_params, np.atleast_2d(next_states))
    q_next = np.where(next_masks, q_next, -np.inf)
    best = q_next.max(axis=1)
    best = np.where(np.isfinite(best), best, 0.0)
    return rewards + gamma * np.where(dones, 0.0, best)


def apply_gradients(
    params: MlpParams, grad_w: list[np.ndarray], grad_b: list[np.ndarray], learning_rate: float
) -> MlpParams:
    return MlpParams(
        weights=[w - learning_rate * g for w, g in zip(params.weights, grad_w)],
        biases=[b - learning_rate * g for b, g in zip(params.biases, grad_b)],
        knob_choices=params.knob_choices,
    )


def select_action(
    params: MlpParams,
    state: np.ndarray,
    mask: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> int:
    mask = np.asarray(mask, dtype=bool)
    feasible = np.flatnonzero(mask)
    if feasible.size == 0:
        raise ValueError("No feasible action in mask")
    if rng.random() < epsilon:
        return int(rng.choice(feasible))
    q = forward(params, state)
    if q.shape[0] != mask.shape[0]:
        raise DimensionMismatchError(
            f"Network has {q.shape[0]} outputs, mask has {mask.shape[0]} actions"
        )
    return int(np.argmax(np.where(mask, q, -np.inf)))
