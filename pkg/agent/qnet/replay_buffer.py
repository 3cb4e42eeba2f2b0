from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    next_mask: np.ndarray


@dataclass(frozen=True)
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    next_masks: np.ndarray

    def __len__(self):
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        return cls(
            states=np.array([t.state for t in transitions], dtype=np.float64),
            actions=np.array([t.action for t in transitions], dtype=np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_state for t in transitions], dtype=np.float64),
            dones=np.array([t.done for t in transitions], dtype=bool),
            next_masks=np.array([t.next_mask for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_count: int, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"Replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._states = np.zeros((capacity, state_dim))
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity)
        self._next_states = np.zeros((capacity, state_dim))
        self._dones = np.zeros(capacity, dtype=bool)
        self._next_masks = np.zeros((capacity, action_count), dtype=bool)
        self._cursor = 0
        self._size = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return self._size

    def add(self, transition: Transition):
        if transition.reward < 0:
            raise ValueError(f"Rewards are non-negative, got {transition.reward}")
        i = self._cursor
        self._states[i] = transition.state
        self._actions[i] = transition.action
        self._rewards[i] = transition.reward
        self._next_states[i] = transition.next_state
        self._dones[i] = transition.done
        self._next_masks[i] = transition.next_mask
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int) -> TransitionBatch:
        if self._size == 0:
            raise ValueError("Cannot sample from an empty replay buffer")
        idx = self._rng.choice(self._size, size=min(batch_size, self._size), replace=False)
        return TransitionBatch(
            states=self._states[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next_states[idx],
            dones=self._dones[idx],
            next_masks=self._next_masks[idx],
        )
