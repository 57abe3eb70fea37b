from typing import NamedTuple, Optional, Union

import numpy as np

from phydrl.util.errors import DimensionMismatch, EmptyBuffer, NonFinite


class Transition(NamedTuple):
    s: np.ndarray
    a_drl: Union[float, np.ndarray]
    reward: float
    s_next: np.ndarray
    done: bool


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    reward: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.reward.shape[0]


class ReplayBuffer:
    """
    Fixed-capacity ring buffer of transitions with seeded uniform sampling
    (with replacement). Once full, each push overwrites the oldest entry.
    """

    def __init__(
        self,
        capacity: int,
        state_dim: int,
        action_dim: int = 1,
        seed: Union[int, np.random.Generator, None] = None,
    ):
        if capacity < 1:
            raise ValueError("Replay capacity must be at least 1")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._s = np.zeros((capacity, state_dim))
        self._a = np.zeros((capacity, action_dim))
        self._r = np.zeros(capacity)
        self._s_next = np.zeros((capacity, state_dim))
        self._done = np.zeros(capacity)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition) -> None:
        s = np.asarray(t.s, dtype=np.float64)
        s_next = np.asarray(t.s_next, dtype=np.float64)
        a = np.atleast_1d(np.asarray(t.a_drl, dtype=np.float64))
        if s.shape != (self.state_dim,) or s_next.shape != (self.state_dim,):
            raise DimensionMismatch(f"Transition states must have shape ({self.state_dim},)")
        if a.shape != (self.action_dim,):
            raise DimensionMismatch(f"Transition action must have shape ({self.action_dim},)")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(s_next)) and np.all(np.isfinite(a))):
            raise NonFinite("Transition contains NaN or Inf")
        if not np.isfinite(t.reward):
            raise NonFinite(f"Transition reward {t.reward} is not finite")

        i = self._cursor
        self._s[i] = s
        self._a[i] = a
        self._r[i] = float(t.reward)
        self._s_next[i] = s_next
        self._done[i] = 1.0 if t.done else 0.0
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        if self._size == 0:
            raise EmptyBuffer("Cannot sample from an empty replay buffer")
        idx = self.rng.integers(0, self._size, size=batch_size)
        return Batch(
            s=self._s[idx].copy(),
            a=self._a[idx].copy(),
            reward=self._r[idx].copy(),
            s_next=self._s_next[idx].copy(),
            done=self._done[idx].copy(),
        )

    def oldest(self) -> Optional[Transition]:
        if self._size == 0:
            return None
        i = self._cursor if self._size == self.capacity else 0
        return self._transition(i)

    def _transition(self, i: int) -> Transition:
        a = self._a[i].copy()
        return Transition(
            s=self._s[i].copy(),
            a_drl=float(a[0]) if self.action_dim == 1 else a,
            reward=float(self._r[i]),
            s_next=self._s_next[i].copy(),
            done=bool(self._done[i]),
        )


def replay_push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def replay_sample(buffer: ReplayBuffer, batch_size: int) -> Batch:
    return buffer.sample(batch_size)
