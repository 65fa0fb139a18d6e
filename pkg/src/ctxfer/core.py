"""Shared MDP data types: transitions, the replay buffer, seeding helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np


class CtxferError(Exception):
    """Base class for the package's domain errors. ``code`` is a stable slug."""

    code = "error"


class InsufficientSamples(CtxferError, ValueError):
    code = "insufficient-samples"


class BadAction(CtxferError, ValueError):
    code = "bad-action"


class ZeroEvidence(CtxferError, ValueError):
    code = "zero-evidence"


class SourcesNotFound(CtxferError, FileNotFoundError):
    code = "sources-not-found"


class BadConfig(CtxferError, ValueError):
    code = "bad-config"


class PretrainFailed(CtxferError, RuntimeError):
    code = "pretrain-failed"


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s', terminal) experience tuple.

    ``a_next`` is the action chosen in ``s_next`` by the behaviour policy,
    needed for action-dependent shaping. -1 when unknown.
    """

    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool
    a_next: int = -1


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    a_next: np.ndarray


def one_hot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def grid_one_hot(cell, width: int, height: int) -> np.ndarray:
    """Encode grid cells as concatenated one-hots of column and row.

    A scalar cell gives a vector; an array of cells gives one row per cell.
    """
    cells = np.asarray(cell, dtype=np.int64)
    flat = np.atleast_1d(cells)
    v = np.zeros((flat.size, width + height))
    rows = np.arange(flat.size)
    v[rows, flat % width] = 1.0
    v[rows, width + flat // width] = 1.0
    return v[0] if cells.ndim == 0 else v


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) for a seed or SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


STREAMS = ("env", "agent", "buffer", "mixture", "transfer", "eval", "init")


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named sub-streams derived from one trial seed.

    Every consumer gets its own stream so that toggling one component
    (e.g. disabling shaping) leaves the draws of every other one intact.
    """
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: make_rng(child) for name, child in zip(STREAMS, children)}


class ReplayBuffer:
    """Bounded FIFO of transitions with seeded uniform sampling.

    Storage is a set of ring arrays, so a minibatch can be gathered without
    rebuilding Python objects. Extra per-transition columns (cached source
    likelihoods, source recommendations, ...) can be registered with
    :meth:`add_column` and are filled through ``push(t, name=value)``.
    """

    def __init__(self, capacity: int, state_shape=(), rng_seed: int = 0,
                 rng: np.random.Generator | None = None, state_dtype=np.float64):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng_seed = rng_seed
        self.rng = rng if rng is not None else make_rng(rng_seed)
        shape = tuple(np.atleast_1d(state_shape)) if state_shape != () else ()
        self._s = np.zeros((self.capacity, *shape), dtype=state_dtype)
        self._s_next = np.zeros_like(self._s)
        self._a = np.zeros(self.capacity, dtype=np.int64)
        self._a_next = np.full(self.capacity, -1, dtype=np.int64)
        self._r = np.zeros(self.capacity)
        self._terminal = np.zeros(self.capacity, dtype=bool)
        self._extra: dict[str, np.ndarray] = {}
        self._next = 0  # slot the next push writes to
        self._size = 0

    def add_column(self, name: str, shape=(), dtype=np.float64, fill=0) -> None:
        self._extra[name] = np.full((self.capacity, *shape), fill, dtype=dtype)

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition, **extra) -> None:
        i = self._next
        self._s[i] = t.s
        self._a[i] = t.a
        self._r[i] = t.r
        self._s_next[i] = t.s_next
        self._terminal[i] = t.terminal
        self._a_next[i] = t.a_next
        for name, value in extra.items():
            self._extra[name][i] = value
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _slot(self, k: int) -> int:
        # k-th oldest element -> storage slot
        start = (self._next - self._size) % self.capacity
        return (start + k) % self.capacity

    def _transition(self, i: int) -> Transition:
        s, s_next = self._s[i], self._s_next[i]
        if s.ndim == 0:
            s, s_next = s.item(), s_next.item()
        else:
            s, s_next = s.copy(), s_next.copy()
        return Transition(s, int(self._a[i]), float(self._r[i]), s_next,
                          bool(self._terminal[i]), int(self._a_next[i]))

    def __getitem__(self, k: int) -> Transition:
        if not -self._size <= k < self._size:
            raise IndexError(k)
        return self._transition(self._slot(k % self._size))

    def __iter__(self) -> Iterator[Transition]:
        for k in range(self._size):
            yield self._transition(self._slot(k))

    def sample_indices(self, n: int) -> np.ndarray:
        if n <= 0:
            raise ValueError("n must be positive")
        if self._size < n:
            raise InsufficientSamples(f"buffer holds {self._size} < {n} transitions")
        return self.rng.integers(0, self._size, size=n)  # slots 0..size-1 are all live

    def sample_batch(self, n: int) -> list[Transition]:
        """Draw ``n`` transitions uniformly with replacement."""
        return [self._transition(i) for i in self.sample_indices(n)]

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s_next[idx],
                     self._terminal[idx], self._a_next[idx])

    def column(self, name: str, idx: np.ndarray) -> np.ndarray:
        return self._extra[name][idx]
