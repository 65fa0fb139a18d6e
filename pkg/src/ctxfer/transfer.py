"""Policy-transfer strategies built on the mixture gate.

* MAPSE: with probability ``p_t`` follow a source policy drawn from the gate,
  otherwise the target's own exploration policy.
* MARS: add ``c * (gamma * phi(s', a') - phi(s, a))`` to the reward, where
  ``phi(s, a)`` is the gate-weighted probability that a source recommends ``a``.
* Baselines: context-free UCB1 reuse and single-source shaping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mixture import MixtureNet, gate


@dataclass
class MapseConfig:
    """Reuse probability decays geometrically per episode: ``p_t = p ** episode``."""

    p: float
    sources: list
    mixture: MixtureNet | None = None
    episode: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("reuse probability must lie in [0, 1]")

    @property
    def p_t(self) -> float:
        return self.p ** self.episode

    def next_episode(self) -> None:
        self.episode += 1


def sample_source(weights: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of a source index from gate weights."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(weights), u, side="right"))
    return min(idx, len(weights) - 1)


def mapse_act(cfg: MapseConfig, s, behavior: Callable, rng: np.random.Generator,
              weights: np.ndarray | None = None) -> int:
    """Advice step: a gate-sampled source action w.p. ``p_t``, else ``behavior(s)``.

    ``rng`` drives only the advice draws; the behaviour policy keeps its own
    stream, so ``p = 0`` reproduces the plain learner exactly.
    """
    if rng.random() < cfg.p_t:
        w = weights if weights is not None else gate(cfg.mixture, s)
        i = sample_source(w, rng)
        return cfg.sources[i].policy.act(s)
    return behavior(s)


@dataclass
class MarsConfig:
    c: float
    gamma: float
    sources: list
    mixture: MixtureNet | None = None
    fixed_weights: np.ndarray | None = None  # constant gate (single-source shaping)

    def __post_init__(self):
        if not self.c >= 0.0:
            raise ValueError("shaping scale must be non-negative")

    def weights(self, s) -> np.ndarray:
        if self.fixed_weights is not None:
            return self.fixed_weights
        return gate(self.mixture, s)


def potential(cfg: MarsConfig, s, a: int) -> float:
    """Gate-weighted probability that a source policy recommends ``a`` in ``s``."""
    w = cfg.weights(s)
    rec = np.array([src.policy.action_probs(np.atleast_1d(s) if np.ndim(s) == 0
                                            else np.atleast_2d(s))[0, a] for src in cfg.sources])
    return float(rec @ w)


def batch_potentials(weights: np.ndarray, recommended: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Vectorized potentials.

    ``weights`` is ``(B, n)``; ``recommended`` is either ``(B, n)`` integer
    actions of deterministic sources or ``(B, n, |A|)`` probabilities.
    """
    actions = np.asarray(actions)
    if recommended.ndim == 2:
        match = recommended == actions[:, None]
        return (weights * match).sum(axis=1)
    probs = recommended[np.arange(len(actions)), :, actions]
    return (weights * probs).sum(axis=1)


def shaped_reward(cfg: MarsConfig, t, a_next: int, phi_now: float, phi_next: float) -> float:
    """``r + c * (gamma * phi(s', a_next) - phi(s, a))`` for transition ``t``.

    The potential after a terminal transition (or with ``a_next < 0``) is zero.
    """
    if t.terminal or a_next < 0:
        phi_next = 0.0
    return t.r + cfg.c * (cfg.gamma * phi_next - phi_now)


def shaped_rewards(c: float, gamma: float, r: np.ndarray, terminal: np.ndarray,
                   phi_now: np.ndarray, phi_next: np.ndarray) -> np.ndarray:
    return r + c * (gamma * np.where(terminal, 0.0, phi_next) - phi_now)


@dataclass
class UcbStats:
    """UCB1 arm statistics with episode returns as rewards."""

    n_arms: int
    counts: np.ndarray = field(init=False)
    means: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.zeros(self.n_arms, dtype=np.int64)
        self.means = np.zeros(self.n_arms)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, arm: int, reward: float) -> None:
        self.counts[arm] += 1
        self.means[arm] += (reward - self.means[arm]) / self.counts[arm]


def ucb_select(stats: UcbStats, episode: int | None = None) -> int:
    """Pick the arm with the largest ``mean + sqrt(2 ln N / n_i)``.

    Unpulled arms come first; ties resolve to the lowest index. ``N`` is the
    number of pulls so far (``episode`` may be passed to override it).
    """
    unpulled = np.flatnonzero(stats.counts == 0)
    if unpulled.size:
        return int(unpulled[0])
    total = stats.total if episode is None else episode
    bonus = np.sqrt(2.0 * math.log(max(total, 1)) / stats.counts)
    return int(np.argmax(stats.means + bonus))


class UcbReuse:
    """Context-free reuse: one UCB-chosen source per episode, followed w.p. ``p_t``."""

    def __init__(self, sources, p: float):
        self.sources = sources
        self.p = p
        self.stats = UcbStats(len(sources))
        self.episode = 1
        self.arm = ucb_select(self.stats)
        self.ret = 0.0

    @property
    def p_t(self) -> float:
        return self.p ** self.episode

    def act(self, s, behavior: Callable, rng: np.random.Generator) -> int:
        if rng.random() < self.p_t:
            return self.sources[self.arm].policy.act(s)
        return behavior(s)

    def observe(self, r: float) -> None:
        self.ret += r

    def end_episode(self) -> None:
        self.stats.update(self.arm, self.ret)
        self.ret = 0.0
        self.episode += 1
        self.arm = ucb_select(self.stats)
