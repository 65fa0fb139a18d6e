"""Target learners: tabular Q-learning and DQN with replay and hard target sync."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Batch, ReplayBuffer, Transition
from .nn import Adam, Mlp


class QTable:
    def __init__(self, n_states: int, n_actions: int, lr: float = 0.8, gamma: float = 0.95):
        self.q = np.zeros((n_states, n_actions))
        self.lr = lr
        self.gamma = gamma

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]

    def values(self, s) -> np.ndarray:
        return self.q[int(s)]

    def greedy(self, s) -> int:
        return int(np.argmax(self.q[int(s)]))

    def greedy_table(self) -> np.ndarray:
        return np.argmax(self.q, axis=1)


def q_update(table: QTable, t: Transition, r: float | None = None,
             bootstrap_action: int | None = None) -> None:
    """Watkins Q-learning step.

    ``r`` overrides the stored reward (shaping). ``bootstrap_action`` replaces
    the max over next actions, for learners whose greedy choice is biased.
    """
    reward = t.r if r is None else r
    s, a = int(t.s), int(t.a)
    row = table.q[int(t.s_next)]
    nxt = row.max() if bootstrap_action is None else row[int(bootstrap_action)]
    bootstrap = 0.0 if t.terminal else table.gamma * nxt
    table.q[s, a] += table.lr * (reward + bootstrap - table.q[s, a])


def epsilon_greedy(q, s, eps: float, rng: np.random.Generator, greedy: Callable | None = None) -> int:
    """Random action with probability ``eps``, otherwise argmax (lowest index on ties).

    ``greedy`` substitutes a different exploitation rule for ``q.greedy``.
    """
    if rng.random() < eps:
        return int(rng.integers(q.n_actions))
    return (greedy or q.greedy)(s)


class DqnAgent:
    """Q-network with a hard-synced target copy and its own replay buffer."""

    def __init__(self, sizes=(4, 40, 40, 4), lr: float = 0.0005, gamma: float = 0.98,
                 batch_size: int = 32, sync_every: int = 500, l2: float = 1e-6,
                 buffer: ReplayBuffer | None = None, capacity: int = 5000,
                 rng: np.random.Generator | None = None):
        self.online = Mlp(sizes, "linear", l2, rng)
        self.target = self.online.copy()
        self.opt = Adam([self.online.flat], lr)
        self.gamma = gamma
        self.batch_size = batch_size
        self.sync_every = sync_every
        self.buffer = buffer if buffer is not None else ReplayBuffer(capacity, (sizes[0],))
        self.batches = 0

    @property
    def n_actions(self) -> int:
        return self.online.sizes[-1]

    def values(self, s) -> np.ndarray:
        return self.online.predict(s)

    def greedy(self, s) -> int:
        return int(np.argmax(self.online.predict(s)))

    def sync(self) -> None:
        self.target.load_params_from(self.online)

    def td_loss(self, batch: Batch, rewards: np.ndarray | None = None) -> float:
        r = batch.r if rewards is None else rewards
        y = r + self.gamma * (~batch.terminal) * self.target.predict(batch.s_next).max(axis=1)
        q = self.online.predict(batch.s)[np.arange(len(r)), batch.a]
        return float(np.mean((q - y) ** 2))


RewardFn = Callable[[Batch, np.ndarray], "np.ndarray | tuple[np.ndarray, np.ndarray]"]


def dqn_train_step(agent: DqnAgent, reward_fn: RewardFn | None = None) -> float | None:
    """One Adam step on the mean squared TD error of a replayed minibatch.

    ``reward_fn(batch, idx)`` may rewrite rewards at replay time. It may also
    return ``(rewards, bias)`` with a ``(batch, actions)`` ``bias``; the target
    then becomes ``rewards + gamma * max_b (Q_target(s', b) + bias[b])``.
    Returns the pre-step loss, or ``None`` when the buffer cannot fill a batch yet.
    """
    if len(agent.buffer) < agent.batch_size:
        return None
    idx = agent.buffer.sample_indices(agent.batch_size)
    batch = agent.buffer.gather(idx)
    r = batch.r if reward_fn is None else reward_fn(batch, idx)
    q_next = agent.target.predict(batch.s_next)
    if isinstance(r, tuple):
        r, bias = r
        bootstrap = (q_next + bias).max(axis=1)
    else:
        bootstrap = q_next.max(axis=1)
    y = r + agent.gamma * np.where(batch.terminal, 0.0, bootstrap)
    q = agent.online.forward(batch.s)
    rows = np.arange(len(y))
    err = q[rows, batch.a] - y
    upstream = np.zeros_like(q)
    upstream[rows, batch.a] = 2.0 * err / len(y)
    agent.opt.step([agent.online.flat], [agent.online.backward(upstream, flat=True)])
    agent.batches += 1
    if agent.batches % agent.sync_every == 0:
        agent.sync()
    return float(np.mean(err * err))


def evaluate_greedy(env, act: Callable, episodes: int, rng: np.random.Generator) -> list[int]:
    """Run ``episodes`` greedy roll-outs; the metric is the episode length.

    For the maze that is steps-to-goal (the cap when it never arrives), for
    CartPole the number of steps balanced.
    """
    out = []
    for _ in range(episodes):
        s = env.reset(rng)
        steps = 0
        while True:
            s, _, term, trunc = env.step(act(s))
            steps += 1
            if term or trunc:
                break
        out.append(steps)
    return out
