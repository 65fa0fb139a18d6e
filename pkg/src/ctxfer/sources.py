"""Source tasks: frozen policies plus estimated dynamics, and their on-disk bundle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SourcesNotFound, Transition
from .nn import Adam, Mlp

DEFAULT_NU = 5e5
BUNDLE_VERSION = 1


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class TablePolicy:
    """Deterministic policy over integer states."""

    deterministic = True

    def __init__(self, actions, n_actions: int):
        self.actions = np.asarray(actions, dtype=np.int64)
        self.n_actions = n_actions

    def act(self, s) -> int:
        return int(self.actions[int(s)])

    def act_batch(self, states) -> np.ndarray:
        return self.actions[np.asarray(states, dtype=np.int64)]

    def action_probs(self, states) -> np.ndarray:
        acts = self.act_batch(np.atleast_1d(states))
        out = np.zeros((len(acts), self.n_actions))
        out[np.arange(len(acts)), acts] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"kind": "table", "n_actions": self.n_actions, "actions": self.actions.tolist()}


class StochasticTablePolicy:
    deterministic = False

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.n_actions = self.probs.shape[1]

    def act(self, s, rng: np.random.Generator | None = None) -> int:
        rng = rng or np.random.default_rng()
        return int(rng.choice(self.n_actions, p=self.probs[int(s)]))

    def action_probs(self, states) -> np.ndarray:
        return self.probs[np.atleast_1d(np.asarray(states, dtype=np.int64))]

    def to_dict(self) -> dict:
        return {"kind": "stochastic-table", "probs": self.probs.tolist()}


class QNetPolicy:
    """Greedy policy of a Q-network; ties go to the lowest action index."""

    deterministic = True

    def __init__(self, qnet: Mlp):
        self.qnet = qnet
        self.n_actions = qnet.sizes[-1]

    def act(self, s) -> int:
        return int(np.argmax(self.qnet.predict(s)))

    def act_batch(self, states) -> np.ndarray:
        return np.argmax(self.qnet.predict(np.atleast_2d(states)), axis=1)

    def action_probs(self, states) -> np.ndarray:
        acts = self.act_batch(states)
        out = np.zeros((len(acts), self.n_actions))
        out[np.arange(len(acts)), acts] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"kind": "qnet", "net": self.qnet.to_dict()}


def policy_from_dict(d: dict):
    kind = d["kind"]
    if kind == "table":
        return TablePolicy(d["actions"], d["n_actions"])
    if kind == "stochastic-table":
        return StochasticTablePolicy(d["probs"])
    if kind == "qnet":
        return QNetPolicy(Mlp.from_dict(d["net"]))
    raise ValueError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


class TabularDyn:
    """Next-state lookup table for a deterministic discrete task.

    Pairs never observed default to the identity transition; ``visited``
    records which entries were actually learned from data.
    """

    discrete = True

    def __init__(self, n_states: int, n_actions: int):
        self.next = np.tile(np.arange(n_states)[:, None], (1, n_actions))
        self.visited = np.zeros((n_states, n_actions), dtype=bool)

    def observe(self, s: int, a: int, s_next: int) -> None:
        self.next[s, a] = s_next
        self.visited[s, a] = True

    def fit(self, transitions) -> None:
        for t in transitions:
            self.observe(int(t.s), int(t.a), int(t.s_next))

    def predict(self, s, a):
        return self.next[s, a]

    def to_dict(self) -> dict:
        return {"kind": "tabular", "next": self.next.tolist(), "visited": self.visited.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularDyn":
        nxt = np.asarray(d["next"], dtype=np.int64)
        dyn = cls(*nxt.shape)
        dyn.next = nxt
        dyn.visited = np.asarray(d["visited"], dtype=bool)
        return dyn


class MlpDyn:
    """Next-state regressor ``f(s, a) = s + net([s, onehot(a)])``.

    The network predicts the state increment; the wrapper adds ``s`` back,
    so the regressor still maps (state, action) to the next state.
    """

    discrete = False

    def __init__(self, state_dim: int, n_actions: int, hidden=(50, 50), lr: float = 0.001,
                 l2: float = 1e-6, rng: np.random.Generator | None = None, net: Mlp | None = None):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.net = net or Mlp([state_dim + n_actions, *hidden, state_dim], "linear", l2, rng)
        self.opt = Adam([self.net.flat], lr)

    def inputs(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        onehot = np.zeros((len(a), self.n_actions))
        onehot[np.arange(len(a)), a] = 1.0
        return np.hstack([s, onehot])

    def predict(self, s, a) -> np.ndarray:
        single = np.ndim(s) == 1
        s2 = np.atleast_2d(s) + self.net.predict(self.inputs(s, a))
        return s2[0] if single else s2

    def loss(self, s, a, s_next) -> float:
        err = np.atleast_2d(s_next) - self.predict(s, a)
        return float((err * err).sum(axis=1).mean())

    def to_dict(self) -> dict:
        return {"kind": "mlp", "state_dim": self.state_dim, "n_actions": self.n_actions,
                "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpDyn":
        return cls(d["state_dim"], d["n_actions"], net=Mlp.from_dict(d["net"]))


def train_dynamics(dyn: MlpDyn, batch) -> float:
    """One Adam step on the mean squared next-state error; returns the pre-step loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if isinstance(batch, list):
        s = np.array([t.s for t in batch], dtype=np.float64)
        a = np.array([t.a for t in batch])
        s_next = np.array([t.s_next for t in batch], dtype=np.float64)
    else:
        s, a, s_next = batch.s, batch.a, batch.s_next
    x = dyn.inputs(s, a)
    err = (s + dyn.net.forward(x)) - s_next
    loss = float((err * err).sum(axis=1).mean())
    grads = dyn.net.backward(2.0 * err / len(s), flat=True)
    dyn.opt.step([dyn.net.flat], [grads])
    return loss


# ---------------------------------------------------------------------------
# Source tasks
# ---------------------------------------------------------------------------


@dataclass
class SourceTask:
    policy: object
    dynamics: object
    nu: float = DEFAULT_NU
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("kernel precision must be positive")

    @property
    def discrete(self) -> bool:
        return self.dynamics.discrete

    def log_likelihood(self, s, a, s_next) -> np.ndarray:
        """Log of the source's transition likelihood, batched over rows.

        Discrete: 0 or -inf. Continuous: ``-nu * ||s' - f(s, a)||^2``.
        """
        if self.dynamics.discrete:
            s = np.atleast_1d(np.asarray(s, dtype=np.int64))
            pred = self.dynamics.predict(s, np.atleast_1d(a))
            hit = pred == np.atleast_1d(s_next)
            return np.where(hit, 0.0, -np.inf)
        err = np.atleast_2d(s_next) - self.dynamics.predict(np.atleast_2d(s), np.atleast_1d(a))
        return -self.nu * (err * err).sum(axis=1)


def likelihood(src: SourceTask, s, a, s_next) -> float:
    """Unnormalized transition likelihood of a single (s, a, s') under one source."""
    return float(np.exp(src.log_likelihood(s, a, s_next)[0]))


def source_log_likelihoods(sources, s, a, s_next) -> np.ndarray:
    """``(batch, n_sources)`` log-likelihood matrix."""
    return np.stack([src.log_likelihood(s, a, s_next) for src in sources], axis=1)


def policy_action_prob(src: SourceTask, s, a: int) -> float:
    states = np.atleast_1d(s) if src.discrete else np.atleast_2d(s)
    return float(src.policy.action_probs(states)[0, a])


def recommendation_matrix(sources, states) -> np.ndarray:
    """``(batch, n_sources, n_actions)`` probabilities that each source picks each action."""
    return np.stack([src.policy.action_probs(states) for src in sources], axis=1)


# ---------------------------------------------------------------------------
# Bundle I/O
# ---------------------------------------------------------------------------


def _dyn_from_dict(d: dict):
    return TabularDyn.from_dict(d) if d["kind"] == "tabular" else MlpDyn.from_dict(d)


def save_bundle(directory, env_id: str, sources, extra: dict | None = None) -> Path:
    """Write sources as ``manifest.json`` plus one policy and one dynamics file each."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, src in enumerate(sources, start=1):
        pol_file, dyn_file = f"source{i}_policy.json", f"source{i}_dynamics.json"
        (root / pol_file).write_text(json.dumps(src.policy.to_dict()))
        (root / dyn_file).write_text(json.dumps(src.dynamics.to_dict()))
        entries.append({"name": src.name or f"source{i}", "policy": pol_file,
                        "dynamics": dyn_file, "nu": src.nu, "meta": src.meta})
    manifest = {"version": BUNDLE_VERSION, "env": env_id, "sources": entries, **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_bundle(directory, env_id: str | None = None) -> list[SourceTask]:
    root = Path(directory) if directory is not None else None
    if root is None or not (root / "manifest.json").is_file():
        raise SourcesNotFound(f"no source bundle manifest under {directory!r}")
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != BUNDLE_VERSION:
        raise SourcesNotFound(f"unsupported bundle version {manifest.get('version')!r}")
    if env_id is not None and manifest["env"] != env_id:
        raise SourcesNotFound(f"bundle is for {manifest['env']!r}, not {env_id!r}")
    sources = []
    for entry in manifest["sources"]:
        try:
            pol = policy_from_dict(json.loads((root / entry["policy"]).read_text()))
            dyn = _dyn_from_dict(json.loads((root / entry["dynamics"]).read_text()))
        except FileNotFoundError as exc:
            raise SourcesNotFound(str(exc)) from exc
        sources.append(SourceTask(pol, dyn, entry["nu"], entry["name"], entry.get("meta", {})))
    return sources


def transitions_from_env(env, n: int, rng: np.random.Generator) -> list[Transition]:
    """Uniform-random roll-outs, handy for fitting dynamics in tests."""
    out = []
    s = env.reset(rng)
    for _ in range(n):
        a = int(rng.integers(env.n_actions))
        s2, r, term, trunc = env.step(a)
        out.append(Transition(s, a, r, s2, term))
        s = env.reset(rng) if term or trunc else s2
    return out
