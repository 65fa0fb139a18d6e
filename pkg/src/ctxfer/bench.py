"""Experiment orchestration: configuration, source pre-training, the training
loop for every strategy, and CSV/JSON artifacts."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agents import DqnAgent, QTable, dqn_train_step, epsilon_greedy, evaluate_greedy, q_update
from .core import (BadConfig, Batch, PretrainFailed, ReplayBuffer, SourcesNotFound, Transition,
                   make_rng, spawn_streams)
from .envs import ENV_IDS, MAZE_LAYOUTS, make_env, make_source_envs
from .mixture import MixtureNet, train_on
from .sources import (MlpDyn, QNetPolicy, SourceTask, TablePolicy, TabularDyn, load_bundle,
                      save_bundle, train_dynamics)
from .transfer import (MapseConfig, MarsConfig, UcbReuse, batch_potentials, mapse_act,
                       shaped_reward)

log = logging.getLogger(__name__)

STRATEGIES = ("none", "mars", "mapse", "ucb")

MAZE_DEFAULTS = dict(
    max_steps=300, gamma=0.95, eps_start=0.12, eps_decay=1.0, eps_min=0.12,
    q_lr=0.8, q_lr_shaped=0.08, mix_inputs="grid", mix_hidden=(30, 30), mix_lr=0.001,
    mix_epochs=4, mix_batch=32, c=1.0, p_mapse=0.99, p_ucb=0.85,
)

CARTPOLE_DEFAULTS = dict(
    max_steps=500, gamma=0.98, eps_start=1.0, eps_decay=0.99, eps_min=0.01,
    capacity=5000, batch_size=32, dqn_hidden=(40, 40), dqn_lr=0.0005, dqn_lr_shaped=0.0002,
    sync_every=500, dqn_l2=1e-6, dyn_hidden=(50, 50), dyn_lr=0.001, dyn_l2=1e-6, nu=5e5,
    mix_inputs="raw", mix_hidden=(30, 30), mix_lr=0.001, mix_epochs=3, mix_batch=32,
    c=2.0, p_mapse=0.85, p_ucb=0.85,
)

ENV_DEFAULTS = {
    "maze": dict(MAZE_DEFAULTS, steps=200_000,
                 snapshots=(0, 5_000, 10_000, 20_000, 50_000, 100_000)),
    "maze-2room": dict(MAZE_DEFAULTS, steps=30_000,
                       snapshots=(0, 1_000, 2_000, 5_000, 10_000, 20_000)),
    "cartpole": dict(CARTPOLE_DEFAULTS, steps=100_000,
                     snapshots=(0, 100, 500, 1_000, 2_500, 5_000)),
}


@dataclass
class ExperimentConfig:
    env: str = "maze"
    strategy: str = "none"
    trials: int = 1
    seed: int = 0
    steps: int = 200_000
    eval_every: int = 1000
    eval_episodes: int = 5
    snapshots: tuple = ()
    sources: str | None = None
    # shared
    max_steps: int = 300
    gamma: float = 0.95
    eps_start: float = 0.12
    eps_decay: float = 1.0
    eps_min: float = 0.12
    lr: float | None = None  # overrides the per-strategy learner rate when set
    # tabular learner
    q_lr: float = 0.8
    q_lr_shaped: float = 0.08
    # deep learner
    capacity: int | None = None
    batch_size: int = 32
    dqn_hidden: tuple = (40, 40)
    dqn_lr: float = 0.0005
    dqn_lr_shaped: float = 0.0002
    sync_every: int = 500
    dqn_l2: float = 1e-6
    # source dynamics
    dyn_hidden: tuple = (50, 50)
    dyn_lr: float = 0.001
    dyn_l2: float = 1e-6
    nu: float = 5e5
    # mixture
    mix_inputs: str = "grid"
    mix_hidden: tuple = (30, 30)
    mix_lr: float = 0.001
    mix_epochs: int = 4
    mix_batch: int = 32
    mix_l2: float = 0.0
    # transfer
    c: float = 1.0
    p_mapse: float = 0.99
    p_ucb: float = 0.85

    @classmethod
    def for_env(cls, env: str, **overrides) -> "ExperimentConfig":
        if env not in ENV_DEFAULTS:
            raise BadConfig(f"unknown env {env!r}; expected one of {ENV_IDS}")
        values = dict(ENV_DEFAULTS[env], env=env)
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**_coerce(values))
        cfg.validate()
        return cfg

    @property
    def discrete(self) -> bool:
        return self.env in MAZE_LAYOUTS

    @property
    def shaped(self) -> bool:
        return self.strategy == "mars" or self.strategy.startswith("phi")

    @property
    def uses_mixture(self) -> bool:
        return self.strategy in ("mars", "mapse")

    @property
    def uses_sources(self) -> bool:
        return self.strategy != "none"

    def learner_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        if self.discrete:
            return self.q_lr_shaped if self.shaped else self.q_lr
        return self.dqn_lr_shaped if self.shaped else self.dqn_lr

    def epsilon(self, episode: int) -> float:
        """Exploration rate for a 1-based episode index."""
        return max(self.eps_min, self.eps_start * self.eps_decay ** (episode - 1))

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise BadConfig(msg)

        need(self.env in ENV_IDS, f"unknown env {self.env!r}")
        need(self.strategy in STRATEGIES or _phi_index(self.strategy) is not None,
             f"unknown strategy {self.strategy!r}")
        need(self.trials >= 1, "trials must be >= 1")
        need(self.steps >= 1, "steps must be >= 1")
        need(self.eval_every >= 1 and self.eval_episodes >= 1, "bad evaluation cadence")
        need(self.max_steps >= 1, "max_steps must be >= 1")
        need(0.0 <= self.gamma < 1.0, "gamma must lie in [0, 1)")
        need(0.0 <= self.eps_min <= 1.0 and 0.0 <= self.eps_start <= 1.0, "epsilon outside [0, 1]")
        need(0.0 < self.eps_decay <= 1.0, "eps_decay must lie in (0, 1]")
        for name in ("q_lr", "q_lr_shaped", "dqn_lr", "dqn_lr_shaped", "dyn_lr", "mix_lr"):
            need(getattr(self, name) > 0.0, f"{name} must be positive")
        need(self.lr is None or self.lr >= 0.0, "lr must be non-negative")
        need(self.q_lr <= 1.0 and self.q_lr_shaped <= 1.0, "tabular learning rate above 1")
        need(self.capacity is None or self.capacity >= self.batch_size, "capacity below batch size")
        need(self.batch_size >= 1 and self.mix_batch >= 1, "batch sizes must be positive")
        need(self.sync_every >= 1, "sync_every must be >= 1")
        need(self.dqn_l2 >= 0 and self.dyn_l2 >= 0 and self.mix_l2 >= 0, "negative L2 penalty")
        need(self.nu > 0.0, "kernel precision must be positive")
        need(self.mix_epochs >= 1, "mix_epochs must be >= 1")
        need(self.mix_inputs in ("grid", "raw"), "mix_inputs must be grid or raw")
        need((self.mix_inputs == "grid") == self.discrete, "mixture input encoding does not fit env")
        need(self.c >= 0.0, "shaping scale must be non-negative")
        need(0.0 <= self.p_mapse <= 1.0 and 0.0 <= self.p_ucb <= 1.0, "reuse probability outside [0, 1]")
        need(all(int(k) >= 0 for k in self.snapshots), "negative snapshot checkpoint")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadConfig(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**_coerce(d))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def _coerce(values: dict) -> dict:
    out = dict(values)
    for key in ("snapshots", "dqn_hidden", "dyn_hidden", "mix_hidden"):
        if key in out and out[key] is not None:
            out[key] = tuple(int(v) for v in out[key])
    return out


def _phi_index(strategy: str):
    if strategy.startswith("phi") and strategy[3:].isdigit() and int(strategy[3:]) >= 1:
        return int(strategy[3:]) - 1
    return None


def trial_seed(seed_base: int, trial_index: int) -> int:
    return seed_base * 10007 + trial_index


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)  # (env steps, metric mean, metric stderr)
    snapshots: list = field(default_factory=list)  # (checkpoint, reprs, weights)
    zero_evidence: int = 0
    wall_clock: float = 0.0
    seed: int = 0
    config: dict = field(default_factory=dict)

    def final_metric(self) -> float:
        return self.rows[-1][1]


# ---------------------------------------------------------------------------
# Snapshot states
# ---------------------------------------------------------------------------


def snapshot_states(env):
    """States at which gate snapshots are taken, with printable labels."""
    if env.discrete:
        cells = env.spec.free_cells()
        labels = [f"{r}:{c}" for r, c in (env.spec.coords(k) for k in cells)]
        return cells, labels
    xs = np.linspace(-2.4, 2.4, 25)
    thetas = np.linspace(-0.2, 0.2, 11)
    states = np.array([[x, 0.0, th, 0.0] for th in thetas for x in xs])
    labels = [f"{x!r};{th!r}" for th in thetas for x in xs]
    return states, labels


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


class _Trial:
    """State of one seeded run; ``run`` executes the whole loop."""

    def __init__(self, cfg: ExperimentConfig, trial_index: int, sources):
        self.cfg = cfg
        self.seed = trial_seed(cfg.seed, trial_index)
        self.rng = spawn_streams(self.seed)
        self.env = make_env(cfg.env, self.rng["env"])
        self.eval_env = make_env(cfg.env, self.rng["eval"])
        self.sources = sources
        n_actions = self.env.n_actions
        if cfg.discrete:
            self.agent = QTable(self.env.n_states, n_actions, cfg.learner_lr(), cfg.gamma)
        else:
            sizes = (self.env.obs_dim, *cfg.dqn_hidden, n_actions)
            buf = ReplayBuffer(cfg.capacity or cfg.steps, (self.env.obs_dim,), rng=self.rng["buffer"])
            self.agent = DqnAgent(sizes, cfg.learner_lr(), cfg.gamma, cfg.batch_size,
                                  cfg.sync_every, cfg.dqn_l2, buf, rng=self.rng["init"])
        self.mixture = None
        self.mars = None
        self.mapse = None
        self.ucb = None
        self.shaping_sources = []
        if cfg.uses_mixture:
            encode = self.env.encode if cfg.discrete else None
            self.mixture = MixtureNet(self.env.obs_dim, len(sources), cfg.mix_hidden, cfg.mix_lr,
                                      cfg.mix_epochs, cfg.mix_l2, self.rng["init"], encode)
        if cfg.strategy == "mars":
            self.shaping_sources = sources
            self.mars = MarsConfig(cfg.c, cfg.gamma, sources, self.mixture)
        elif cfg.shaped:
            i = _phi_index(cfg.strategy)
            if i >= len(sources):
                raise BadConfig(f"{cfg.strategy} needs at least {i + 1} sources")
            self.shaping_sources = [sources[i]]
            self.mars = MarsConfig(cfg.c, cfg.gamma, [sources[i]], fixed_weights=np.ones(1))
        elif cfg.strategy == "mapse":
            self.mapse = MapseConfig(cfg.p_mapse, sources, self.mixture)
        elif cfg.strategy == "ucb":
            self.ucb = UcbReuse(sources, cfg.p_ucb)

        # transitions for the mixture (and the DQN); tabular Q-learning is online
        if cfg.discrete:
            self.buffer = ReplayBuffer(cfg.capacity or cfg.steps, (), rng=self.rng["buffer"],
                                       state_dtype=np.int64) if self.mixture else None
        else:
            self.buffer = self.agent.buffer
        if self.mixture is not None:
            self.buffer.add_column("loglik", (len(sources),))
        if self.mars is not None and not cfg.discrete:
            k = len(self.shaping_sources)
            self.buffer.add_column("rec", (k,), np.int64)
            self.buffer.add_column("rec_next", (k,), np.int64)
        # lookup tables so the tabular loop avoids per-source calls
        self.rec_table = self.next_table = None
        if cfg.discrete and self.mars is not None:
            cells = np.arange(self.env.n_states)
            self.rec_table = np.stack([src.policy.act_batch(cells) for src in self.shaping_sources], 1)
        self.feat_table = None
        if cfg.discrete and self.mixture is not None:
            self.next_table = np.stack([src.dynamics.next for src in sources], axis=-1)
            self.feat_table = self.mixture.features(np.arange(self.env.n_states))
        self.episode = 1
        self.record = RunRecord(seed=self.seed, config=cfg.to_dict())
        self.snap_states, self.snap_labels = snapshot_states(self.env)

    # -- helpers -----------------------------------------------------------

    def behavior(self, s, greedy=None) -> int:
        return epsilon_greedy(self.agent, s, self.cfg.epsilon(self.episode), self.rng["agent"], greedy)

    def choose(self, s, w=None, rec=None) -> int:
        """Next action; shaped learners exploit ``argmax Q + c * phi`` given gate ``w`` and ``rec``."""
        if self.mapse is not None:
            return mapse_act(self.mapse, s, self.behavior, self.rng["transfer"])
        if self.ucb is not None:
            return self.ucb.act(s, self.behavior, self.rng["transfer"])
        if self.mars is not None:
            return self.behavior(s, lambda s_: self.biased_greedy(s_, w, rec))
        return self.behavior(s)

    def advice(self, w: np.ndarray, rec: np.ndarray) -> np.ndarray:
        """``c * phi(s, .)`` for every action."""
        return self.cfg.c * np.bincount(rec, weights=w, minlength=self.env.n_actions)

    def biased_greedy(self, s, w=None, rec=None) -> int:
        if rec is None:
            rec = self.recommend(s)
        if w is None:
            w = self.weights(np.array([s]))[0]
        return int(np.argmax(self.agent.values(s) + self.advice(w, rec)))

    def recommend(self, s) -> np.ndarray:
        if self.rec_table is not None:
            return self.rec_table[int(s)]
        return np.array([src.policy.act(s) for src in self.shaping_sources], dtype=np.int64)

    def loglik(self, s, a, s2) -> np.ndarray:
        if self.cfg.discrete:
            return np.where(self.next_table[int(s), int(a)] == int(s2), 0.0, -np.inf)
        s_b, s2_b, a_b = s[None, :], s2[None, :], np.array([a])
        return np.array([src.log_likelihood(s_b, a_b, s2_b)[0] for src in self.sources])

    def weights(self, states) -> np.ndarray:
        if self.mars.fixed_weights is not None:
            return np.broadcast_to(self.mars.fixed_weights, (len(states), 1))
        return self.mixture.net.predict(self.features(states))

    def features(self, states) -> np.ndarray:
        if self.feat_table is not None:
            return self.feat_table[np.asarray(states, dtype=np.int64)]
        return self.mixture.features(states)

    def shaped_reward_fn(self, batch, idx):
        """Replay-time shaping with the current gate for both potentials.

        Returns ``r - c * phi(s, a)`` and the bias ``c * phi(s', .)``; the DQN
        target adds ``gamma * max_b (Q(s', b) + c * phi(s', b))``, so ``a'`` is the
        learner's own greedy choice.
        """
        phi_now = batch_potentials(self.weights(batch.s), self.buffer.column("rec", idx), batch.a)
        w_next = self.weights(batch.s_next)
        rec_next = self.buffer.column("rec_next", idx)
        bias = np.zeros((len(idx), self.env.n_actions))
        rows = np.arange(len(idx))
        for i in range(rec_next.shape[1]):
            np.add.at(bias, (rows, rec_next[:, i]), w_next[:, i])
        return batch.r - self.cfg.c * phi_now, self.cfg.c * bias

    def train_mixture(self) -> None:
        if len(self.buffer) < self.cfg.mix_batch:
            return
        idx = self.rng["mixture"].integers(0, len(self.buffer), size=self.cfg.mix_batch)
        states = self.buffer.gather(idx).s
        train_on(self.mixture, self.features(states), self.buffer.column("loglik", idx))

    def greedy_policy(self):
        """Exploitation rule used for evaluation; shaped learners include the advice bias."""
        if self.mars is None:
            return self.agent.greedy
        if not self.cfg.discrete:
            return self.biased_greedy
        cells = np.arange(self.env.n_states)
        w = self.weights(cells)
        bias = np.zeros_like(self.agent.q)
        for i in range(self.rec_table.shape[1]):
            np.add.at(bias, (cells, self.rec_table[:, i]), w[:, i])
        table = np.argmax(self.agent.q + self.cfg.c * bias, axis=1)
        return lambda s: int(table[int(s)])

    def evaluate(self, steps: int) -> None:
        m = evaluate_greedy(self.eval_env, self.greedy_policy(), self.cfg.eval_episodes, self.rng["eval"])
        m = np.asarray(m, dtype=np.float64)
        se = float(m.std(ddof=1) / math.sqrt(len(m))) if len(m) > 1 else 0.0
        self.record.rows.append((steps, float(m.mean()), se))

    def snapshot(self, steps: int) -> None:
        if self.mixture is None:
            return
        w = self.mixture.net.predict(self.mixture.features(self.snap_states))
        self.record.snapshots.append((steps, self.snap_labels, w))

    # -- main loop ---------------------------------------------------------

    def run(self, on_step=None, stop=None) -> RunRecord:
        cfg = self.cfg
        started = time.perf_counter()
        snaps = set(int(k) for k in cfg.snapshots)
        if 0 in snaps:
            self.snapshot(0)
        s = self.env.reset(self.rng["env"])
        rec_s = self.recommend(s) if self.mars is not None else None
        a = self.choose(s, rec=rec_s)
        for step in range(1, cfg.steps + 1):
            s2, r, term, trunc = self.env.step(a)
            extra = {}
            if self.mixture is not None:
                extra["loglik"] = self.loglik(s, a, s2)
            if self.mars is not None:
                rec_next = self.recommend(s2)
                w_now, w_next = self.weights(np.array([s, s2]))
                a2 = -1 if term else self.choose(s2, w_next, rec_next)
                if not cfg.discrete:
                    extra["rec"], extra["rec_next"] = rec_s, rec_next
            else:
                a2 = -1 if term else self.choose(s2)
            t = Transition(s, a, r, s2, term, a2)
            if self.buffer is not None:
                self.buffer.push(t, **extra)
            if self.ucb is not None:
                self.ucb.observe(r)

            if cfg.discrete:
                if self.mars is not None:
                    # a' is the learner's own greedy choice, which the backup also uses
                    adv_next = self.advice(w_next, rec_next)
                    a_star = int(np.argmax(self.agent.values(s2) + adv_next))
                    phi_now = float(w_now @ (rec_s == a))
                    phi_next = float(w_next @ (rec_next == a_star))
                    r_train = shaped_reward(self.mars, t, a_star, phi_now, phi_next)
                    q_update(self.agent, t, r_train, a_star)
                else:
                    q_update(self.agent, t)
            else:
                dqn_train_step(self.agent, self.shaped_reward_fn if self.mars is not None else None)
            if self.mixture is not None:
                self.train_mixture()
                if on_step is not None:
                    on_step(self)

            if term or trunc:
                self.end_episode()
                s = self.env.reset(self.rng["env"])
                rec_s = self.recommend(s) if self.mars is not None else None
                a = self.choose(s, rec=rec_s)
            else:
                s, a = s2, a2
                if self.mars is not None:
                    rec_s = rec_next
            if step in snaps:
                self.snapshot(step)
            if step % cfg.eval_every == 0:
                self.evaluate(step)
                if stop is not None and stop(self.record):
                    break
        if self.mixture is not None:
            self.record.zero_evidence = self.mixture.zero_evidence
        self.record.wall_clock = time.perf_counter() - started
        return self.record

    def end_episode(self) -> None:
        self.episode += 1
        if self.mapse is not None:
            self.mapse.next_episode()
        if self.ucb is not None:
            self.ucb.end_episode()


def run_trial(cfg: ExperimentConfig, trial_index: int, sources=None, on_step=None,
              stop=None) -> RunRecord:
    """Execute one seeded trial of ``cfg``; deterministic given (seed, trial_index).

    ``sources`` may be passed directly; otherwise they are loaded from
    ``cfg.sources`` whenever the strategy needs them. ``stop(record)`` is
    checked after every evaluation and ends the run early when true.
    """
    cfg.validate()
    if cfg.uses_sources and sources is None:
        if not cfg.sources:
            raise SourcesNotFound(f"strategy {cfg.strategy!r} needs a source bundle")
        sources = load_bundle(cfg.sources)
        manifest = json.loads((Path(cfg.sources) / "manifest.json").read_text())
        if manifest["env"] != cfg.env:
            raise BadConfig(f"source bundle is for {manifest['env']!r}, config is {cfg.env!r}")
    if sources is not None and cfg.uses_sources:
        if any(src.discrete != cfg.discrete for src in sources):
            raise BadConfig("source dynamics do not match the environment type")
    return _Trial(cfg, trial_index, sources).run(on_step, stop)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def emit_outputs(record: RunRecord, directory) -> list[Path]:
    """Write ``curve.csv``, ``gate_snapshots.csv`` (if any) and ``meta.json``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    curve = root / "curve.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["steps", "metric_mean", "metric_stderr"])
        for steps, mean, se in record.rows:
            w.writerow([_fmt(steps), _fmt(mean), _fmt(se)])
    written.append(curve)
    if record.snapshots:
        gate_file = root / "gate_snapshots.csv"
        n = record.snapshots[0][2].shape[1]
        with open(gate_file, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["checkpoint", "state_repr"] + [f"a_{i + 1}" for i in range(n)])
            for checkpoint, labels, weights in record.snapshots:
                for label, row in zip(labels, weights):
                    w.writerow([_fmt(checkpoint), label] + [_fmt(v) for v in row])
        written.append(gate_file)
    meta = {
        "config": record.config,
        "seed": record.seed,
        "zero_evidence": record.zero_evidence,
        "versions": {"ctxfer": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    meta_file = root / "meta.json"
    meta_file.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(meta_file)
    return written


# ---------------------------------------------------------------------------
# Source pre-training
# ---------------------------------------------------------------------------


def _train_maze_source(env, cfg: ExperimentConfig, rng: np.random.Generator, min_steps: int,
                       budget: int) -> tuple[QTable, list[Transition]]:
    """Q-learning with exploring starts until the greedy roll-out from the
    task's start cell reaches the goal (and at least ``min_steps`` were taken)."""
    spec = env.spec
    table = QTable(spec.n_states, env.n_actions, cfg.q_lr, cfg.gamma)
    free = spec.free_cells()
    free = free[free != spec.goal]
    data = []
    steps = 0
    while steps < budget:
        env.reset()
        env.state = int(rng.choice(free))
        s = env.state
        while True:
            a = epsilon_greedy(table, s, cfg.eps_start, rng)
            s2, r, term, trunc = env.step(a)
            t = Transition(s, a, r, s2, term)
            q_update(table, t)
            data.append(t)
            steps += 1
            s = s2
            if term or trunc:
                break
        if steps >= min_steps:
            greedy = evaluate_greedy(env, table.greedy, 1, rng)[0]
            if greedy < spec.max_steps and greedy == spec.shortest_path():
                return table, data
    raise PretrainFailed(f"{env.name}: greedy policy did not reach the goal within {budget} steps")


def _exhaustive_maze_data(env) -> list[Transition]:
    """One transition for every free (cell, action) pair of a discrete source."""
    from .envs import maze_step

    out = []
    for s in env.spec.free_cells():
        if s == env.spec.goal:
            continue
        for a in range(env.n_actions):
            s2, r, term = maze_step(env.spec, int(s), a)
            out.append(Transition(int(s), a, r, s2, term))
    return out


def pretrain_maze(env_id: str, cfg: ExperimentConfig, seed: int = 0, min_steps: int | None = None,
                  budget: int = 2_000_000) -> list[SourceTask]:
    rng = make_rng(seed)
    sources = []
    for env in make_source_envs(env_id):
        n = min_steps if min_steps is not None else 40 * env.spec.n_states
        table, data = _train_maze_source(env, cfg, rng, n, budget)
        dyn = TabularDyn(env.spec.n_states, env.n_actions)
        dyn.fit(data)
        dyn.fit(_exhaustive_maze_data(env))
        policy = TablePolicy(table.greedy_table(), env.n_actions)
        sources.append(SourceTask(policy, dyn, cfg.nu, env.name,
                                  {"train_steps": len(data)}))
        log.info("%s: trained in %d steps", env.name, len(data))
    return sources


def _greedy_streak(env, agent, rng, needed: int) -> int:
    """Consecutive greedy test episodes that reach the roll-out cap."""
    streak = 0
    for _ in range(needed):
        steps = evaluate_greedy(env, agent.greedy, 1, rng)[0]
        if steps < env.max_steps:
            break
        streak += 1
    return streak


def train_cartpole_source(env, cfg: ExperimentConfig, rng_seed: int, budget: int = 300_000,
                          check_every: int = 5_000, needed: int = 10):
    """DQN on one source until ``needed`` consecutive greedy episodes hit the cap.

    Returns the agent and every transition seen during training.
    """
    streams = spawn_streams(rng_seed)
    env.rng = streams["env"]
    buf = ReplayBuffer(cfg.capacity or 5000, (env.obs_dim,), rng=streams["buffer"])
    agent = DqnAgent((env.obs_dim, *cfg.dqn_hidden, env.n_actions), cfg.dqn_lr, cfg.gamma,
                     cfg.batch_size, cfg.sync_every, cfg.dqn_l2, buf, rng=streams["init"])
    data = []
    episode = 1
    s = env.reset()
    best = 0
    for step in range(1, budget + 1):
        a = epsilon_greedy(agent, s, cfg.epsilon(episode), streams["agent"])
        s2, r, term, trunc = env.step(a)
        t = Transition(s, a, r, s2, term)
        buf.push(t)
        data.append(t)
        dqn_train_step(agent)
        if term or trunc:
            episode += 1
            s = env.reset()
        else:
            s = s2
        if step % check_every == 0:
            eval_env = type(env)(env.spec, env.name, streams["eval"])
            streak = _greedy_streak(eval_env, agent, streams["eval"], needed)
            best = max(best, streak)
            log.info("%s: step %d streak %d", env.name, step, streak)
            if streak >= needed:
                return agent, data
    raise PretrainFailed(f"{env.name}: best greedy streak {best}/{needed} after {budget} steps")


def fit_dynamics(data: list[Transition], cfg: ExperimentConfig, n_actions: int, rng_seed: int,
                 updates: int = 40_000, holdout: float = 0.1) -> tuple[MlpDyn, float]:
    """Fit a next-state regressor; returns it with its held-out MSE."""
    rng = make_rng(rng_seed)
    s = np.array([t.s for t in data])
    a = np.array([t.a for t in data])
    s2 = np.array([t.s_next for t in data])
    order = rng.permutation(len(data))
    n_test = max(1, int(holdout * len(data)))
    test, train = order[:n_test], order[n_test:]
    dyn = MlpDyn(s.shape[1], n_actions, cfg.dyn_hidden, cfg.dyn_lr, cfg.dyn_l2, rng)
    for _ in range(updates):
        idx = train[rng.integers(0, len(train), size=cfg.batch_size)]
        train_dynamics(dyn, Batch(s[idx], a[idx], None, s2[idx], None, None))
    return dyn, dyn.loss(s[test], a[test], s2[test])


def pretrain_cartpole(cfg: ExperimentConfig, seed: int = 0, budget: int = 300_000,
                      dyn_updates: int = 40_000) -> list[SourceTask]:
    sources = []
    for i, env in enumerate(make_source_envs("cartpole")):
        agent, data = train_cartpole_source(env, cfg, seed * 101 + i, budget)
        dyn, mse = fit_dynamics(data, cfg, env.n_actions, seed * 101 + i, dyn_updates)
        log.info("%s: %d transitions, held-out dynamics MSE %.3g", env.name, len(data), mse)
        sources.append(SourceTask(QNetPolicy(agent.online), dyn, cfg.nu, env.name,
                                  {"train_steps": len(data), "heldout_mse": mse}))
    return sources


def pretrain_sources(env_id: str, out_dir, seed: int = 0, cfg: ExperimentConfig | None = None,
                     **kwargs) -> Path:
    """Train every source task of ``env_id`` and write the bundle to ``out_dir``."""
    cfg = cfg or ExperimentConfig.for_env(env_id)
    if env_id in MAZE_LAYOUTS:
        sources = pretrain_maze(env_id, cfg, seed, **kwargs)
    elif env_id == "cartpole":
        sources = pretrain_cartpole(cfg, seed, **kwargs)
    else:
        raise BadConfig(f"unknown env {env_id!r}")
    return save_bundle(out_dir, env_id, sources, {"seed": seed})
