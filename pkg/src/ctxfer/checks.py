"""Self-checks behind ``ctxfer verify``: learning code against independent oracles.

Each check returns the measured quantity; :func:`run_all` compares it with
its tolerance. All draws come from fixed seeds, so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Transition, make_rng
from .mixture import MixtureNet, bayes_posterior, gradient, log_density, posterior_from
from .nn import Mlp
from .sources import MlpDyn, SourceTask, TablePolicy, TabularDyn, source_log_likelihoods
from .transfer import MarsConfig, shaped_reward
from .verify import (brute_force_gate, bayes_update, central_differences, check_value_bound,
                     max_relative_error, perturb, random_mdp, random_stochastic,
                     shaped_value_iteration, value_iteration)

GRAD_TOL = 1e-4
BAYES_TOL = 1e-12
FD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    ok: bool

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.value:.3g} (tolerance {self.tol:g})"


# ---------------------------------------------------------------------------
# Mixture gradient vs finite differences
# ---------------------------------------------------------------------------


def _gradient_instance(rng: np.random.Generator):
    obs_dim, n_actions = 3, 2
    n_sources = int(rng.integers(2, 4))
    sources = []
    for _ in range(n_sources):
        dyn = MlpDyn(obs_dim, n_actions, hidden=(6,), rng=rng)
        sources.append(SourceTask(None, dyn, nu=float(rng.uniform(0.5, 20.0))))
    batch = int(rng.integers(4, 12))
    s = rng.normal(size=(batch, obs_dim))
    a = rng.integers(n_actions, size=batch)
    s_next = s + rng.normal(scale=0.3, size=(batch, obs_dim))
    loglik = source_log_likelihoods(sources, s, a, s_next)
    mix = MixtureNet(obs_dim, n_sources, hidden=(5, 4), l2=float(rng.choice([0.0, 1e-3])), rng=rng)
    # nonzero biases keep units off the ReLU kink, where differences are one-sided
    for b in mix.net.params[1::2]:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    return mix, s, loglik


def gradient_error(instances: int = 20, seed: int = 0) -> float:
    """Worst relative error between both analytic gradient routes and finite differences."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        mix, x, loglik = _gradient_instance(rng)

        def loss():
            z = mix.net.logits(x)
            return float(-log_density(loglik, z).mean()) + mix.net.l2_penalty()

        numeric = central_differences(loss, mix.net.params)
        for route in ("bayes", "backprop"):
            analytic = gradient(mix, x, loglik, route)
            worst = max(worst, max_relative_error(analytic, numeric, floor=FD_FLOOR))
    return worst


# ---------------------------------------------------------------------------
# Posterior vs brute-force Bayes
# ---------------------------------------------------------------------------


def bayes_error(pairs: int = 1000, seed: int = 0) -> float:
    """Worst absolute gap between the gate's posterior and a direct Bayes update.

    Random priors and likelihoods (some exactly zero) go through the
    log-domain posterior; a tabular end-to-end case goes through the public
    ``bayes_posterior`` against ``brute_force_gate``.
    """
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        n = int(rng.integers(2, 6))
        prior = random_stochastic(rng, n)
        lik = rng.uniform(size=n) * (rng.uniform(size=n) > 0.2)
        if not lik.any():
            lik[rng.integers(n)] = rng.uniform(0.1, 1.0)
        with np.errstate(divide="ignore"):
            post = posterior_from(np.log(lik)[None, :], prior[None, :])[0]
        worst = max(worst, float(np.abs(post - bayes_update(prior, lik)).max()))
    worst = max(worst, _tabular_bayes_error(rng))
    return worst


def _tabular_bayes_error(rng: np.random.Generator, cases: int = 50) -> float:
    n_states, n_actions, n_src = 6, 2, 3
    sources = []
    for _ in range(n_src):
        dyn = TabularDyn(n_states, n_actions)
        dyn.next = rng.integers(n_states, size=(n_states, n_actions))
        sources.append(SourceTask(TablePolicy(np.zeros(n_states, dtype=int), n_actions), dyn))
    mix = MixtureNet(n_states, n_src, hidden=(4,), encode=lambda s: np.eye(n_states)[s], zero=True)
    worst = 0.0
    for _ in range(cases):
        s, a = int(rng.integers(n_states)), int(rng.integers(n_actions))
        s2 = int(sources[int(rng.integers(n_src))].dynamics.next[s, a])
        got = bayes_posterior(mix, sources, s, a, s2).posterior
        want = brute_force_gate(sources, [Transition(s, a, 0.0, s2, False)], n_states)[s]
        worst = max(worst, float(np.abs(got - want).max()))
    return worst


# ---------------------------------------------------------------------------
# Value-error bound
# ---------------------------------------------------------------------------


def value_bound_violations(mdps: int = 1000, seed: int = 0) -> int:
    rng = make_rng(seed)
    bad = 0
    for _ in range(mdps):
        n_s, n_a = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        gamma = float(rng.choice([0.5, 0.9, 0.95]))
        mdp = random_mdp(rng, n_s, n_a, gamma)
        P_hat = perturb(mdp.P, rng, float(rng.uniform(0.0, 1.0)))
        pi = (rng.integers(n_a, size=n_s) if rng.random() < 0.5
              else random_stochastic(rng, (n_s, n_a)))
        bad += not check_value_bound(mdp, P_hat, pi)[2]
    return bad


# ---------------------------------------------------------------------------
# Shaping soundness
# ---------------------------------------------------------------------------


def telescoping_gap() -> float:
    """``sum_t (r'_t - r_t) + c * phi(s_0, a_0)`` on a 3-step episode with gamma = 1.

    Potentials are dyadic, so the sum is exact and the gap must be 0.
    """
    cfg = MarsConfig(c=2.0, gamma=1.0, sources=[])
    phis = [0.75, 0.25, 0.5]
    rewards = [-0.5, -0.25, 1.0]
    total = 0.0
    for k, (phi, r) in enumerate(zip(phis, rewards)):
        last = k == len(phis) - 1
        t = Transition(k, 0, r, k + 1, last)
        phi_next = 0.0 if last else phis[k + 1]
        total += shaped_reward(cfg, t, -1 if last else 0, phi, phi_next) - r
    return abs(total + cfg.c * phis[0])


def chain_mdp(n: int = 5, step_cost: float = -0.1, goal: float = 1.0):
    """Chain ``0..n-1`` with left/right moves; the last state is terminal."""
    P = np.zeros((n, 2, n))
    R = np.full((n, 2, n), step_cost)
    for s in range(n):
        for a, d in enumerate((-1, 1)):
            nxt = s if s == n - 1 else min(max(s + d, 0), n - 1)
            P[s, a, nxt] = 1.0
    R[:, :, n - 1] = goal
    R[n - 1] = 0.0
    terminal = np.zeros(n, dtype=bool)
    terminal[n - 1] = True
    return P, R, terminal


def invariance_mismatches(gamma: float = 0.95, seed: int = 0) -> int:
    """States where shaped value iteration picks a different action than plain VI.

    The potential comes from a frozen random gate over a helpful and a
    misleading source; several shaping scales are tried.
    """
    rng = make_rng(seed)
    P, R, terminal = chain_mdp()
    n = P.shape[0]
    good = np.ones(n, dtype=int)
    bad = np.zeros(n, dtype=int)
    gate_net = Mlp([n, 6, 2], "softmax", rng=rng)
    w = gate_net.predict(np.eye(n))
    phi = np.zeros((n, 2))
    for i, rec in enumerate((good, bad)):
        phi[np.arange(n), rec] += w[:, i]
    live = ~terminal
    best = np.argmax(value_iteration(P, R, gamma, terminal), axis=1)
    mismatches = 0
    for c in (0.5, 1.0, 2.0, 5.0):
        Qs = shaped_value_iteration(P, R, gamma, phi, c, terminal)
        shaped_best = np.argmax(Qs + c * phi, axis=1)
        mismatches += int((shaped_best != best)[live].sum())
    return mismatches


def run_all() -> list[CheckResult]:
    out = []
    g = gradient_error()
    out.append(CheckResult("mixture gradient vs finite differences", g, GRAD_TOL, g < GRAD_TOL))
    b = bayes_error()
    out.append(CheckResult("posterior vs brute-force Bayes", b, BAYES_TOL, b < BAYES_TOL))
    v = value_bound_violations()
    out.append(CheckResult("value-error bound violations", v, 0, v == 0))
    tg = telescoping_gap()
    out.append(CheckResult("shaping telescoping gap", tg, 0, tg == 0.0))
    m = invariance_mismatches()
    out.append(CheckResult("shaped greedy policy mismatches", m, 0, m == 0))
    return out
