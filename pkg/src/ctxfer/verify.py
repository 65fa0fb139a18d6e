"""Independent oracles used to check the learning code.

* exact policy evaluation on small finite MDPs and the value-error bound
  ``||V_hat - V||_inf <= gamma / (1 - gamma)^2 * ||R||_inf * ||P_hat - P||_inf``;
* a brute-force per-state Bayes update over tabular source models;
* central finite differences for any scalar function of a parameter list.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

import numpy as np

BOUND_SLACK = 1e-9


@dataclass
class FiniteMdp:
    P: np.ndarray  # (S, A, S) row-stochastic
    R: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError("P must have shape (S, A, S)")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("every P(.|s,a) row must sum to 1")
        if (self.P < 0).any():
            raise ValueError("negative transition probability")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def policy_matrix(P: np.ndarray, pi) -> np.ndarray:
    """State-to-state matrix under a deterministic (S,) or stochastic (S, A) policy."""
    pi = np.asarray(pi)
    if pi.ndim == 1:
        return P[np.arange(P.shape[0]), pi.astype(np.int64)]
    return np.einsum("sa,sat->st", pi, P)


def policy_value(mdp: FiniteMdp, pi, P: np.ndarray | None = None) -> np.ndarray:
    """Solve ``(I - gamma P^pi) V = R``."""
    Ppi = policy_matrix(mdp.P if P is None else P, pi)
    A = np.eye(mdp.n_states) - mdp.gamma * Ppi
    return np.linalg.solve(A, mdp.R)


def inf_norm(M: np.ndarray) -> float:
    """Max absolute row sum for matrices, max absolute entry for vectors."""
    M = np.asarray(M)
    if M.ndim == 1:
        return float(np.abs(M).max())
    return float(np.abs(M).sum(axis=1).max())


def check_value_bound(mdp: FiniteMdp, P_hat: np.ndarray, pi) -> tuple[float, float, bool]:
    """Both sides of the value-error bound for one policy, and whether it holds."""
    P_hat = np.asarray(P_hat, dtype=np.float64)
    if not np.allclose(P_hat.sum(axis=-1), 1.0, atol=1e-12, rtol=0):
        raise ValueError("P_hat must be row-stochastic")
    v_hat = policy_value(mdp, pi, P_hat)
    v = policy_value(mdp, pi)
    lhs = inf_norm(v_hat - v)
    g = mdp.gamma
    rhs = g / (1.0 - g) ** 2 * inf_norm(mdp.R) * inf_norm(
        policy_matrix(P_hat, pi) - policy_matrix(mdp.P, pi))
    return lhs, rhs, lhs <= rhs + BOUND_SLACK


def random_stochastic(rng: np.random.Generator, shape) -> np.ndarray:
    X = rng.exponential(size=shape)
    return X / X.sum(axis=-1, keepdims=True)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float) -> FiniteMdp:
    P = random_stochastic(rng, (n_states, n_actions, n_states))
    R = rng.uniform(-1.0, 1.0, size=n_states)
    return FiniteMdp(P, R, gamma)


def perturb(P: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Convex blend of ``P`` with a random stochastic tensor (stays row-stochastic)."""
    Q = random_stochastic(rng, P.shape)
    out = (1.0 - strength) * P + strength * Q
    return out / out.sum(axis=-1, keepdims=True)


def monte_carlo_value(mdp: FiniteMdp, pi, s0: int, episodes: int,
                      rng: np.random.Generator, tol: float = 1e-12) -> tuple[float, float]:
    """Mean and standard error of sampled discounted returns from ``s0``.

    Roll-outs stop once ``gamma^t`` falls below ``tol`` (truncation bias below
    ``tol * ||R|| / (1 - gamma)``).
    """
    Ppi = policy_matrix(mdp.P, pi)
    cdf = np.cumsum(Ppi, axis=1)
    horizon = 1 if mdp.gamma == 0 else int(np.ceil(np.log(tol) / np.log(mdp.gamma))) + 1
    states = np.full(episodes, s0, dtype=np.int64)
    returns = np.zeros(episodes)
    disc = 1.0
    for _ in range(horizon):
        returns += disc * mdp.R[states]
        disc *= mdp.gamma
        u = rng.random(episodes)
        states = (u[:, None] > cdf[states]).sum(axis=1)
        np.minimum(states, mdp.n_states - 1, out=states)
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(episodes))


# ---------------------------------------------------------------------------
# Brute-force Bayes gate
# ---------------------------------------------------------------------------


def bayes_update(prior: np.ndarray, lik: np.ndarray) -> np.ndarray | None:
    """One exact Bayes step; ``None`` when the evidence is zero under the prior."""
    joint = np.asarray(prior, dtype=np.float64) * np.asarray(lik, dtype=np.float64)
    z = joint.sum()
    if z <= 0.0:
        return None
    return joint / z


def bayes_product(likelihood_rows, n: int) -> np.ndarray:
    """Sequential Bayes updates from a uniform prior; zero-evidence rows are skipped."""
    post = np.full(n, 1.0 / n)
    for lik in likelihood_rows:
        nxt = bayes_update(post, lik)
        if nxt is not None:
            post = nxt
    return post


def brute_force_gate(sources, transitions, n_states: int) -> np.ndarray:
    """Per-state posterior over tabular sources, ``(n_states, n_sources)``.

    Each state's row is the normalized product of the sources' likelihoods of
    all transitions leaving that state; states without data keep the uniform prior.
    """
    grouped = defaultdict(list)
    for t in transitions:
        lik = np.array([float(np.exp(src.log_likelihood(t.s, t.a, t.s_next)[0])) for src in sources])
        grouped[int(t.s)].append(lik)
    out = np.full((n_states, len(sources)), 1.0 / len(sources))
    for s, rows in grouped.items():
        out[s] = bayes_product(rows, len(sources))
    return out


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def central_differences(f: Callable[[], float], params: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Gradient of ``f()`` by perturbing every entry of ``params`` in place."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f()
            flat[k] = orig - h
            down = f()
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(a_list, b_list, floor: float = 1e-8) -> float:
    worst = 0.0
    for a, b in zip(a_list, b_list):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float((np.abs(a - b) / denom).max()))
    return worst


# ---------------------------------------------------------------------------
# Value iteration with and without action-dependent shaping
# ---------------------------------------------------------------------------


def value_iteration(P: np.ndarray, R: np.ndarray, gamma: float, terminal=None,
                    tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q for rewards ``R[s, a, s']``; terminal states end the episode."""
    S, A, _ = P.shape
    cont = np.ones(S) if terminal is None else 1.0 - np.asarray(terminal, dtype=float)
    Q = np.zeros((S, A))
    for _ in range(max_iter):
        V = Q.max(axis=1) * cont
        Q_new = (P * (R + gamma * V[None, None, :])).sum(axis=2)
        if np.abs(Q_new - Q).max() < tol:
            return Q_new
        Q = Q_new
    return Q


def shaped_value_iteration(P, R, gamma, phi: np.ndarray, c: float, terminal=None,
                           tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of the Bellman backup on shaped rewards.

    The shaping term uses the next action the agent would take, chosen by
    ``argmax_b Q'(s', b) + c * phi(s', b)`` (look-ahead advice). Returns Q'.
    """
    from .transfer import shaped_rewards

    S, A, _ = P.shape
    cont = np.ones(S) if terminal is None else 1.0 - np.asarray(terminal, dtype=float)
    term_next = np.broadcast_to(cont == 0.0, (S, A, S))
    phi_now = np.broadcast_to(phi[:, :, None], (S, A, S))
    Q = np.zeros((S, A))
    for _ in range(max_iter):
        a_next = np.argmax(Q + c * phi, axis=1)
        phi_next = np.broadcast_to(phi[np.arange(S), a_next][None, None, :], (S, A, S))
        R_shaped = shaped_rewards(c, gamma, R, term_next, phi_now, phi_next)
        V = Q[np.arange(S), a_next] * cont
        Q_new = (P * (R_shaped + gamma * V[None, None, :])).sum(axis=2)
        if np.abs(Q_new - Q).max() < tol:
            return Q_new
        Q = Q_new
    return Q
