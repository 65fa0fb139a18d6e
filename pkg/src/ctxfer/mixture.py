"""Contextual mixture over source dynamics models.

The gate ``a(s; theta)`` is a softmax network giving, per state, the posterior
mean weight of every source model. It is fit by minimizing the negative
log-likelihood of observed target transitions under the mixture
``sum_i L_i(s, a, s') a_i(s)``. The per-sample gradient with respect to the
gate logits is ``a - p`` where ``p`` is the Bayes posterior over sources.

Everything is computed from per-source *log*-likelihoods so that very sharp
kernels (large precision) neither underflow nor need clamping.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Batch, ZeroEvidence
from .nn import Adam, Mlp, log_softmax, softmax
from .sources import source_log_likelihoods


class MixtureNet:
    def __init__(self, n_inputs: int, n_sources: int, hidden=(30, 30), lr: float = 0.001,
                 epochs: int = 1, l2: float = 0.0, rng: np.random.Generator | None = None,
                 encode: Callable | None = None, zero: bool = False):
        self.n_sources = n_sources
        self.net = Mlp([n_inputs, *hidden, n_sources], "softmax", l2, rng, zero=zero)
        self.opt = Adam([self.net.flat], lr)
        self.epochs = epochs
        self.encode = encode
        self.zero_evidence = 0
        self.updates = 0

    @property
    def lr(self) -> float:
        return self.opt.lr

    def features(self, states) -> np.ndarray:
        """Encoded gate inputs for a batch of raw states."""
        if self.encode is None:
            return np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.atleast_2d(self.encode(np.atleast_1d(states)))

    def is_single(self, s) -> bool:
        return np.ndim(s) == (1 if self.encode is None else 0)


def gate(mix: MixtureNet, s) -> np.ndarray:
    """Source weights for one raw state (vector) or a batch of them (matrix)."""
    single = mix.is_single(s)
    out = mix.net.predict(mix.features(s))
    return out[0] if single else out


def gate_features(mix: MixtureNet, x) -> np.ndarray:
    return mix.net.predict(x)


# ---------------------------------------------------------------------------
# Bayes arithmetic on log-likelihoods
# ---------------------------------------------------------------------------


def _logsumexp(m: np.ndarray) -> np.ndarray:
    peak = m.max(axis=1, keepdims=True)
    finite = np.isfinite(peak)
    safe = np.where(finite, peak, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(m - safe).sum(axis=1)) + safe[:, 0]
    return np.where(finite[:, 0], out, -np.inf)


def evidence_mask(loglik: np.ndarray) -> np.ndarray:
    """Rows where at least one source gives the sample positive likelihood."""
    return np.isfinite(loglik).any(axis=1)


def log_density(loglik: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Per-row ``log sum_i L_i a_i`` given log-likelihoods and gate logits."""
    return _logsumexp(loglik + log_softmax(logits))


def posterior_from(loglik: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Normalized ``L_i * prior_i`` per row. Rows without evidence raise."""
    loglik = np.atleast_2d(loglik)
    prior = np.atleast_2d(prior)
    with np.errstate(divide="ignore"):
        joint = loglik + np.log(prior)
    norm = _logsumexp(joint)
    if not np.isfinite(norm).all():
        raise ZeroEvidence("every source assigns zero likelihood to the sample")
    return np.exp(joint - norm[:, None])


def _nll_terms(loglik: np.ndarray, logits: np.ndarray):
    """Per-row log density and logit gradient ``a - p``, sharing one log-softmax."""
    log_a = log_softmax(logits)
    joint = loglik + log_a
    dens = _logsumexp(joint)
    return dens, np.exp(log_a) - np.exp(joint - dens[:, None])


def logit_gradient(loglik: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the NLL with respect to the gate logits: ``a - p``."""
    return _nll_terms(loglik, logits)[1]


def output_gradient(loglik: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the NLL with respect to the gate *probabilities*.

    ``d/da_i [-log sum_j L_j a_j] = -L_i / sum_j L_j a_j``; used to cross-check
    the logit form by pushing it through the softmax Jacobian.
    """
    shift = loglik.max(axis=1, keepdims=True)
    lik = np.exp(loglik - shift)
    a = softmax(logits)
    return -lik / (lik * a).sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSample:
    prior: np.ndarray
    likelihoods: np.ndarray
    posterior: np.ndarray


def _unpack(batch):
    if isinstance(batch, Batch):
        return batch.s, batch.a, batch.s_next
    s = np.array([t.s for t in batch])
    a = np.array([t.a for t in batch], dtype=np.int64)
    s_next = np.array([t.s_next for t in batch])
    return s, a, s_next


def predictive_density(mix: MixtureNet, sources, s, a, s_next) -> float:
    s_b = np.atleast_1d(s) if np.ndim(s) == 0 else np.atleast_2d(s)
    ll = source_log_likelihoods(sources, s_b, np.atleast_1d(a), np.atleast_1d(s_next)
                                if np.ndim(s_next) == 0 else np.atleast_2d(s_next))
    prior = gate(mix, s)
    return float((np.exp(ll[0]) * prior).sum())


def bayes_posterior(mix: MixtureNet, sources, s, a, s_next) -> PosteriorSample:
    s_b = np.atleast_1d(s) if np.ndim(s) == 0 else np.atleast_2d(s)
    sn_b = np.atleast_1d(s_next) if np.ndim(s_next) == 0 else np.atleast_2d(s_next)
    ll = source_log_likelihoods(sources, s_b, np.atleast_1d(a), sn_b)[0]
    prior = gate(mix, s)
    post = posterior_from(ll[None, :], prior[None, :])[0]
    return PosteriorSample(prior, np.exp(ll), post)


def nll_from_loglik(mix: MixtureNet, x: np.ndarray, loglik: np.ndarray) -> float:
    keep = evidence_mask(loglik)
    z = mix.net.logits(x[keep])
    return float(-log_density(loglik[keep], z).sum())


def nll_loss(mix: MixtureNet, sources, batch) -> float:
    """Summed negative log predictive density, skipping zero-evidence samples."""
    s, a, s_next = _unpack(batch)
    return nll_from_loglik(mix, mix.features(s), source_log_likelihoods(sources, s, a, s_next))


def gradient(mix: MixtureNet, x: np.ndarray, loglik: np.ndarray, route: str = "bayes"):
    """Mean-over-batch NLL gradient (plus L2) for the evidence-bearing rows.

    ``route="bayes"`` injects ``a - p`` at the logits; ``route="backprop"``
    differentiates through the softmax head from the probability side.
    """
    keep = evidence_mask(loglik)
    x, loglik = x[keep], loglik[keep]
    if len(x) == 0:
        return None
    z = mix.net.logits(x)
    if route == "bayes":
        return mix.net.backward(logit_gradient(loglik, z) / len(x), wrt="logits")
    if route == "backprop":
        return mix.net.backward(output_gradient(loglik, z) / len(x), wrt="output")
    raise ValueError(route)


def train_on(mix: MixtureNet, x: np.ndarray, loglik: np.ndarray) -> float:
    """``epochs`` Adam passes over one minibatch; returns the pre-update mean NLL.

    Zero-evidence rows are dropped and counted.
    """
    keep = evidence_mask(loglik)
    dropped = int((~keep).sum())
    mix.zero_evidence += dropped
    if dropped:
        x, loglik = x[keep], loglik[keep]
    if len(x) == 0:
        return float("nan")
    first = float("nan")
    for epoch in range(mix.epochs):
        dens, g = _nll_terms(loglik, mix.net.logits(x))
        if epoch == 0:
            first = float(-dens.mean())
        grads = mix.net.backward(g / len(x), wrt="logits", flat=True)
        mix.opt.step([mix.net.flat], [grads])
        mix.updates += 1
    return first


def grad_step(mix: MixtureNet, sources, batch) -> float:
    s, a, s_next = _unpack(batch)
    return train_on(mix, mix.features(s), source_log_likelihoods(sources, s, a, s_next))


def export_gate_csv(path, reprs, weights: np.ndarray, checkpoint=None) -> None:
    """Write ``[checkpoint,]state_repr,a_1..a_n`` rows for heatmap plotting."""
    n = weights.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["state_repr"] + [f"a_{i + 1}" for i in range(n)]
        w.writerow((["checkpoint"] if checkpoint is not None else []) + head)
        for rep, row in zip(reprs, weights):
            w.writerow(([checkpoint] if checkpoint is not None else []) + [rep] + [repr(float(v)) for v in row])
