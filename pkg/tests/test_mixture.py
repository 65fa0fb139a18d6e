import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxfer.core import Transition, ZeroEvidence
from ctxfer.mixture import (MixtureNet, bayes_posterior, export_gate_csv, gate, grad_step,
                            gradient, logit_gradient, nll_loss, predictive_density, train_on)
from ctxfer.nn import Mlp
from ctxfer.sources import MlpDyn, SourceTask, TablePolicy, TabularDyn
from ctxfer.verify import brute_force_gate

S = np.zeros(2)
S_NEXT = np.array([1.0, 0.0])  # unit distance from the identity prediction


def kernel_sources(*liks):
    """Continuous sources predicting ``s' = s`` whose kernel at unit error equals ``liks``."""
    out = []
    for lik in liks:
        dyn = MlpDyn(2, 2, net=Mlp([4, 3, 2], zero=True))
        out.append(SourceTask(None, dyn, nu=-math.log(lik)))
    return out


def uniform_mix(n, n_inputs=2):
    return MixtureNet(n_inputs, n, hidden=(3,), zero=True)


def test_untrained_gate_is_uniform():
    np.testing.assert_allclose(gate(uniform_mix(4), np.ones(2)), np.full(4, 0.25))


def test_cartpole_gate_width():
    mix = MixtureNet(4, 3, rng=np.random.default_rng(0))
    assert gate(mix, np.zeros(4)).shape == (3,)


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.integers(0, 2 ** 16))
@settings(max_examples=40, deadline=None)
def test_gate_on_simplex(x, seed):
    mix = MixtureNet(4, 3, rng=np.random.default_rng(seed))
    a = gate(mix, np.array(x))
    assert (a > 0).all() or (a >= 0).all()
    assert abs(a.sum() - 1.0) < 1e-9


def test_predictive_density_hand_value():
    srcs = kernel_sources(0.8, 0.2)
    assert predictive_density(uniform_mix(2), srcs, S, 0, S_NEXT) == pytest.approx(0.5, abs=1e-15)


def test_predictive_density_degenerate_cases():
    srcs = kernel_sources(0.8, 0.2)
    mix = uniform_mix(2)
    mix.net.params[-1][...] = [50.0, -50.0]  # gate one-hot on source 1
    assert predictive_density(mix, srcs, S, 0, S_NEXT) == pytest.approx(0.8, rel=1e-12)
    equal = kernel_sources(0.3, 0.3)
    mix.net.params[-1][...] = [1.0, -2.0]
    assert predictive_density(mix, equal, S, 0, S_NEXT) == pytest.approx(0.3, rel=1e-12)


def test_posterior_hand_value():
    post = bayes_posterior(uniform_mix(2), kernel_sources(0.8, 0.2), S, 0, S_NEXT)
    np.testing.assert_allclose(post.posterior, [0.8, 0.2], atol=1e-15)
    np.testing.assert_allclose(post.prior, [0.5, 0.5])
    np.testing.assert_allclose(post.likelihoods, [0.8, 0.2], atol=1e-15)


def test_flat_evidence_keeps_prior():
    mix = uniform_mix(3)
    mix.net.params[-1][...] = [0.3, -0.1, 1.2]
    post = bayes_posterior(mix, kernel_sources(0.4, 0.4, 0.4), S, 1, S_NEXT)
    np.testing.assert_allclose(post.posterior, post.prior, atol=1e-15)


def test_one_hot_prior_stays_one_hot():
    mix = uniform_mix(2)
    mix.net.params[-1][...] = [-800.0, 0.0]  # exp underflows: exact zero prior mass
    post = bayes_posterior(mix, kernel_sources(0.9, 0.1), S, 0, S_NEXT)
    assert post.posterior.tolist() == [0.0, 1.0]


def _tabular_pair():
    srcs = []
    for nxt in (1, 2):
        dyn = TabularDyn(3, 1)
        dyn.observe(0, 0, nxt)
        srcs.append(SourceTask(TablePolicy([0, 0, 0], 1), dyn))
    return srcs


def test_zero_evidence_raises():
    mix = MixtureNet(3, 2, hidden=(2,), encode=lambda s: np.eye(3)[s], zero=True)
    with pytest.raises(ZeroEvidence) as err:
        bayes_posterior(mix, _tabular_pair(), 0, 0, 0)
    assert err.value.code == "zero-evidence"


def test_zero_evidence_rows_are_skipped_and_counted():
    mix = MixtureNet(3, 2, hidden=(2,), encode=lambda s: np.eye(3)[s], zero=True)
    batch = [Transition(0, 0, 0.0, 0, False), Transition(0, 0, 0.0, 1, False)]
    nll = nll_loss(mix, _tabular_pair(), batch)
    assert nll == pytest.approx(math.log(2.0))
    grad_step(mix, _tabular_pair(), batch)
    assert mix.zero_evidence == 1


def test_nll_hand_value():
    srcs = kernel_sources(0.5, 0.25)
    batch = [Transition(S, 0, 0.0, S_NEXT, False)]
    assert nll_loss(uniform_mix(2), srcs, batch) == pytest.approx(0.9808292530117262, abs=1e-12)


def test_certain_samples_have_zero_loss():
    srcs = kernel_sources(0.5, 0.5)
    batch = [Transition(S, 0, 0.0, S, False)] * 3
    assert nll_loss(uniform_mix(2), srcs, batch) == 0.0


def test_logit_coefficients_hand_value():
    coeff = logit_gradient(np.log([[0.8, 0.2]]), np.zeros((1, 2)))
    np.testing.assert_allclose(coeff, [[-0.3, 0.3]], atol=1e-15)


def test_matching_posterior_gives_l2_only_gradient():
    rng = np.random.default_rng(0)
    mix = MixtureNet(2, 3, hidden=(4,), l2=0.05, rng=rng)
    x = rng.normal(size=(6, 2))
    grads = gradient(mix, x, np.full((6, 3), -1.7))
    for k, g in enumerate(grads):
        expected = 0.1 * mix.net.params[k] if k % 2 == 0 else 0.0
        np.testing.assert_allclose(g, expected, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_posterior_form_equals_backprop(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    mix = MixtureNet(3, n, hidden=(6, 5), l2=1e-3, rng=rng)
    x = rng.normal(size=(16, 3))
    loglik = -rng.exponential(3.0, size=(16, n))
    loglik[rng.uniform(size=(16, n)) < 0.2] = -np.inf
    bayes = gradient(mix, x, loglik, "bayes")
    back = gradient(mix, x, loglik, "backprop")
    for u, v in zip(bayes, back):
        np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-10)


def test_loss_decreases_on_source_one_data():
    rng = np.random.default_rng(3)
    srcs = kernel_sources(0.6, 0.1)
    s = rng.normal(size=(64, 2))
    batch = [Transition(s[k], 0, 0.0, s[k] + S_NEXT, False) for k in range(64)]
    mix = MixtureNet(2, 2, hidden=(8,), lr=0.01, epochs=1, rng=rng)
    losses = [nll_loss(mix, srcs, batch)]
    for _ in range(100):
        grad_step(mix, srcs, batch)
        losses.append(nll_loss(mix, srcs, batch))
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses[::10], losses[10::10]))


def test_tabulated_gate_matches_bayes_oracle():
    rng = np.random.default_rng(7)
    n_states, n_actions = 5, 2
    nxt = rng.integers(n_states, size=(3, n_states, n_actions))
    owner = np.array([0, 1, 2, 0, 1])  # which source is exact in each state
    target = nxt[owner, np.arange(n_states)]  # (S, A)
    sources = []
    for i in range(3):
        dyn = TabularDyn(n_states, n_actions)
        dyn.next = nxt[i]
        sources.append(SourceTask(TablePolicy(np.zeros(n_states, dtype=int), n_actions), dyn))
    # one free logit vector per state
    mix = MixtureNet(n_states, 3, hidden=(), lr=0.05, epochs=1,
                     encode=lambda s: np.eye(n_states)[s], zero=True)
    data, visits = [], np.zeros(n_states, dtype=int)
    for _ in range(1500):
        s = rng.integers(n_states, size=32)
        a = rng.integers(n_actions, size=32)
        batch = [Transition(int(u), int(v), 0.0, int(target[u, v]), False) for u, v in zip(s, a)]
        grad_step(mix, sources, batch)
        data += batch
        np.add.at(visits, s, 1)
    oracle = brute_force_gate(sources, data, n_states)
    learned = gate(mix, np.arange(n_states))
    seen = visits >= 100
    assert seen.all()
    assert np.abs(learned[seen] - oracle[seen]).max() < 0.05


def test_training_keeps_gate_on_simplex():
    rng = np.random.default_rng(2)
    mix = MixtureNet(2, 3, hidden=(5,), lr=0.1, epochs=4, rng=rng)
    for _ in range(50):
        x = rng.normal(size=(8, 2))
        train_on(mix, x, -rng.exponential(size=(8, 3)))
        a = gate(mix, rng.normal(size=(20, 2)) * 5)
        assert (a >= 0).all() and np.allclose(a.sum(axis=1), 1.0, atol=1e-9)


def test_export_gate_csv(tmp_path):
    path = tmp_path / "gate.csv"
    export_gate_csv(path, ["1:1", "1:2"], np.array([[0.25, 0.75], [1.0, 0.0]]), checkpoint=0)
    lines = path.read_text().splitlines()
    assert lines[0].endswith("a_1,a_2")
    assert lines[1].endswith("1:1,0.25,0.75")
