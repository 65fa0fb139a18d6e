import numpy as np
import pytest

from ctxfer.core import Transition
from ctxfer.verify import (FiniteMdp, bayes_product, brute_force_gate, central_differences,
                           check_value_bound, inf_norm, max_relative_error, monte_carlo_value,
                           perturb, policy_value, random_mdp)


class LookupSource:
    """Stub source whose likelihood of a transition is read from ``table[s_next]``."""

    def __init__(self, table):
        self.table = table

    def log_likelihood(self, s, a, s_next):
        with np.errstate(divide="ignore"):
            return np.log(np.atleast_1d(self.table[int(s_next)]))


def test_zero_discount_value_is_reward():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, 4, 2, 0.0)
    np.testing.assert_array_equal(policy_value(mdp, [0, 1, 0, 1]), mdp.R)


def test_single_state_geometric_series():
    mdp = FiniteMdp(np.ones((1, 1, 1)), np.array([1.0]), 0.5)
    assert policy_value(mdp, [0])[0] == pytest.approx(2.0)


@pytest.mark.parametrize("seed", range(5))
def test_bellman_residual(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 3, 0.9)
    pi = rng.integers(3, size=4)
    v = policy_value(mdp, pi)
    Ppi = mdp.P[np.arange(4), pi]
    assert np.abs(mdp.R + 0.9 * Ppi @ v - v).max() < 1e-10


def test_stochastic_policy_value():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng, 3, 2, 0.8)
    half = np.full((3, 2), 0.5)
    avg = 0.5 * (mdp.P[:, 0] + mdp.P[:, 1])
    np.testing.assert_allclose(policy_value(mdp, half),
                               np.linalg.solve(np.eye(3) - 0.8 * avg, mdp.R), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_value_agrees_with_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 2, 0.9)
    pi = rng.integers(2, size=4)
    mean, se = monte_carlo_value(mdp, pi, 0, 10_000, rng)
    assert abs(mean - policy_value(mdp, pi)[0]) < 3 * se


def test_bound_with_exact_model():
    mdp = random_mdp(np.random.default_rng(1), 5, 2, 0.95)
    lhs, rhs, ok = check_value_bound(mdp, mdp.P, [0] * 5)
    assert (lhs, rhs, ok) == (0.0, 0.0, True)


def test_bound_with_zero_discount():
    rng = np.random.default_rng(2)
    mdp = random_mdp(rng, 5, 2, 0.0)
    lhs, rhs, ok = check_value_bound(mdp, perturb(mdp.P, rng, 0.7), [1] * 5)
    assert lhs == 0.0 and rhs == 0.0 and ok


def test_bound_holds_on_random_cases():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        mdp = random_mdp(rng, n, 2, float(rng.choice([0.5, 0.9, 0.95])))
        lhs, rhs, ok = check_value_bound(mdp, perturb(mdp.P, rng, rng.uniform()), rng.integers(2, size=n))
        assert ok and lhs <= rhs + 1e-9


def test_bound_rejects_bad_model():
    mdp = random_mdp(np.random.default_rng(0), 2, 1, 0.5)
    with pytest.raises(ValueError):
        check_value_bound(mdp, np.full((2, 1, 2), 0.6), [0, 0])


def test_inf_norm_is_max_row_sum():
    assert inf_norm(np.array([[1.0, -2.0], [0.5, 0.5]])) == 3.0
    assert inf_norm(np.array([-4.0, 1.0])) == 4.0


def test_invalid_mdp_rejected():
    with pytest.raises(ValueError):
        FiniteMdp(np.full((2, 1, 2), 0.4), np.zeros(2), 0.9)
    with pytest.raises(ValueError):
        FiniteMdp(np.ones((1, 1, 1)), np.zeros(1), 1.0)


def test_oracle_single_decisive_sample():
    srcs = [LookupSource({1: 1.0}), LookupSource({1: 0.0})]
    gate = brute_force_gate(srcs, [Transition(0, 0, 0.0, 1, False)], 2)
    assert gate[0].tolist() == [1.0, 0.0]
    assert gate[1].tolist() == [0.5, 0.5]  # no data: prior


def test_oracle_two_samples():
    srcs = [LookupSource({1: 0.8, 2: 0.5}), LookupSource({1: 0.2, 2: 0.5})]
    data = [Transition(0, 0, 0.0, 1, False), Transition(0, 1, 0.0, 2, False)]
    np.testing.assert_allclose(brute_force_gate(srcs, data, 1)[0], [0.8, 0.2], atol=1e-15)


def test_oracle_skips_zero_evidence():
    post = bayes_product([np.array([0.0, 0.0]), np.array([0.3, 0.1])], 2)
    np.testing.assert_allclose(post, [0.75, 0.25], atol=1e-15)


def test_central_differences_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    (g,) = central_differences(lambda: float((x ** 2).sum() + x[0] * x[1]), [x])
    np.testing.assert_allclose(g, [2 * 1.0 - 2.0, 2 * -2.0 + 1.0, 1.0], atol=1e-8)
    assert x.tolist() == [1.0, -2.0, 0.5]


def test_relative_error_floor():
    assert max_relative_error([np.array([1e-12])], [np.array([0.0])], floor=1e-8) == pytest.approx(1e-4)
