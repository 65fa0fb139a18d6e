import numpy as np
import pytest

from ctxfer.agents import DqnAgent, QTable, dqn_train_step, epsilon_greedy, evaluate_greedy, q_update
from ctxfer.bench import ExperimentConfig, run_trial
from ctxfer.core import ReplayBuffer, Transition
from ctxfer.envs import make_env


def test_terminal_update_with_unit_rate():
    q = QTable(2, 2, lr=1.0)
    q_update(q, Transition(0, 1, 1.0, 1, True))
    assert q.q[0, 1] == 1.0


def test_zero_rate_changes_nothing():
    q = QTable(2, 2, lr=0.0)
    q.q[:] = [[0.1, 0.2], [0.3, 0.4]]
    q_update(q, Transition(0, 0, 5.0, 1, False))
    assert q.q.tolist() == [[0.1, 0.2], [0.3, 0.4]]


def test_bootstrap_uses_max_then_given_action():
    q = QTable(2, 2, lr=0.5, gamma=0.9)
    q.q[1] = [2.0, -1.0]
    q_update(q, Transition(0, 0, 0.0, 1, False))
    assert q.q[0, 0] == pytest.approx(0.5 * 0.9 * 2.0)
    q.q[0, 0] = 0.0
    q_update(q, Transition(0, 0, 0.0, 1, False), r=1.0, bootstrap_action=1)
    assert q.q[0, 0] == pytest.approx(0.5 * (1.0 - 0.9))


def test_default_rates():
    cfg = ExperimentConfig.for_env("maze")
    assert cfg.learner_lr() == 0.8
    assert ExperimentConfig.for_env("maze", strategy="mars").learner_lr() == 0.08
    assert cfg.eps_start == cfg.eps_min == 0.12


def test_cartpole_exploration_schedule():
    cfg = ExperimentConfig.for_env("cartpole")
    assert cfg.epsilon(1) == 1.0
    assert cfg.epsilon(2) == pytest.approx(0.99)
    assert cfg.epsilon(10_000) == 0.01


def test_full_exploration_is_uniform():
    q = QTable(1, 4)
    q.q[0] = [0.0, 9.0, 0.0, 0.0]
    rng = np.random.default_rng(0)
    counts = np.bincount([epsilon_greedy(q, 0, 1.0, rng) for _ in range(8000)], minlength=4)
    assert np.abs(counts / 8000 - 0.25).max() < 0.02


def test_no_exploration_is_argmax_with_low_ties():
    q = QTable(2, 3)
    q.q[0] = [0.1, 0.7, 0.2]
    q.q[1] = [0.5, 0.5, 0.1]
    rng = np.random.default_rng(0)
    assert epsilon_greedy(q, 0, 0.0, rng) == 1
    assert epsilon_greedy(q, 1, 0.0, rng) == 0


def _agent(**kw):
    kw.setdefault("rng", np.random.default_rng(0))
    return DqnAgent((2, 8, 2), **kw)


def test_underfull_buffer_is_a_noop():
    agent = _agent(batch_size=4)
    agent.buffer.push(Transition(np.zeros(2), 0, 0.0, np.zeros(2), True))
    before = agent.online.get_flat()
    assert dqn_train_step(agent) is None
    np.testing.assert_array_equal(agent.online.get_flat(), before)


def test_consistent_values_have_zero_loss():
    agent = _agent(batch_size=4)
    for p in agent.online.params:
        p[...] = 0.0
    agent.sync()
    for k in range(4):
        agent.buffer.push(Transition(np.full(2, k), k % 2, 0.0, np.full(2, k + 1.0), False))
    assert dqn_train_step(agent) == 0.0


def test_target_syncs_after_exactly_500_batches():
    rng = np.random.default_rng(1)
    agent = _agent(batch_size=8, sync_every=500, capacity=64)
    for _ in range(64):
        agent.buffer.push(Transition(rng.normal(size=2), int(rng.integers(2)), float(rng.normal()),
                                     rng.normal(size=2), bool(rng.random() < 0.1)))
    start = agent.target.get_flat()
    for k in range(499):
        dqn_train_step(agent)
    np.testing.assert_array_equal(agent.target.get_flat(), start)
    assert not np.array_equal(agent.online.get_flat(), start)
    dqn_train_step(agent)
    np.testing.assert_array_equal(agent.target.get_flat(), agent.online.get_flat())
    dqn_train_step(agent)
    assert not np.array_equal(agent.target.get_flat(), agent.online.get_flat())


def test_l2_penalty_setting():
    assert _agent(l2=1e-6).online.l2 == 1e-6
    assert ExperimentConfig.for_env("cartpole").dqn_l2 == 1e-6


def test_bias_tuple_changes_the_bootstrap():
    def make():
        agent = _agent(batch_size=2, buffer=ReplayBuffer(2, (2,), rng_seed=0))
        for k in range(2):
            agent.buffer.push(Transition(np.full(2, k), 0, 0.0, np.ones(2), False))
        return agent

    plain, biased = make(), make()
    loss_plain = dqn_train_step(plain)
    loss_zero = dqn_train_step(biased, lambda b, idx: (b.r, np.zeros((len(b.r), 2))))
    assert loss_plain == loss_zero
    np.testing.assert_array_equal(plain.online.get_flat(), biased.online.get_flat())
    # a constant bias k shifts every target by gamma * k
    shifted = make()
    seen = []

    def bias(b, idx):
        seen.append(b.s.copy())
        return b.r, np.full((len(b.r), 2), 2.0)

    q_next = shifted.target.predict(np.ones((2, 2))).max(axis=1)
    q_all = shifted.online.predict(np.array([[0.0, 0.0], [1.0, 1.0]]))[:, 0]
    got = dqn_train_step(shifted, bias)
    q = q_all[seen[0][:, 0].astype(int)]
    want = float(np.mean((q - shifted.gamma * (q_next + 2.0)) ** 2))
    assert got == pytest.approx(want, rel=1e-12)


def test_greedy_evaluation_counts_steps():
    env = make_env("maze-2room")
    lengths = evaluate_greedy(env, lambda s: 0, 2, np.random.default_rng(0))
    assert lengths == [300, 300]  # walking into the top wall never arrives


def test_tabular_learner_solves_two_room_maze():
    cfg = ExperimentConfig.for_env("maze-2room", steps=30_000)
    record = run_trial(cfg, 0)
    assert record.final_metric() == make_env("maze-2room").spec.shortest_path()

