import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxfer.core import (InsufficientSamples, ReplayBuffer, Transition, grid_one_hot, one_hot,
                         spawn_streams)


def tr(k):
    return Transition(k, k % 4, float(k), k + 1, False)


def test_push_counts():
    buf = ReplayBuffer(2)
    buf.push(tr(1))
    assert len(buf) == 1


def test_fifo_eviction_keeps_newest():
    buf = ReplayBuffer(2)
    for k in (1, 2, 3):
        buf.push(tr(k))
    assert [t.s for t in buf] == [2, 3]


@given(st.integers(1, 20), st.integers(0, 60))
@settings(max_examples=50, deadline=None)
def test_buffer_holds_last_capacity_items(capacity, pushes):
    buf = ReplayBuffer(capacity)
    for k in range(pushes):
        buf.push(tr(k))
    assert [t.s for t in buf] == list(range(max(0, pushes - capacity), pushes))


def test_single_element_sample():
    buf = ReplayBuffer(5)
    buf.push(tr(7))
    (t,) = buf.sample_batch(1)
    assert t == tr(7)


def test_sampling_is_deterministic_per_seed():
    def draws(seed):
        buf = ReplayBuffer(50, rng_seed=seed)
        for k in range(50):
            buf.push(tr(k))
        return [[t.s for t in buf.sample_batch(32)] for _ in range(3)]

    assert draws(3) == draws(3)
    assert draws(3) != draws(4)


def test_underfull_sample_raises():
    buf = ReplayBuffer(10)
    buf.push(tr(0))
    with pytest.raises(InsufficientSamples) as err:
        buf.sample_batch(2)
    assert err.value.code == "insufficient-samples"


def test_sampling_is_with_replacement():
    buf = ReplayBuffer(3, rng_seed=0)
    for k in range(3):
        buf.push(tr(k))
    draws = np.array([buf.sample_indices(3) for _ in range(100)])
    assert set(draws.ravel().tolist()) == {0, 1, 2}
    assert any(len(set(row)) < 3 for row in draws.tolist())


def test_vector_states_and_extra_columns():
    buf = ReplayBuffer(4, state_shape=(2,))
    buf.add_column("ll", (3,))
    buf.push(Transition(np.array([1.0, 2.0]), 1, 0.5, np.array([3.0, 4.0]), True, 2),
             ll=np.array([0.0, -1.0, -np.inf]))
    batch = buf.gather(np.array([0]))
    assert batch.s.tolist() == [[1.0, 2.0]]
    assert batch.terminal[0] and batch.a_next[0] == 2
    assert buf.column("ll", np.array([0]))[0, 2] == -np.inf


def test_one_hot_encodings():
    assert one_hot(2, 4).tolist() == [0, 0, 1, 0]
    v = grid_one_hot(13, width=5, height=4)  # row 2, col 3
    assert v.tolist() == [0, 0, 0, 1, 0, 0, 0, 1, 0]
    assert grid_one_hot(np.array([13, 0]), 5, 4).shape == (2, 9)


def test_streams_are_independent_and_reproducible():
    a, b = spawn_streams(11), spawn_streams(11)
    assert a["env"].random() == b["env"].random()
    assert spawn_streams(11)["env"].random() != spawn_streams(11)["agent"].random()
