import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccm.autodiff import Tensor
from ccm.errors import QueueError
from ccm.queue import KnowledgeQueue, new_queue


def rows(*vals, d=2):
    return np.array([[v] * d for v in vals], dtype=float)


def test_capacity_formula():
    assert new_queue(32, 3, 16).capacity == 384
    assert new_queue(1, 1, 16).capacity == 4


@pytest.mark.parametrize("args", [(0, 3, 16), (4, 0, 16), (4, 3, 0), (-1, 2, 2)])
def test_non_positive_arguments(args):
    with pytest.raises(QueueError):
        new_queue(*args)


def test_rejects_wrong_width():
    q = new_queue(2, 2, 16)
    with pytest.raises(QueueError):
        q.push_batch(np.zeros((1, 15)), [0])


def test_fifo_eviction():
    q = KnowledgeQueue(4, 2)
    q.push_batch(rows(1, 2), [1, 2])
    q.push_batch(rows(3, 4), [3, 4])
    q.push_batch(rows(5, 6), [5, 6])
    z, y = q.snapshot()
    np.testing.assert_array_equal(z, rows(3, 4, 5, 6))
    assert y.tolist() == [3, 4, 5, 6]


def test_full_replacement():
    q = KnowledgeQueue(3, 2)
    q.push_batch(rows(1, 2, 3), [1, 2, 3])
    q.push_batch(rows(7, 8, 9), [7, 8, 9])
    assert q.snapshot()[1].tolist() == [7, 8, 9]


def test_oversize_and_mismatched_batches():
    q = KnowledgeQueue(3, 2)
    with pytest.raises(QueueError):
        q.push_batch(rows(1, 2, 3, 4), [1, 2, 3, 4])
    with pytest.raises(QueueError):
        q.push_batch(rows(1, 2), [1])


def test_snapshot_of_single_entry_and_copy_semantics():
    q = KnowledgeQueue(4, 3)
    q.push_batch(np.array([[1.0, 2.0, 3.0]]), [2])
    z, y = q.snapshot()
    np.testing.assert_array_equal(z, [[1.0, 2.0, 3.0]])
    q.push_batch(np.array([[9.0, 9.0, 9.0]]), [0])
    np.testing.assert_array_equal(z, [[1.0, 2.0, 3.0]])
    assert y.tolist() == [2]


def test_empty_snapshot_is_an_error():
    with pytest.raises(QueueError, match="not warmed"):
        KnowledgeQueue(4, 2).snapshot()


def test_stores_values_not_graph():
    q = KnowledgeQueue(4, 2)
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    q.push_batch(t, [0, 1])
    z, _ = q.snapshot()
    assert isinstance(z, np.ndarray)
    t.data[:] = 5.0
    np.testing.assert_array_equal(q.snapshot()[0], 1.0)


def test_warm_up_then_full_forever():
    q = new_queue(2, 2, 3)
    lens = []
    for i in range(10):
        q.push_batch(np.full((2, 3), i, dtype=float), [i % 3, (i + 1) % 3])
        lens.append(len(q))
    assert lens == [2, 4, 6, 8, 10, 12, 14, 16, 16, 16]


@settings(max_examples=300, deadline=None)
@given(
    capacity=st.integers(1, 12),
    sizes=st.lists(st.integers(1, 12), min_size=1, max_size=25),
    seed=st.integers(0, 2**16),
)
def test_matches_list_oracle(capacity, sizes, seed):
    rng = np.random.default_rng(seed)
    q = KnowledgeQueue(capacity, 2)
    ref = []
    for b in sizes:
        b = min(b, capacity)
        f = rng.standard_normal((b, 2))
        y = rng.integers(0, 5, size=b)
        q.push_batch(f, y)
        ref = (ref + [(tuple(r), int(l)) for r, l in zip(f, y)])[-capacity:]
        assert len(q) <= capacity
    z, yy = q.snapshot()
    assert [(tuple(r), int(l)) for r, l in zip(z, yy)] == ref
