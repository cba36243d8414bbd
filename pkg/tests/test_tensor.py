import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microtune import tensor as T
from microtune.errors import ContractError, ShapeError, VocabError
from microtune.tensor import IGNORE_INDEX, Tensor, backward


def test_matmul_forward_2x2():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    out = T.matmul(a, b)
    np.testing.assert_allclose(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_backward_ones_upstream():
    # oracle: dA = G @ B.T, dB = A.T @ G with G = ones
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    backward(T.tsum(T.matmul(a, b)))
    np.testing.assert_allclose(a.grad, [[11.0, 15.0], [11.0, 15.0]])
    np.testing.assert_allclose(b.grad, [[4.0, 4.0], [6.0, 6.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(e.value)


def test_softmax_uniform_rows():
    out = T.softmax_rows(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_softmax_large_logits_finite():
    out = T.softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        # bounded spread: beyond ~|37| the smallest ratio underflows the ulp
        # around 1.0 and the largest entry rounds to exactly 1.0
        st.lists(st.floats(min_value=-15, max_value=15), min_size=2, max_size=8),
        min_size=1,
        max_size=6,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_softmax_rows_sum_to_one(rows):
    y = T.softmax_rows(Tensor(rows)).data
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(len(rows)), atol=1e-12)
    assert ((y > 0) & (y < 1)).all()


def test_cross_entropy_uniform_is_log_vocab():
    logits = Tensor(np.zeros((3, 4)))
    loss = T.cross_entropy_masked(logits, [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_cross_entropy_ignored_positions_zero_loss_and_grad():
    logits = Tensor(np.random.default_rng(0).normal(size=(4, 5)), requires_grad=True)
    loss = T.cross_entropy_masked(logits, [IGNORE_INDEX] * 4)
    assert loss.item() == 0.0
    backward(loss)
    assert logits.grad is None  # constant output: nothing flows


def test_cross_entropy_partial_mask_zero_grad_rows():
    logits = Tensor(np.random.default_rng(1).normal(size=(4, 5)), requires_grad=True)
    loss = T.cross_entropy_masked(logits, [2, IGNORE_INDEX, 1, IGNORE_INDEX])
    backward(loss)
    assert np.all(logits.grad[1] == 0.0)
    assert np.all(logits.grad[3] == 0.0)
    assert np.any(logits.grad[0] != 0.0)


def test_cross_entropy_out_of_range_label_names_position():
    logits = Tensor(np.zeros((3, 4)))
    with pytest.raises(VocabError) as e:
        T.cross_entropy_masked(logits, [0, 7, 1])
    msg = str(e.value)
    assert "7" in msg and "position 1" in msg


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=2, max_value=9),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=10_000),
)
def test_cross_entropy_nonnegative(v, t, seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(scale=3.0, size=(t, v)))
    labels = rng.integers(0, v, size=t).tolist()
    assert T.cross_entropy_masked(logits, labels).item() >= 0.0


def test_backward_accumulates_across_uses():
    x = Tensor([2.0], requires_grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 5
    backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_twice_accumulates_additively():
    x = Tensor([3.0], requires_grad=True)
    backward(T.tsum(T.mul(x, x)))
    backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [12.0])  # 6 + 6


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(T.mul(x, x))


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        loss = T.tsum(T.silu(T.matmul(a, b)))
        backward(loss)
        return a.grad.copy(), b.grad.copy()

    ga1, gb1 = run()
    ga2, gb2 = run()
    assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


def test_finite_difference_square_at_three():
    x = Tensor([3.0], requires_grad=True)
    err = T.finite_difference_check(lambda t: T.tsum(T.mul(t, t)), x)
    assert err <= 1e-6  # analytic gradient is 6


def test_no_graph_recorded_without_requires_grad():
    a = Tensor(np.ones((3, 3)))
    b = Tensor(np.ones((3, 3)))
    out = T.matmul(a, b)
    assert out._parents == () and not out.requires_grad


def test_log_probs_of_matches_manual():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 6))
    ids = [5, 0, 2, 2]
    out = T.log_probs_of(Tensor(logits), ids)
    manual = np.array(
        [logits[t, i] - np.log(np.exp(logits[t]).sum()) for t, i in enumerate(ids)]
    )
    np.testing.assert_allclose(out.data, manual, atol=1e-12)


def test_embedding_gather_scatter_adds():
    table = Tensor(np.zeros((5, 3)), requires_grad=True)
    out = T.embedding_gather(table, [1, 1, 4])
    backward(T.tsum(out))
    np.testing.assert_allclose(table.grad[1], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(table.grad[4], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(table.grad[0], [0.0, 0.0, 0.0])


def test_repeat_heads_grad_sums_groups():
    x = Tensor(np.arange(4.0).reshape(2, 2, 1), requires_grad=True)
    y = T.repeat_heads(x, 3)
    assert y.shape == (6, 2, 1)
    backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, np.full((2, 2, 1), 3.0))


def test_minimum_tie_routes_to_first():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([1.0], requires_grad=True)
    backward(T.tsum(T.minimum(a, b)))
    np.testing.assert_allclose(a.grad, [1.0])
    np.testing.assert_allclose(b.grad, [0.0])
