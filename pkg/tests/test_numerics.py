import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odormix import numerics as nx
from odormix.checks import op_cases
from odormix.numerics import Tensor, parameter


def test_matmul_examples():
    X = np.arange(6.0).reshape(2, 3)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(X)).data, X)
    out = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])) @ Tensor(np.array([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_tight():
    rng = np.random.default_rng(1)
    a = parameter(rng.standard_normal((5, 4)))
    b = parameter(rng.standard_normal((4, 3)))
    c = rng.standard_normal((5, 3))
    errs = nx.grad_check(lambda: nx.tsum((a @ b) * c), [a, b])
    assert max(errs.values()) < 1e-6


def test_linear_model_grad_check_is_near_exact():
    rng = np.random.default_rng(2)
    w = parameter(rng.standard_normal((3, 4)))
    x = rng.standard_normal(4)
    errs = nx.grad_check(lambda: nx.tsum(w @ Tensor(x[:, None])), [w])
    assert errs["p0"] < 1e-9


def test_backward_linear_map():
    w = parameter(np.ones((2, 3)))
    x = np.array([[1.0], [2.0], [3.0]])
    (g,) = nx.backward(nx.tsum(w @ Tensor(x)), [w])
    assert np.array_equal(g, np.tile(x.T, (2, 1)))


def test_backward_zero_scaled_loss():
    w = parameter(np.random.default_rng(0).standard_normal((3, 3)))
    (g,) = nx.backward(nx.tsum(nx.sigmoid(w @ w)) * 0.0, [w])
    assert not g.any()


def test_backward_requires_scalar():
    w = parameter(np.ones(3))
    with pytest.raises(nx.NonScalarLoss):
        nx.backward(w * 2.0, [w])


def test_unreached_parameter_gets_zero_gradient():
    a, b = parameter(np.ones(2)), parameter(np.ones(3))
    ga, gb = nx.backward(nx.tsum(a), [a, b])
    assert np.array_equal(ga, [1.0, 1.0]) and np.array_equal(gb, np.zeros(3))


def test_softmax_examples():
    assert np.allclose(nx.softmax_rows(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    masked = nx.softmax_rows(Tensor(np.array([[3.0, -7.0]])), np.array([[True, False]]))
    assert np.array_equal(masked.data, [[1.0, 0.0]])
    big = nx.softmax_rows(Tensor(np.full((1, 3), 1000.0)))
    assert np.allclose(big.data, 1 / 3) and np.all(np.isfinite(big.data))


def test_softmax_all_masked_row_raises():
    with pytest.raises(nx.AllMaskedRow):
        nx.softmax_rows(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


def test_layer_norm_examples():
    one, zero = parameter(np.ones(3)), parameter(np.zeros(3))
    assert np.array_equal(nx.layer_norm(Tensor(np.full((1, 3), 4.2)), one, zero).data, np.zeros((1, 3)))
    out = nx.layer_norm(Tensor(np.array([[1.0, -1.0]])), parameter(np.ones(2)), parameter(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-10)


def test_attention_single_key_returns_projected_value():
    rng = np.random.default_rng(3)
    d = 4
    w = nx.AttentionWeights(*(parameter(rng.standard_normal((d, d))) for _ in range(4)))
    q = Tensor(rng.standard_normal((1, d)))
    kv = Tensor(rng.standard_normal((1, d)))
    out = nx.multi_head_attention(q, kv, kv, 2, None, w)
    assert np.allclose(out.data, kv.data @ w.wv.data @ w.wo.data)


def test_attention_permuting_keys_with_mask():
    rng = np.random.default_rng(4)
    d = 6
    w = nx.AttentionWeights(*(parameter(rng.standard_normal((d, d))) for _ in range(4)))
    q = Tensor(rng.standard_normal((1, d)))
    kv = rng.standard_normal((3, d))
    mask = np.array([True, False, True])
    perm = np.array([2, 0, 1])
    a = nx.multi_head_attention(q, Tensor(kv), Tensor(kv), 3, mask, w)
    b = nx.multi_head_attention(q, Tensor(kv[perm]), Tensor(kv[perm]), 3, mask[perm], w)
    assert np.allclose(a.data, b.data, atol=1e-12)


def test_attention_shape_errors():
    w = nx.AttentionWeights(*(parameter(np.eye(4)) for _ in range(4)))
    with pytest.raises(nx.ShapeMismatch):
        nx.multi_head_attention(Tensor(np.ones((1, 4))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), 3, None, w)
    with pytest.raises(nx.AllKeysMasked):
        nx.multi_head_attention(Tensor(np.ones((1, 4))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), 2,
                                np.array([False, False]), w)


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(11)
    for _ in range(3):
        fn, params = op_cases(rng)[name]
        assert max(nx.grad_check(fn, params).values()) < 1e-4


def test_corrupted_rule_is_detected():
    fn, params = op_cases(np.random.default_rng(0))["layer_norm"]
    with nx.corrupted("layer_norm"):
        assert max(nx.grad_check(fn, params).values()) > 1e-3
    assert max(nx.grad_check(fn, params).values()) < 1e-4


def test_numpy_array_on_the_left_defers_to_tensor():
    t = parameter(np.ones(3))
    out = np.array([1.0, 2.0, 3.0]) - t
    assert isinstance(out, Tensor)
    assert np.array_equal(out.data, [0.0, 1.0, 2.0])


def test_broadcast_add_gradient_sums_over_batch():
    b = parameter(np.zeros(3))
    x = Tensor(np.ones((4, 3)))
    (g,) = nx.backward(nx.tsum(x + b), [b])
    assert np.array_equal(g, [4.0, 4.0, 4.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(m, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, n)) * 30
    mask = rng.random((m, n)) < 0.6
    mask[:, 0] = True
    p = nx.softmax_rows(Tensor(x), mask).data
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(p[~mask] == 0.0)


def test_relative_error_definition():
    assert nx.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert nx.relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    assert nx.relative_error(np.zeros(2), np.zeros(2)) == 0.0
