import numpy as np
import pytest

from dsupt import tensor as T
from dsupt.tensor import Tensor, finite_diff_check

TOL = 1e-6


def weighted(fn, shape_out, seed=7):
    """Reduce ``fn``'s output to a scalar with fixed random weights."""
    w = np.random.default_rng(seed).standard_normal(shape_out)
    return lambda x: T.tsum(fn(x) * w)


def away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def test_add_broadcast_bias(rng):
    b = rng.standard_normal(4)
    x0 = rng.standard_normal((3, 4))
    assert finite_diff_check(weighted(lambda x: x + Tensor(b), (3, 4)), x0) < TOL
    assert finite_diff_check(weighted(lambda v: Tensor(x0) + v, (3, 4)), b) < TOL


def test_mul_and_neg(rng):
    a = rng.standard_normal((2, 5))
    x0 = rng.standard_normal((2, 5))
    assert finite_diff_check(weighted(lambda x: x * Tensor(a), (2, 5)), x0) < TOL
    assert finite_diff_check(weighted(lambda x: x * x - x, (2, 5)), x0) < TOL
    assert finite_diff_check(weighted(lambda v: Tensor(a) * v, (2, 5)), rng.standard_normal(5)) < TOL


@pytest.mark.parametrize("op", [T.exp, T.tanh, T.relu])
def test_elementwise(op, rng):
    x0 = away_from_zero(rng, (3, 4))
    assert finite_diff_check(weighted(op, (3, 4)), x0) < TOL


def test_log(rng):
    x0 = rng.uniform(0.5, 2.0, (3, 4))
    assert finite_diff_check(weighted(T.log, (3, 4)), x0) < TOL


@pytest.mark.parametrize("axis", [None, 0, 1])
def test_sum_and_mean(axis, rng):
    x0 = rng.standard_normal((3, 4))
    out = np.sum(x0, axis=axis).shape
    assert finite_diff_check(weighted(lambda x: T.tsum(x, axis), out), x0) < TOL
    assert finite_diff_check(weighted(lambda x: T.mean(x, axis), out), x0) < TOL


def test_reshape_transpose_getitem_concat(rng):
    x0 = rng.standard_normal((2, 3, 4))
    assert finite_diff_check(weighted(lambda x: T.reshape(x, (6, 4)), (6, 4)), x0) < TOL
    assert finite_diff_check(weighted(lambda x: T.transpose(x, (2, 0, 1)), (4, 2, 3)), x0) < TOL
    assert finite_diff_check(weighted(lambda x: x[:, 1:, ::2], (2, 2, 2)), x0) < TOL
    other = Tensor(rng.standard_normal((2, 1, 4)))
    assert finite_diff_check(weighted(lambda x: T.concat([x, other, x], axis=1), (2, 7, 4)), x0) < TOL


@pytest.mark.parametrize("shapes", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)),
                                    ((2, 3, 4), (2, 4, 5)), ((4,), (4, 5)), ((4,), (4,))])
def test_matmul(shapes, rng):
    sa, sb = shapes
    a0, b0 = rng.standard_normal(sa), rng.standard_normal(sb)
    out = (a0 @ b0).shape
    assert finite_diff_check(weighted(lambda a: a @ Tensor(b0), out), a0) < TOL
    assert finite_diff_check(weighted(lambda b: Tensor(a0) @ b, out), b0) < TOL


def test_softmax_family(rng):
    x0 = rng.standard_normal((3, 5))
    assert finite_diff_check(weighted(T.log_softmax, (3, 5)), x0) < TOL
    assert finite_diff_check(weighted(T.softmax, (3, 5)), x0) < TOL
    assert finite_diff_check(weighted(lambda x: T.softmax(x, axis=0), (3, 5)), x0) < TOL


def test_log_softmax_matches_log_of_softmax(rng):
    x = Tensor(rng.standard_normal((4, 6)) * 5)
    np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-12)


def test_layer_norm(rng):
    x0 = rng.standard_normal((2, 3, 6))
    g0, b0 = rng.standard_normal(6), rng.standard_normal(6)
    assert finite_diff_check(weighted(lambda x: T.layer_norm(x, Tensor(g0), Tensor(b0)), x0.shape), x0) < TOL
    assert finite_diff_check(weighted(lambda g: T.layer_norm(Tensor(x0), g, Tensor(b0)), x0.shape), g0) < TOL
    assert finite_diff_check(weighted(lambda b: T.layer_norm(Tensor(x0), Tensor(g0), b), x0.shape), b0) < TOL


def test_embedding_and_pick(rng):
    table = rng.standard_normal((5, 3))
    ids = np.array([[0, 4, 4], [2, 1, 0]])
    assert finite_diff_check(weighted(lambda w: T.embedding(w, ids), (2, 3, 3)), table) < TOL
    x0 = rng.standard_normal((2, 3, 5))
    assert finite_diff_check(weighted(lambda x: T.pick(x, ids), (2, 3)), x0) < TOL


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0), (3, 2)])
def test_conv1d(stride, padding, rng):
    x0 = rng.standard_normal((2, 9, 3))
    w0 = rng.standard_normal((4, 3, 3))
    b0 = rng.standard_normal(4)
    out = T.conv1d(Tensor(x0), Tensor(w0), Tensor(b0), stride, padding).shape
    assert finite_diff_check(weighted(lambda x: T.conv1d(x, Tensor(w0), Tensor(b0), stride, padding), out), x0) < TOL
    assert finite_diff_check(weighted(lambda w: T.conv1d(Tensor(x0), w, Tensor(b0), stride, padding), out), w0) < TOL
    assert finite_diff_check(weighted(lambda b: T.conv1d(Tensor(x0), Tensor(w0), b, stride, padding), out), b0) < TOL


def test_conv1d_matches_direct_loop(rng):
    x = rng.standard_normal((7, 2))
    w = rng.standard_normal((3, 2, 3))
    b = rng.standard_normal(3)
    out = T.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((1, 1), (0, 0)))
    expect = np.array([[b[o] + sum(w[o, c, j] * xp[2 * t + j, c] for c in range(2) for j in range(3))
                        for o in range(3)] for t in range(out.shape[0])])
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_masked_fill_and_dropout(rng):
    x0 = rng.standard_normal((3, 4))
    mask = rng.random((3, 4)) < 0.3
    assert finite_diff_check(weighted(lambda x: T.masked_fill(x, mask, -3.0), (3, 4)), x0) < TOL
    keep_rng_state = np.random.default_rng(5)
    fixed = (keep_rng_state.random((3, 4)) >= 0.5) / 0.5
    out = T.dropout(Tensor(x0), 0.5, np.random.default_rng(5)).data
    np.testing.assert_array_equal(out, x0 * fixed)
    np.testing.assert_array_equal(T.dropout(Tensor(x0), 0.5, None).data, x0)


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="x")
    table = T.backward(T.tsum(x * x + x))
    np.testing.assert_array_equal(table["x"], np.array([3.0, 5.0]))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.tsum(x * 2.0)
    assert not y.requires_grad
    assert T.grad_enabled()


def test_backward_rejects_bad_losses():
    with pytest.raises(ValueError):
        T.backward(Tensor(np.ones(3), requires_grad=True) * 1.0)
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        T.backward(T.tsum(T.log(Tensor(np.zeros(1), requires_grad=True))))


def test_shape_errors():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.ones((3, 2))), [3])
