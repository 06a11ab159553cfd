import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsupt import tensor as T
from dsupt.losses import (CtcError, CtcTarget, LossWeights, SeqTarget, ctc_batch_loss, ctc_loss,
                          ctc_nll, interpolated_loss, label_smoothed_nll, loss_dsu2trl,
                          loss_fbk2dsu, loss_finetune, min_ctc_frames)
from dsupt.tensor import Tensor, finite_diff_check

from oracles import ctc_brute_force, random_log_probs


# -- label smoothing ------------------------------------------------------------------------

@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_uniform_logits_give_log_v(eps):
    assert label_smoothed_nll(Tensor(np.zeros((3, 7))), [1, 2, 3], eps).item() == pytest.approx(math.log(7), abs=1e-12)


def test_eps_zero_is_cross_entropy(rng):
    z = rng.standard_normal((4, 5))
    y = np.array([0, 3, 2, 2])
    lp = z - np.log(np.exp(z).sum(1, keepdims=True))
    assert label_smoothed_nll(Tensor(z), y, 0.0).item() == pytest.approx(-lp[np.arange(4), y].mean(), abs=1e-12)


def test_hand_value_v3():
    # logits (2,0,0), target 0, eps 0.1
    z = 2.0 + math.log(1 + 2 * math.exp(-2.0))
    nll = [z - 2.0, z, z]
    expect = 0.9 * nll[0] + 0.1 * sum(nll) / 3
    assert label_smoothed_nll(Tensor([[2.0, 0.0, 0.0]]), [0], 0.1).item() == pytest.approx(expect, abs=1e-12)


def test_pad_mask_and_batch_mean(rng):
    z = rng.standard_normal((2, 3, 4))
    y = np.array([[1, 2, 0], [3, 0, 0]])
    mask = y == 0
    got = label_smoothed_nll(Tensor(z), y, 0.1, pad_mask=mask).item()
    a = label_smoothed_nll(Tensor(z[0, :2]), y[0, :2], 0.1).item()
    b = label_smoothed_nll(Tensor(z[1, :1]), y[1, :1], 0.1).item()
    assert got == pytest.approx((a + b) / 2, abs=1e-12)


def test_label_smoothing_errors():
    with pytest.raises(ValueError):
        label_smoothed_nll(Tensor(np.zeros((2, 3))), [0, 1], 1.0)
    with pytest.raises(ValueError):
        label_smoothed_nll(Tensor(np.zeros((2, 3))), [0, 3], 0.1)


def test_loss_weights_defaults_and_bounds():
    w = LossWeights()
    assert (w.lambda_alpha, w.lambda_beta, w.label_smoothing_eps) == (0.3, 0.3, 0.1)
    for bad in (dict(lambda_alpha=1.1), dict(lambda_beta=-0.1), dict(label_smoothing_eps=1.0)):
        with pytest.raises(ValueError):
            LossWeights(**bad)


# -- CTC --------------------------------------------------------------------------------------

def test_single_frame_single_symbol():
    assert ctc_loss(Tensor(np.log(np.full((1, 2), 0.5))), [1]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_two_frames_three_paths():
    assert ctc_loss(Tensor(np.log(np.full((2, 2), 0.5))), [1]).item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_ctc_target_validation():
    with pytest.raises(CtcError):
        CtcTarget([])
    with pytest.raises(CtcError):
        CtcTarget([1, 0, 2])
    assert ctc_loss(Tensor(random_log_probs(np.random.default_rng(0), 3, 3)), CtcTarget([1, 2])).item() > 0


def test_repeats_need_a_separating_blank(rng):
    lp = Tensor(random_log_probs(rng, 2, 3))
    assert min_ctc_frames([1, 1]) == 3
    with pytest.raises(CtcError):
        ctc_loss(lp, [1, 1])
    assert math.isfinite(ctc_loss(Tensor(random_log_probs(rng, 3, 3)), [1, 1]).item())
    with pytest.raises(CtcError):
        ctc_loss(Tensor(random_log_probs(rng, 2, 4)), [1, 2, 3])


@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_ctc_matches_brute_force(n_t, v, y_len, seed):
    rng = np.random.default_rng(seed)
    labels = list(rng.integers(1, v + 1, y_len)) or [1]
    if min_ctc_frames(labels) > n_t:
        return
    lp = random_log_probs(rng, n_t, v + 1)
    assert abs(ctc_loss(Tensor(lp), labels).item() - ctc_brute_force(lp, labels)) <= 1e-9


@given(st.integers(0, 2**31 - 1))
def test_ctc_permutation_covariance(seed):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, 6, 5)
    labels = list(rng.integers(1, 5, 3))
    perm = np.concatenate([[0], 1 + rng.permutation(4)])  # blank stays at 0
    relabeled = lp[:, np.argsort(perm)]
    mapped = [int(perm[x]) for x in labels]
    np.testing.assert_allclose(ctc_loss(Tensor(relabeled), mapped).item(),
                               ctc_loss(Tensor(lp), labels).item(), atol=1e-12)


def test_ctc_gradient(rng):
    for _ in range(5):
        labels = rng.integers(1, 5, 3)
        z0 = rng.standard_normal((8, 5))
        assert finite_diff_check(lambda z: ctc_loss(T.log_softmax(z), labels), z0) <= 1e-4


def test_batched_ctc_equals_per_utterance(rng):
    z = rng.standard_normal((3, 7, 5))
    lengths = [7, 5, 4]
    labels = [np.array([1, 2, 3]), np.array([4, 4]), np.array([2])]
    got = ctc_nll(T.log_softmax(Tensor(z)), lengths, labels).data
    for b in range(3):
        single = ctc_loss(T.log_softmax(Tensor(z[b, :lengths[b]])), labels[b]).item()
        assert got[b] == pytest.approx(single, abs=1e-12)
    norm = np.mean([got[b] / len(labels[b]) for b in range(3)])
    assert ctc_batch_loss(Tensor(z), lengths, labels).item() == pytest.approx(norm, abs=1e-12)


# -- interpolated objectives ------------------------------------------------------------------------

def _parts(rng):
    dec = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
    ctc = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    target = SeqTarget(np.array([[4, 5, 2], [5, 2, 0]]), [np.array([1, 2]), np.array([3])], 4)
    return dec, ctc, target


def test_interpolation_endpoints_and_linearity(rng):
    dec, ctc, target = _parts(rng)
    w0, w1 = LossWeights(lambda_alpha=0.0), LossWeights(lambda_alpha=1.0)
    mle = loss_fbk2dsu(dec, ctc, target, w0).item()
    ctc_v = loss_fbk2dsu(dec, ctc, target, w1).item()
    assert mle == loss_dsu2trl(dec, target).item()
    assert ctc_v == ctc_batch_loss(ctc, [5, 5], target.ctc_labels).item()
    for lam in (0.3, 0.7):
        got = loss_finetune(dec, ctc, target, LossWeights(lambda_beta=lam)).item()
        assert got == pytest.approx((1 - lam) * mle + lam * ctc_v, abs=1e-12)


def test_interpolation_arithmetic_example():
    # with MLE = 2.0 and CTC = 5.0 the weight 0.3 gives 2.9
    assert 0.7 * 2.0 + 0.3 * 5.0 == pytest.approx(2.9)
    dec = Tensor(np.zeros((1, 1, 4)))
    target = SeqTarget(np.array([[2]]))
    loss, parts = interpolated_loss(dec, None, target, 0.0, 0.0)
    assert parts == {"mle": pytest.approx(math.log(4))}


def test_gradient_of_interpolation_is_interpolated_gradient(rng):
    lam = 0.3
    grads = []
    for weight in (0.0, 1.0, lam):
        dec, ctc, target = _parts(np.random.default_rng(3))
        T.backward(interpolated_loss(dec, ctc, target, weight, 0.1)[0])
        grads.append((np.zeros_like(dec.data) if dec.grad is None else dec.grad,
                      np.zeros_like(ctc.data) if ctc.grad is None else ctc.grad))
    (dm, cm), (dc, cc), (di, ci) = grads
    np.testing.assert_allclose(di, (1 - lam) * dm + lam * dc, atol=1e-12)
    np.testing.assert_allclose(ci, (1 - lam) * cm + lam * cc, atol=1e-12)


def test_vocabulary_mismatch_is_an_error(rng):
    dec, ctc, target = _parts(rng)
    target.ctc_vocab = 7
    with pytest.raises(ValueError):
        loss_fbk2dsu(dec, ctc, target, LossWeights())
    with pytest.raises(ValueError):
        interpolated_loss(dec, None, target, 0.3, 0.1)


def test_dsu2trl_golden_value():
    rng = np.random.default_rng(2024)
    dec = Tensor(rng.standard_normal((3, 4, 10)))
    tokens = np.array([[5, 6, 7, 2], [8, 2, 0, 0], [4, 4, 2, 0]])
    value = loss_dsu2trl(dec, SeqTarget(tokens))
    manual = []
    for b in range(3):
        n = int((tokens[b] != 0).sum())
        manual.append(label_smoothed_nll(Tensor(dec.data[b, :n]), tokens[b, :n], 0.1).item())
    assert value.item() == pytest.approx(np.mean(manual), abs=1e-12)
    assert value.item() == pytest.approx(GOLDEN_DSU2TRL, abs=1e-12)


# recorded once from the per-utterance oracle above
GOLDEN_DSU2TRL = 3.3464946211104944
