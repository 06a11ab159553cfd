"""Training objectives: label-smoothed MLE, CTC, and their interpolations.

Batch reduction is a mean over utterances for both terms.  Each utterance's
MLE term is its token-mean, each CTC term its negative log-likelihood divided
by the label length, so the interpolation weight does not depend on sequence
lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

BLANK = 0


class CtcError(ValueError):
    """Raised for CTC targets that no alignment can produce."""


@dataclass
class LossWeights:
    lambda_alpha: float = 0.3
    lambda_beta: float = 0.3
    label_smoothing_eps: float = 0.1

    def __post_init__(self):
        for name in ("lambda_alpha", "lambda_beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing_eps < 1.0:
            raise ValueError("label_smoothing_eps must lie in [0, 1)")


@dataclass
class CtcTarget:
    labels: np.ndarray
    blank_id: int = BLANK

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size < 1:
            raise CtcError("CTC target must be a non-empty label sequence")
        if np.any(self.labels == self.blank_id):
            raise CtcError("CTC target contains the blank symbol")


@dataclass
class SeqTarget:
    """Targets for one batch.

    ``tokens`` holds decoder output ids (B, L) padded with 0; ``ctc_labels``
    the per-utterance CTC label ids (blank = 0 excluded); ``ctc_vocab`` the
    size of the CTC table including blank.
    """
    tokens: np.ndarray
    ctc_labels: Sequence[np.ndarray] | None = None
    ctc_vocab: int = 0


def min_ctc_frames(labels) -> int:
    """Shortest input admitting ``labels``: one frame per label plus a
    separating blank between adjacent repeats."""
    labels = np.asarray(labels)
    return int(labels.size + np.count_nonzero(labels[1:] == labels[:-1]))


# -- label-smoothed cross-entropy ----------------------------------------------

def label_smoothed_nll(logits: Tensor, targets, eps: float = 0.1, pad_mask=None) -> Tensor:
    """Mean over unmasked positions of ``(1-eps)*NLL(target) + eps*mean_c NLL(c)``.

    ``logits`` is (L, V) or (B, L, V).  For batches the mean is taken per
    utterance first and then over utterances.  ``pad_mask`` marks positions to
    ignore (True = padding).
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing eps must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ValueError("target id outside the output vocabulary")
    lp = T.log_softmax(logits)
    per_token = T.pick(lp, targets) * -(1.0 - eps)
    if eps > 0.0:
        per_token = per_token + T.mean(lp, axis=-1) * -eps
    valid = np.ones(targets.shape) if pad_mask is None else (~np.asarray(pad_mask, bool)).astype(float)
    if targets.ndim == 1:
        weights = valid / max(valid.sum(), 1.0)
    else:
        counts = valid.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise ValueError("an utterance has no unmasked target positions")
        weights = valid / counts / targets.shape[0]
    return T.tsum(per_token * weights)


# -- CTC ---------------------------------------------------------------------------

def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    out[:, k:] = a[:, :-k]
    return out


def _unshift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    out[:, :-k] = a[:, k:]
    return out


def ctc_nll(log_probs: Tensor, input_lengths, labels: Sequence, blank: int = BLANK) -> Tensor:
    """Per-utterance CTC negative log-likelihood, shape (B,).

    ``log_probs`` is (B, T, C) with valid log-distributions in each row; only
    the first ``input_lengths[b]`` frames of utterance ``b`` are used.
    Forward and backward variables are computed in log space over the
    blank-interleaved label sequence; the gradient is the negative state
    occupancy scattered onto the label classes.
    """
    lp = log_probs.data
    bsz, t_max, n_class = lp.shape
    in_len = np.asarray(input_lengths, dtype=np.int64).reshape(-1)
    if in_len.shape[0] != bsz or len(labels) != bsz:
        raise ValueError("batch sizes of log_probs, input_lengths and labels differ")
    if in_len.max() > t_max or in_len.min() < 1:
        raise ValueError("input lengths must lie in [1, T]")
    targets = [CtcTarget(y, blank).labels for y in labels]
    for b, y in enumerate(targets):
        if y.max() >= n_class:
            raise CtcError(f"label id {int(y.max())} outside CTC vocabulary of {n_class}")
        need = min_ctc_frames(y)
        if need > in_len[b]:
            raise CtcError(f"utterance {b}: target needs {need} frames, input has {in_len[b]}")

    lab_len = np.array([y.size for y in targets])
    s_len = 2 * lab_len + 1
    s_max = int(s_len.max())
    ext = np.full((bsz, s_max), blank, dtype=np.int64)
    for b, y in enumerate(targets):
        ext[b, 1:2 * y.size:2] = y
    valid_state = np.arange(s_max)[None, :] < s_len[:, None]
    skip = np.zeros((bsz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (bsz, t_max, s_max)), axis=2)
    emit = np.where(valid_state[:, None, :], emit, -np.inf)

    alpha = np.full((t_max, bsz, s_max), -np.inf)
    alpha[0, :, 0] = emit[:, 0, 0]
    alpha[0, :, 1] = emit[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        acc = np.where(skip, np.logaddexp(acc, _shift(prev, 2)), acc)
        alpha[t] = acc + emit[:, t, :]

    rows = np.arange(bsz)
    last = alpha[in_len - 1, rows]
    log_like = np.logaddexp(last[rows, s_len - 1], last[rows, s_len - 2])

    beta = np.full((t_max, bsz, s_max), -np.inf)
    init = np.full((bsz, s_max), -np.inf)
    init[rows, s_len - 1] = 0.0
    init[rows, s_len - 2] = 0.0
    skip_next = np.zeros_like(skip)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(t_max - 1, -1, -1):
        if t == t_max - 1:
            rec = np.full((bsz, s_max), -np.inf)
        else:
            nxt = beta[t + 1] + emit[:, t + 1, :]
            rec = np.logaddexp(nxt, _unshift(nxt, 1))
            rec = np.where(skip_next, np.logaddexp(rec, _unshift(nxt, 2)), rec)
        at_end = (t == in_len - 1)[:, None]
        past = (t > in_len - 1)[:, None]
        beta[t] = np.where(at_end, init, np.where(past, -np.inf, rec))

    with np.errstate(invalid="ignore"):
        occupancy = np.exp(alpha + beta - log_like[None, :, None])
    occupancy = np.nan_to_num(occupancy, nan=0.0)
    occ = np.zeros((bsz, t_max, n_class))
    b_idx = np.broadcast_to(rows[None, :, None], occupancy.shape)
    t_idx = np.broadcast_to(np.arange(t_max)[:, None, None], occupancy.shape)
    c_idx = np.broadcast_to(ext[None, :, :], occupancy.shape)
    np.add.at(occ, (b_idx.ravel(), t_idx.ravel(), c_idx.ravel()), occupancy.ravel())

    def rule(g):
        return (-g[:, None, None] * occ,)

    return T._result(-log_like, (log_probs,), rule)


def ctc_loss(log_probs: Tensor, target, blank: int = BLANK) -> Tensor:
    """Negative log-likelihood of one label sequence under CTC.

    ``log_probs`` is (T', V+1); ``target`` a :class:`CtcTarget` or a label
    sequence.  Raises :class:`CtcError` when the target cannot be aligned.
    """
    labels = target.labels if isinstance(target, CtcTarget) else target
    if isinstance(target, CtcTarget):
        blank = target.blank_id
    steps = log_probs.shape[0]
    batched = T.reshape(log_probs, (1,) + log_probs.shape)
    return T.reshape(ctc_nll(batched, [steps], [labels], blank), ())


def ctc_batch_loss(ctc_logits: Tensor, lengths, labels: Sequence) -> Tensor:
    """Mean over utterances of the length-normalised CTC NLL."""
    nll = ctc_nll(T.log_softmax(ctc_logits), lengths, labels)
    norm = np.array([1.0 / max(len(y), 1) for y in labels]) / len(labels)
    return T.tsum(nll * norm)


# -- stage objectives --------------------------------------------------------------

def _mle(dec_logits: Tensor, target: SeqTarget, eps: float) -> Tensor:
    tokens = np.asarray(target.tokens)
    return label_smoothed_nll(dec_logits, tokens, eps, pad_mask=tokens == 0)


def _ctc(ctc_logits: Tensor, ctc_lengths, target: SeqTarget) -> Tensor:
    if ctc_logits is None or target.ctc_labels is None:
        raise ValueError("CTC term requested without CTC logits or labels")
    if ctc_logits.shape[-1] != target.ctc_vocab:
        raise ValueError(f"CTC logits cover {ctc_logits.shape[-1]} classes, target vocabulary "
                         f"needs {target.ctc_vocab}")
    if ctc_logits.ndim == 2:
        ctc_logits = T.reshape(ctc_logits, (1,) + ctc_logits.shape)
    if ctc_lengths is None:
        ctc_lengths = np.full(ctc_logits.shape[0], ctc_logits.shape[1])
    return ctc_batch_loss(ctc_logits, ctc_lengths, target.ctc_labels)


def interpolated_loss(dec_logits, ctc_logits, target: SeqTarget, lam: float, eps: float,
                      ctc_lengths=None) -> tuple[Tensor, dict[str, float]]:
    """``(1-lam)*MLE + lam*CTC``; a term with zero weight is not evaluated."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    parts: dict[str, float] = {}
    total = None
    if lam < 1.0:
        mle = _mle(dec_logits, target, eps)
        parts["mle"] = mle.item()
        total = mle * (1.0 - lam) if lam > 0.0 else mle
    if lam > 0.0:
        ctc = _ctc(ctc_logits, ctc_lengths, target)
        parts["ctc"] = ctc.item()
        term = ctc * lam if lam < 1.0 else ctc
        total = term if total is None else total + term
    return total, parts


def loss_fbk2dsu(dec_logits, ctc_logits, dsu_target: SeqTarget, weights: LossWeights,
                 ctc_lengths=None) -> Tensor:
    """Filterbank-to-unit objective: MLE on units interpolated with CTC on
    the blank-extended unit sequence."""
    return interpolated_loss(dec_logits, ctc_logits, dsu_target, weights.lambda_alpha,
                             weights.label_smoothing_eps, ctc_lengths)[0]


def loss_finetune(dec_logits, ctc_logits, translation_target: SeqTarget, weights: LossWeights,
                  ctc_lengths=None) -> Tensor:
    """Speech-translation finetuning objective with CTC over target tokens."""
    return interpolated_loss(dec_logits, ctc_logits, translation_target, weights.lambda_beta,
                             weights.label_smoothing_eps, ctc_lengths)[0]


def loss_dsu2trl(dec_logits, translation_target: SeqTarget, eps: float = 0.1) -> Tensor:
    return _mle(dec_logits, translation_target, eps)
