"""Independent reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from dsupt import tensor as T
from dsupt.losses import SeqTarget, interpolated_loss
from dsupt.nn import build_model, desk_config
from dsupt.tensor import Tensor, finite_diff_check


def ctc_collapse(path, blank=0):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_brute_force(log_probs: np.ndarray, labels, blank=0) -> float:
    """-log of the summed probability of every alignment that collapses to
    ``labels``, by enumerating all C**T paths."""
    n_t, n_c = log_probs.shape
    target = tuple(int(x) for x in labels)
    scores = [sum(log_probs[t, s] for t, s in enumerate(path))
              for path in itertools.product(range(n_c), repeat=n_t)
              if ctc_collapse(path, blank) == target]
    if not scores:
        return math.inf
    m = max(scores)
    return -(m + math.log(sum(math.exp(s - m) for s in scores)))


def random_log_probs(rng, n_t, n_c, scale=2.0):
    z = rng.standard_normal((n_t, n_c)) * scale
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def tiny_model(role="scratch", seed=0, ctc_vocab=6, tgt_vocab=9, fbk_dim=5, d_model=8, **kw):
    cfg = desk_config(role, tgt_vocab, ctc_vocab=ctc_vocab, fbk_dim=fbk_dim, d_model=d_model,
                      enc_layers=2, dec_layers=2, ffn_enc=16, ffn_dec=12, heads=2, dropout=0.0, **kw)
    return build_model(cfg, seed)


def tiny_batch(rng, fbk_dim=5, tgt_vocab=9, ctc_vocab=6):
    lengths = np.array([13, 9])
    src = np.zeros((2, 13, fbk_dim))
    for i, n in enumerate(lengths):
        src[i, :n] = rng.standard_normal((n, fbk_dim))
    tgt = [rng.integers(4, tgt_vocab, 3), rng.integers(4, tgt_vocab, 2)]
    dec_in = np.zeros((2, 4), dtype=np.int64)
    dec_out = np.zeros((2, 4), dtype=np.int64)
    for i, t in enumerate(tgt):
        dec_in[i, 0] = 1
        dec_in[i, 1:len(t) + 1] = t
        dec_out[i, :len(t)] = t
        dec_out[i, len(t)] = 2
    ctc = [rng.integers(1, ctc_vocab, 2), rng.integers(1, ctc_vocab, 1)]
    return src, lengths, dec_in, SeqTarget(dec_out, ctc, ctc_vocab)


def model_gradient_error(model, src, lengths, dec_in, target, lam=0.3, eps=0.1) -> float:
    """Largest finite-difference disagreement over every parameter of
    ``model`` for the interpolated MLE + CTC loss."""
    def loss_with(name):
        original = model.params[name]

        def fn(x):
            model.params[name] = x
            try:
                logits, ctc, enc_len = model.forward(src, lengths, dec_in)
                return interpolated_loss(logits, ctc, target, lam, eps, enc_len)[0]
            finally:
                model.params[name] = original
        return fn

    worst = 0.0
    for name, p in sorted(model.params.items()):
        worst = max(worst, finite_diff_check(loss_with(name), p.data, eps=1e-6))
    return worst


def exhaustive_best(score_fn, vocab, max_len, eos):
    """Highest-scoring sequence among all sequences of at most ``max_len``
    tokens that end in ``eos`` (and contain it only at the end)."""
    best, best_score = None, -math.inf
    for n in range(1, max_len + 1):
        for body in itertools.product([v for v in vocab if v != eos], repeat=n - 1):
            seq = list(body) + [eos]
            s = score_fn(seq)
            if s > best_score:
                best, best_score = seq, s
    return best, best_score
