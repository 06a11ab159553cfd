import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsupt.decode import (FULL_SCALE_GROUPS, EvalReport, Hypothesis, beam_search, beam_search_batch,
                          bleu, bleu_stats, chrf, greedy_batch, groups_by_size, report_groups,
                          sequence_log_prob, tokenize_13a)
from dsupt.nn import build_model, desk_config
from dsupt.tokenizer import BOS, EOS, PAD, UNK

from oracles import exhaustive_best

FIXTURES = Path(__file__).parent / "fixtures"


def toy_model(seed, vocab=6, scale=3.0):
    cfg = desk_config("scratch", vocab, fbk_dim=4, d_model=8, ffn_enc=16, heads=2, dropout=0.0)
    model = build_model(cfg, seed)
    # sharpen the output layer so decisions are not near-uniform
    model.params["out_proj.weight"].data *= scale
    return model


def sources(rng, n, dim=4):
    return [rng.standard_normal((int(rng.integers(6, 20)), dim)) for _ in range(n)]


# -- search ---------------------------------------------------------------------------------

def test_beam_one_is_greedy(rng):
    model = toy_model(0, vocab=9)
    srcs = sources(rng, 30)
    beams = beam_search_batch(model, srcs, beam=1, max_len=6)
    greedy = greedy_batch(model, srcs, max_len=6)
    for b, g in zip(beams, greedy):
        assert b.tokens == g.tokens and b.score == pytest.approx(g.score, abs=1e-12)


def test_beam_five_is_exact_on_two_token_vocab(rng):
    for seed in range(8):
        model = toy_model(seed, vocab=6)
        for src in sources(rng, 3):
            hyp = beam_search(model, src, beam=5, max_len=3)
            best, score = exhaustive_best(lambda s: sequence_log_prob(model, src, s), [EOS, 4, 5], 3, EOS)
            assert hyp.tokens == best and hyp.score == pytest.approx(score, abs=1e-9)


def test_scores_are_sums_of_log_probs(rng):
    model = toy_model(3, vocab=8)
    src = sources(rng, 1)[0]
    hyp = beam_search(model, src, beam=3, max_len=5)
    assert hyp.finished and hyp.tokens[-1] == EOS
    assert hyp.score == pytest.approx(sequence_log_prob(model, src, hyp.tokens), abs=1e-9)
    assert not set(hyp.tokens) & {PAD, BOS, UNK}
    assert hyp.content() == hyp.tokens[:-1]


def test_unfinished_result_is_flagged(rng):
    model = toy_model(1, vocab=8)
    model.params["out_proj.weight"].data[:, EOS] = -50.0
    hyp = beam_search(model, sources(rng, 1)[0], beam=2, max_len=4, force_eos=False)
    assert not hyp.finished and len(hyp.tokens) == 4 and EOS not in hyp.tokens
    forced = beam_search(model, sources(rng, 1)[0], beam=2, max_len=4)
    assert forced.finished and len(forced.tokens) == 4


def test_batch_equals_single_and_is_deterministic(rng):
    model = toy_model(2, vocab=9)
    srcs = sources(rng, 7)
    batched = beam_search_batch(model, srcs, beam=4, max_len=6, chunk=3)
    again = beam_search_batch(model, srcs, beam=4, max_len=6)
    for i, src in enumerate(srcs):
        single = beam_search(model, src, beam=4, max_len=6)
        assert batched[i].tokens == single.tokens == again[i].tokens
        assert batched[i].score == pytest.approx(single.score, abs=1e-9)


def test_wider_beam_scores_at_least_greedy(rng):
    worse = 0
    for seed in range(6):
        model = toy_model(seed, vocab=9)
        srcs = sources(rng, 15)
        for b5, b1 in zip(beam_search_batch(model, srcs, 5, 6), beam_search_batch(model, srcs, 1, 6)):
            worse += b5.score < b1.score - 1e-9
    assert worse == 0


def test_search_argument_errors(rng):
    with pytest.raises(ValueError):
        beam_search(toy_model(0), sources(rng, 1)[0], beam=0)


# -- BLEU -------------------------------------------------------------------------------------

def test_bleu_identity_and_empty():
    assert bleu(["the cat sat on the mat"], ["the cat sat on the mat"]) == 100.0
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])


def test_bleu_two_sentence_fixture():
    hyps = ["the cat sat on the mat", "a dog"]
    refs = ["the cat is on the mat", "a dog ran"]
    st = bleu_stats(hyps, refs)
    assert st.matches == [7, 4, 1, 0] and st.totals == [8, 6, 4, 3]
    assert (st.sys_len, st.ref_len) == (8, 9)
    # order 4 has no match: exponential smoothing gives 1 / (2 * 3)
    expect = 100 * math.exp(1 - 9 / 8) * (7 / 8 * 4 / 6 * 1 / 4 * 1 / 6) ** 0.25
    assert bleu(hyps, refs) == pytest.approx(expect, abs=1e-6)


def test_bleu_no_overlap_is_zero():
    assert bleu(["x y z w"], ["a b c d e"]) == 0.0


@pytest.mark.parametrize("case", json.loads((FIXTURES / "bleu_13a.json").read_text()),
                         ids=lambda c: c["note"])
def test_13a_fixture(case):
    assert bleu([case["hyp"]], [case["ref"]]) == pytest.approx(case["bleu_13a"], abs=1e-6)


def test_13a_tokenizer_examples():
    assert tokenize_13a("Hello, world!") == "Hello , world !"
    assert tokenize_13a("3.5 and 1,000") == "3.5 and 1,000"
    assert tokenize_13a("x&amp;y") == "x & y"


def test_bleu_never_increases_under_corruption():
    rng = np.random.default_rng(0)
    words = "the quick brown fox jumps over the lazy dog near our old red barn".split()
    refs = [" ".join(rng.permutation(words)[:10]) for _ in range(5)]
    for trial in range(10):
        hyps = [r.split() for r in refs]
        prev = bleu([" ".join(h) for h in hyps], refs)
        positions = [(i, j) for i in range(5) for j in range(10)]
        for k in rng.permutation(len(positions)):
            i, j = positions[k]
            hyps[i][j] = f"noise{trial}_{k}"
            cur = bleu([" ".join(h) for h in hyps], refs)
            assert cur <= prev + 1e-9
            prev = cur


@given(st.permutations(range(4)))
def test_corpus_scores_ignore_order(perm):
    hyps = ["a b c d", "the cat", "x y z", "one two three four five"]
    refs = ["a b c e", "the cat sat", "x y", "one two three four"]
    ph = [hyps[i] for i in perm]
    pr = [refs[i] for i in perm]
    assert bleu(ph, pr) == pytest.approx(bleu(hyps, refs), abs=1e-12)
    assert chrf(ph, pr) == pytest.approx(chrf(hyps, refs), abs=1e-12)


# -- chrF ---------------------------------------------------------------------------------------

def test_chrf_examples():
    assert chrf(["hello world"], ["hello world"]) == 100.0
    assert chrf(["abc"], ["xyz"]) == 0.0
    # "ab" vs "abc": orders 1 and 2 only; P = 1, R = (2/3 + 1/2) / 2
    p, r = 1.0, (2 / 3 + 1 / 2) / 2
    assert chrf(["ab"], ["abc"]) == pytest.approx(100 * 5 * p * r / (4 * p + r), abs=1e-6)
    assert chrf(["a b"], ["ab"]) == 100.0


# -- reports --------------------------------------------------------------------------------------

def test_report_groups():
    rep = report_groups({"a": 10.0, "b": 20.0, "c": 40.0}, {"High": ["a"], "Mid": ["b"], "Low": ["c"]})
    assert rep.groups == {"High": 10.0, "Mid": 20.0, "Low": 40.0, "All": pytest.approx(70 / 3)}
    assert EvalReport.from_json(rep.to_json()) == rep
    with pytest.raises(ValueError, match="without a group"):
        report_groups({"a": 1.0, "z": 2.0}, {"High": ["a"]})
    with pytest.raises(ValueError, match="both"):
        report_groups({"a": 1.0}, {"High": ["a"], "Low": ["a"]})


def test_full_scale_grouping_preset():
    assert FULL_SCALE_GROUPS["High"] == ("ca", "de", "es", "fr")
    assert FULL_SCALE_GROUPS["Mid"] == ("fa", "it", "pt", "ru", "zh")
    assert len(FULL_SCALE_GROUPS["Low"]) == 12
    assert sum(map(len, FULL_SCALE_GROUPS.values())) == 21


def test_groups_by_size():
    assert groups_by_size({"x": 200, "y": 50, "z": 10, "w": 150}, 150, 30) == \
        {"High": ("w", "x"), "Mid": ("y",), "Low": ("z",)}
    with pytest.raises(ValueError):
        groups_by_size({"x": 1}, 10, 20)


# -- against the reference implementation ------------------------------------------------------

def test_matches_sacrebleu_on_random_corpora():
    sacrebleu = pytest.importorskip("sacrebleu")
    rng = np.random.default_rng(11)
    vocab = ["the", "a", "cat", "dog", "sat", "ran", ",", ".", "3.5", "on", "mat", "it's", "-"]
    for _ in range(60):
        n = int(rng.integers(1, 5))
        hyps = [" ".join(rng.choice(vocab, int(rng.integers(0, 12)))) for _ in range(n)]
        refs = [" ".join(rng.choice(vocab, int(rng.integers(1, 12)))) for _ in range(n)]
        ref_bleu = sacrebleu.corpus_bleu(hyps, [refs], tokenize="13a", smooth_method="exp").score
        ref_chrf = sacrebleu.corpus_chrf(hyps, [refs], char_order=6, word_order=0, beta=2).score
        assert bleu(hyps, refs) == pytest.approx(ref_bleu, abs=1e-6)
        assert chrf(hyps, refs) == pytest.approx(ref_chrf, abs=1e-6)
