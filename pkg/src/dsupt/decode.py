"""Beam search, corpus BLEU / chrF and per-group reports."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .nn import Seq2Seq
from .tokenizer import BOS, EOS, PAD, UNK

BANNED = (PAD, BOS, UNK)


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool

    def content(self) -> list[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)


# -- search ---------------------------------------------------------------------------

def _pad_sources(srcs: Sequence[np.ndarray]):
    lengths = np.array([len(s) for s in srcs])
    first = np.asarray(srcs[0])
    if first.ndim == 2:
        out = np.zeros((len(srcs), lengths.max(), first.shape[1]))
    else:
        out = np.full((len(srcs), lengths.max()), PAD, dtype=np.int64)
    for i, s in enumerate(srcs):
        out[i, : len(s)] = s
    return out, lengths


def _encode_all(model: Seq2Seq, srcs, chunk: int):
    """Encoder states per utterance (unpadded) in input order."""
    states = []
    order = np.argsort([len(s) for s in srcs], kind="stable")
    slots: list = [None] * len(srcs)
    with T.no_grad():
        for start in range(0, len(order), chunk):
            idx = order[start:start + chunk]
            src, lengths = _pad_sources([srcs[i] for i in idx])
            enc, enc_len = model.encode(src, lengths)
            for j, i in enumerate(idx):
                slots[i] = enc.data[j, : enc_len[j]]
    states.extend(slots)
    return states


def _step_log_probs(model: Seq2Seq, enc_states, owners, prefixes) -> np.ndarray:
    """Next-token log-probabilities for each (utterance, prefix) pair."""
    lengths = np.array([enc_states[o].shape[0] for o in owners])
    mem = np.zeros((len(owners), lengths.max(), model.config.d_model))
    for i, o in enumerate(owners):
        mem[i, : lengths[i]] = enc_states[o]
    dec_in = np.array([[BOS] + list(p) for p in prefixes], dtype=np.int64)
    with T.no_grad():
        logits = model.decode(T.Tensor(mem), lengths, dec_in)
    last = logits.data[:, -1, :]
    return last - np.logaddexp.reduce(last, axis=-1, keepdims=True)


def beam_search_batch(model: Seq2Seq, srcs: Sequence[np.ndarray], beam: int = 5, max_len: int = 64,
                      force_eos: bool = True, chunk: int = 32) -> list[Hypothesis]:
    """Beam search over several utterances at once.

    Scores are summed token log-probabilities without length normalisation.
    Each step keeps the ``beam`` best expansions of the live hypotheses;
    expansions ending in EOS are set aside as finished.  ``max_len`` bounds
    the output length including EOS; with ``force_eos`` the last position may
    only be EOS.  Search for an utterance stops once its best finished score
    is at least its best live score (scores never increase).
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be positive")
    enc_states = _encode_all(model, srcs, chunk)
    live = [[((), 0.0)] for _ in srcs]
    finished: list[list[Hypothesis]] = [[] for _ in srcs]
    for step in range(max_len):
        owners, prefixes, scores = [], [], []
        for u, hyps in enumerate(live):
            for prefix, score in hyps:
                owners.append(u)
                prefixes.append(prefix)
                scores.append(score)
        if not owners:
            break
        lp = np.concatenate([_step_log_probs(model, enc_states, owners[i:i + chunk * beam],
                                             prefixes[i:i + chunk * beam])
                             for i in range(0, len(owners), chunk * beam)])
        lp[:, list(BANNED)] = -np.inf
        if force_eos and step == max_len - 1:
            keep = lp[:, EOS].copy()
            lp[:] = -np.inf
            lp[:, EOS] = keep
        cand = np.asarray(scores)[:, None] + lp
        new_live: list[list] = [[] for _ in srcs]
        pos = 0
        for u, hyps in enumerate(live):
            n = len(hyps)
            if n == 0:
                continue
            block = cand[pos:pos + n]
            pos += n
            flat = block.ravel()
            top = np.argsort(-flat, kind="stable")[:beam]
            for f in top:
                s = float(flat[f])
                if s == -np.inf:
                    break
                h, tok = divmod(int(f), block.shape[1])
                prefix = hyps[h][0]
                if tok == EOS:
                    finished[u].append(Hypothesis(list(prefix) + [EOS], s, True))
                else:
                    new_live[u].append((prefix + (tok,), s))
            if finished[u] and new_live[u]:
                best_done = max(h.score for h in finished[u])
                if best_done >= new_live[u][0][1]:
                    new_live[u] = []
        live = new_live
    out = []
    for u in range(len(srcs)):
        if finished[u]:
            out.append(max(finished[u], key=lambda h: h.score))
        elif live[u]:
            prefix, score = live[u][0]
            out.append(Hypothesis(list(prefix), score, False))
        else:
            out.append(Hypothesis([], -math.inf, False))
    return out


def beam_search(model: Seq2Seq, src: np.ndarray, beam: int = 5, max_len: int = 64,
                force_eos: bool = True) -> Hypothesis:
    return beam_search_batch(model, [src], beam, max_len, force_eos)[0]


def greedy_batch(model: Seq2Seq, srcs: Sequence[np.ndarray], max_len: int = 64,
                 force_eos: bool = True, chunk: int = 32) -> list[Hypothesis]:
    """Argmax decoding (ties to the lowest id) with the same token bans as
    beam search."""
    enc_states = _encode_all(model, srcs, chunk)
    hyps = [Hypothesis([], 0.0, False) for _ in srcs]
    for step in range(max_len):
        active = [u for u, h in enumerate(hyps) if not h.finished]
        if not active:
            break
        for i in range(0, len(active), chunk):
            group = active[i:i + chunk]
            lp = _step_log_probs(model, enc_states, group, [hyps[u].tokens for u in group])
            lp[:, list(BANNED)] = -np.inf
            for row, u in zip(lp, group):
                tok = EOS if force_eos and step == max_len - 1 else int(np.argmax(row))
                hyps[u].tokens.append(tok)
                hyps[u].score += float(row[tok])
                hyps[u].finished = tok == EOS
    return hyps


def sequence_log_prob(model: Seq2Seq, src: np.ndarray, tokens: Sequence[int]) -> float:
    """Model log-probability of ``tokens`` (teacher forced, no bans)."""
    enc = _encode_all(model, [src], 1)
    total = 0.0
    for i, tok in enumerate(tokens):
        total += float(_step_log_probs(model, enc, [0], [tuple(tokens[:i])])[0, tok])
    return total


# -- BLEU -----------------------------------------------------------------------------------

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> str:
    """mteval-v13a tokenisation: split off punctuation and symbols, keep
    decimal points and thousands separators between digits."""
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return " ".join(line.split())


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(hyps: Sequence[str], refs: Sequence[str]) -> None:
    if len(hyps) == 0:
        raise ValueError("empty corpus")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    sys_len: int
    ref_len: int


def bleu_stats(hyps: Sequence[str], refs: Sequence[str], max_order: int = 4) -> BleuStats:
    _check_corpus(hyps, refs)
    matches = [0] * max_order
    totals = [0] * max_order
    sys_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h = tokenize_13a(hyp).split()
        r = tokenize_13a(ref).split()
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hn, rn = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rn[g]) for g, c in hn.items())
            totals[n - 1] += max(0, len(h) - n + 1)
    return BleuStats(matches, totals, sys_len, ref_len)


def bleu_from_stats(st: BleuStats) -> float:
    """Corpus BLEU with exponential smoothing: the k-th order with no match
    gets precision 1 / (2^k * total)."""
    if st.sys_len == 0 or st.matches[0] == 0:
        return 0.0
    smooth = 1.0
    log_p = 0.0
    order = len(st.matches)
    for m, t in zip(st.matches, st.totals):
        if t == 0:
            # a missing order has precision 0
            return 0.0
        if m == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * t)
        else:
            p = m / t
        log_p += math.log(p) / order
    bp = 1.0 if st.sys_len >= st.ref_len else math.exp(1.0 - st.ref_len / st.sys_len)
    return 100.0 * bp * math.exp(log_p)


def bleu(hyps: Sequence[str], refs: Sequence[str]) -> float:
    """Corpus BLEU (13a tokenisation, exponential smoothing), 0-100."""
    return bleu_from_stats(bleu_stats(hyps, refs))


# -- chrF -----------------------------------------------------------------------------------

def chrf(hyps: Sequence[str], refs: Sequence[str], order: int = 6, beta: float = 2.0) -> float:
    """Corpus chrF over character n-grams up to ``order`` with whitespace
    removed; precision and recall are averaged over the orders present."""
    _check_corpus(hyps, refs)
    stats = np.zeros((order, 3))
    for hyp, ref in zip(hyps, refs):
        h = "".join(hyp.split())
        r = "".join(ref.split())
        for n in range(1, order + 1):
            hn, rn = _ngrams(h, n), _ngrams(r, n)
            n_hyp = sum(hn.values())
            n_ref = sum(rn.values())
            stats[n - 1] += (n_hyp if n_ref else 0, n_ref, sum(min(c, rn[g]) for g, c in hn.items()))
    precision = recall = 0.0
    effective = 0
    for n_hyp, n_ref, match in stats:
        if n_hyp > 0 and n_ref > 0:
            precision += match / n_hyp
            recall += match / n_ref
            effective += 1
    if effective == 0:
        return 0.0
    precision /= effective
    recall /= effective
    if precision + recall == 0.0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * precision * recall / (b2 * precision + recall)


# -- reporting ------------------------------------------------------------------------------

FULL_SCALE_GROUPS = {
    "High": ("ca", "de", "es", "fr"),
    "Mid": ("fa", "it", "pt", "ru", "zh"),
    "Low": ("ar", "cy", "et", "id", "ja", "lv", "mn", "nl", "sl", "sv", "ta", "tr"),
}


def groups_by_size(train_counts: Mapping[str, int], high: int, mid: int) -> dict[str, tuple[str, ...]]:
    """Assign a language to High when it has at least ``high`` training
    utterances, Mid when at least ``mid``, Low otherwise."""
    if not high > mid > 0:
        raise ValueError("thresholds must satisfy high > mid > 0")
    groups: dict[str, list[str]] = {"High": [], "Mid": [], "Low": []}
    for lang in sorted(train_counts):
        n = train_counts[lang]
        groups["High" if n >= high else "Mid" if n >= mid else "Low"].append(lang)
    return {g: tuple(v) for g, v in groups.items()}


@dataclass
class EvalReport:
    metric: str
    per_language: dict[str, float]
    groups: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "per_language": self.per_language,
                           "groups": self.groups}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["metric"], d["per_language"], d["groups"])


def report_groups(scores: Mapping[str, float], grouping: Mapping[str, Sequence[str]],
                  metric: str = "bleu") -> EvalReport:
    """Unweighted mean per group and over all languages.  Groups without a
    scored language are omitted."""
    owner: dict[str, str] = {}
    for group, langs in grouping.items():
        for lang in langs:
            if lang in owner:
                raise ValueError(f"language {lang!r} assigned to both {owner[lang]} and {group}")
            owner[lang] = group
    missing = sorted(set(scores) - set(owner))
    if missing:
        raise ValueError(f"languages without a group: {missing}")
    if not scores:
        raise ValueError("no scores to report")
    means = {}
    for group, langs in grouping.items():
        vals = [scores[l] for l in langs if l in scores]
        if vals:
            means[group] = float(np.mean(vals))
    means["All"] = float(np.mean(list(scores.values())))
    return EvalReport(metric, {k: float(v) for k, v in sorted(scores.items())}, means)
