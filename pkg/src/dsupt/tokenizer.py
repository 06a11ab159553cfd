"""Tokenisation of unit sequences and target text.

Unit sequences are de-duplicated (runs collapse to one unit), rendered as
``#<index>`` hashtags and optionally compressed with BPE.  For units, BPE
ignores the whitespace between hashtags; by default each hashtag is an
atomic base symbol, with ``char_level=True`` the concatenated string is split
into characters instead.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

WORD_MARK = "▁"
PAD_TOK, BOS_TOK, EOS_TOK, UNK_TOK, BLANK_TOK = "<pad>", "<s>", "</s>", "<unk>", "<blank>"
DECODER_RESERVED = (PAD_TOK, BOS_TOK, EOS_TOK, UNK_TOK)
CTC_RESERVED = (BLANK_TOK, UNK_TOK)
PAD, BOS, EOS, UNK = 0, 1, 2, 3

_HASHTAG = re.compile(r"#(\d+)")


def dedup(units: Sequence[int]) -> list[int]:
    """Collapse maximal runs of equal units."""
    out: list[int] = []
    for u in units:
        if not out or out[-1] != u:
            out.append(u)
    return out


def render_hashtag(units: Iterable[int]) -> str:
    return " ".join(f"#{int(u)}" for u in units)


def parse_hashtag(text: str) -> list[int]:
    """Inverse of :func:`render_hashtag`; whitespace between units is optional."""
    compact = "".join(text.split())
    units = [int(m) for m in _HASHTAG.findall(compact)]
    if "".join(f"#{u}" for u in units) != compact:
        raise ValueError(f"not a hashtag unit string: {text!r}")
    return units


# -- BPE ---------------------------------------------------------------------------------

@dataclass
class BpeModel:
    mode: str
    merges: list[tuple[str, str, str]]
    base: list[str]
    vocab_size: int
    char_level: bool = False
    _ranks: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("text", "dsu"):
            raise ValueError(f"BPE mode must be text or dsu, got {self.mode!r}")
        self._ranks = {(l, r): i for i, (l, r, _) in enumerate(self.merges)}

    def inventory(self) -> list[str]:
        """Base symbols followed by merged symbols, without repeats."""
        seen: dict[str, None] = dict.fromkeys(self.base)
        for _, _, merged in self.merges:
            seen.setdefault(merged, None)
        return list(seen)

    def save(self, path) -> None:
        head = [f"mode={self.mode}", f"char_level={int(self.char_level)}",
                f"vocab_size={self.vocab_size}", "base=" + " ".join(self.base)]
        lines = ["\t".join(head)] + ["\t".join(m) for m in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n")
        if not lines[0].startswith("mode="):
            raise ValueError(f"{path}: first line must start with mode=")
        meta = dict(item.split("=", 1) for item in lines[0].split("\t"))
        merges = []
        for line in lines[1:]:
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}: malformed merge line {line!r}")
            merges.append(tuple(parts))
        base = meta.get("base", "").split(" ") if meta.get("base") else []
        return cls(meta["mode"], merges, base, int(meta.get("vocab_size", 0)),
                   bool(int(meta.get("char_level", 0))))


def _sequences(line: str, mode: str, char_level: bool) -> list[tuple[str, ...]]:
    """Split one corpus line into the base-symbol sequences BPE operates on."""
    if mode == "text":
        return [(WORD_MARK,) + tuple(word) for word in line.split()]
    compact = "".join(line.split())
    if not compact:
        return []
    if char_level:
        return [tuple(compact)]
    units = parse_hashtag(compact)
    return [tuple(f"#{u}" for u in units)]


def _merge_seq(seq: tuple[str, ...], left: str, right: str, merged: str) -> tuple[str, ...]:
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


def bpe_train(corpus: Sequence[str], target_vocab_size: int, mode: str = "text",
              char_level: bool = False) -> BpeModel:
    """Greedy pair-merge BPE.

    Merges the most frequent adjacent pair until the inventory reaches
    ``target_vocab_size`` or no pair occurs twice.  Frequency ties go to the
    lexicographically smallest merged string.
    """
    if mode not in ("text", "dsu"):
        raise ValueError(f"BPE mode must be text or dsu, got {mode!r}")
    words: Counter = Counter()
    for line in corpus:
        words.update(_sequences(line, mode, char_level))
    if not words:
        raise ValueError("cannot train BPE on an empty corpus")
    base = sorted({s for w in words for s in w})
    if target_vocab_size < len(base):
        raise ValueError(f"target vocabulary {target_vocab_size} is smaller than the "
                         f"{len(base)} base symbols")
    inventory = set(base)
    merges: list[tuple[str, str, str]] = []
    vocab = dict(words)
    while len(inventory) < target_vocab_size:
        pairs: Counter = Counter()
        for w, c in vocab.items():
            for pair in zip(w, w[1:]):
                pairs[pair] += c
        if not pairs:
            break
        top = max(pairs.values())
        if top < 2:
            break
        left, right = min((p for p, c in pairs.items() if c == top),
                          key=lambda p: (p[0] + p[1], p))
        merged = left + right
        merges.append((left, right, merged))
        inventory.add(merged)
        vocab = {(_merge_seq(w, left, right, merged) if left in w else w): c
                 for w, c in vocab.items()}
    return BpeModel(mode, merges, base, target_vocab_size, char_level)


def _apply_merges(model: BpeModel, seq: tuple[str, ...]) -> list[str]:
    hit = model._cache.get(seq)
    if hit is not None:
        return hit
    sym = list(seq)
    ranks = model._ranks
    while len(sym) > 1:
        best = None
        for pair in zip(sym, sym[1:]):
            r = ranks.get(pair)
            if r is not None and (best is None or r < best):
                best = r
        if best is None:
            break
        left, right, merged = model.merges[best]
        sym = list(_merge_seq(tuple(sym), left, right, merged))
    if len(model._cache) < 100_000:
        model._cache[seq] = sym
    return sym


def bpe_encode(model: BpeModel, text: str) -> list[str]:
    """Token strings for ``text`` by replaying the merges in training order."""
    out: list[str] = []
    for seq in _sequences(text, model.mode, model.char_level):
        out.extend(_apply_merges(model, seq))
    return out


def bpe_apply(model: BpeModel, text: str, vocab: "Vocabulary", side: str = "tgt") -> list[int]:
    return vocab.encode(bpe_encode(model, text), side=side)


def detokenize(tokens: Sequence[str], mode: str) -> str:
    joined = "".join(tokens)
    if mode == "text":
        return " ".join(joined.replace(WORD_MARK, " ").split())
    return render_hashtag(parse_hashtag(joined)) if joined else ""


# -- vocabularies ------------------------------------------------------------------------

class Vocabulary:
    """Bijective token <-> id table with reserved ids first.

    Decoder tables reserve pad=0, bos=1, eos=2, unk=3; CTC tables reserve
    blank=0, unk=1.  ``src_alias`` maps unit tokens renamed to avoid a
    collision in a joint table.
    """

    def __init__(self, tokens: Iterable[str], kind: str = "decoder",
                 src_alias: dict[str, str] | None = None):
        if kind not in ("decoder", "ctc"):
            raise ValueError(f"unknown vocabulary kind {kind!r}")
        self.kind = kind
        reserved = DECODER_RESERVED if kind == "decoder" else CTC_RESERVED
        self.itos: list[str] = list(reserved)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)
        self.src_alias = dict(src_alias or {})
        self.n_reserved = len(reserved)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocabulary) and self.itos == other.itos and self.kind == other.kind
                and self.src_alias == other.src_alias)

    @property
    def unk(self) -> int:
        return self.stoi[UNK_TOK]

    def tokens(self) -> list[str]:
        return self.itos[self.n_reserved:]

    def encode(self, tokens: Iterable[str], side: str = "tgt") -> list[int]:
        alias = self.src_alias if side == "src" else {}
        unk = self.unk
        return [self.stoi.get(alias.get(t, t), unk) for t in tokens]

    def decode(self, ids: Iterable[int], strip_reserved: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_reserved and i < self.n_reserved:
                continue
            out.append(self.itos[i])
        return out

    def ctc_table(self) -> "Vocabulary":
        return Vocabulary(self.tokens(), kind="ctc")

    def to_ctc_ids(self, ids: Iterable[int], ctc: "Vocabulary") -> list[int]:
        """Map decoder ids onto a CTC table, dropping pad/bos/eos."""
        out = []
        for i in ids:
            tok = self.itos[int(i)]
            if tok in (PAD_TOK, BOS_TOK, EOS_TOK):
                continue
            out.append(ctc.stoi.get(tok, ctc.unk))
        return out

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        alias = Path(str(path) + ".alias")
        if self.src_alias:
            alias.write_text("".join(f"{k}\t{v}\n" for k, v in sorted(self.src_alias.items())),
                             encoding="utf-8")
        elif alias.exists():
            alias.unlink()

    @classmethod
    def load(cls, path) -> "Vocabulary":
        itos = []
        for line in Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n"):
            tok, idx = line.rsplit("\t", 1)
            if int(idx) != len(itos):
                raise ValueError(f"{path}: ids must be contiguous from 0")
            itos.append(tok)
        kind = "decoder" if itos[: len(DECODER_RESERVED)] == list(DECODER_RESERVED) else "ctc"
        n_res = len(DECODER_RESERVED if kind == "decoder" else CTC_RESERVED)
        alias_file = Path(str(path) + ".alias")
        alias = {}
        if alias_file.exists():
            for line in alias_file.read_text(encoding="utf-8").splitlines():
                k, v = line.split("\t")
                alias[k] = v
        return cls(itos[n_res:], kind, alias)


def unit_inventory(n_units: int) -> list[str]:
    return [f"#{u}" for u in range(n_units)]


def build_vocab(dsu_bpe: BpeModel | None, tgt_bpe: BpeModel, mode: str = "separate",
                n_units: int | None = None):
    """Vocabularies for unit-to-translation pretraining.

    ``separate`` returns ``(src, tgt)`` tables; ``joint`` a single table
    holding both inventories (unit tokens that collide with a target token are
    renamed with extra ``#`` prefixes and recorded in ``src_alias``).
    """
    if dsu_bpe is not None and dsu_bpe.mode != "dsu":
        raise ValueError("dsu_bpe must be trained in dsu mode")
    if tgt_bpe.mode != "text":
        raise ValueError("tgt_bpe must be trained in text mode")
    if dsu_bpe is None:
        if n_units is None:
            raise ValueError("n_units is required when units are not BPE-encoded")
        src_tokens = unit_inventory(n_units)
    else:
        src_tokens = dsu_bpe.inventory()
    tgt_tokens = tgt_bpe.inventory()
    if mode == "separate":
        return Vocabulary(src_tokens), Vocabulary(tgt_tokens)
    if mode != "joint":
        raise ValueError(f"vocabulary mode must be separate or joint, got {mode!r}")
    taken = set(tgt_tokens) | set(DECODER_RESERVED)
    alias: dict[str, str] = {}
    renamed = []
    for tok in src_tokens:
        name = tok
        while name in taken:
            name = "#" + name
        taken.add(name)
        if name != tok:
            alias[tok] = name
        renamed.append(name)
    return Vocabulary(renamed + [t for t in tgt_tokens if t not in set(renamed)], src_alias=alias)


def corpus_stats(dsu_corpus: Sequence[Sequence], tgt_corpus: Sequence[Sequence]) -> tuple[float, float]:
    """Mean unit-sequence length and its ratio to the mean target length
    (unit tokens per target token)."""
    if len(dsu_corpus) != len(tgt_corpus):
        raise ValueError(f"corpora are not aligned: {len(dsu_corpus)} vs {len(tgt_corpus)}")
    if not dsu_corpus:
        raise ValueError("empty corpus")
    mean_dsu = sum(len(s) for s in dsu_corpus) / len(dsu_corpus)
    mean_tgt = sum(len(s) for s in tgt_corpus) / len(tgt_corpus)
    if mean_tgt == 0:
        raise ValueError("target corpus has no tokens")
    return mean_dsu, mean_dsu / mean_tgt
