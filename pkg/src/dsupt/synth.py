"""Seeded synthetic speech-translation corpus.

Every utterance is a sequence of consonant-vowel syllables.  The filterbank
view repeats a per-phoneme template for 4-8 frames, passes it through a
per-language linear distortion and adds heavy noise; the SSL view renders the
same phonemes at half the frame rate with little noise and no language
distortion, so clustering it recovers phoneme-like units.  The translation
maps each syllable to a word of a shared target inventory.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsu import Utterance, write_features, write_manifest

CONSONANT_LETTERS = "bdfgklmnprstvz"
VOWEL_LETTERS = "aeiouy"


def default_languages() -> dict[str, int]:
    """Two languages per resource tier: 200, 50 and 10 training utterances."""
    return {"ha": 200, "hb": 200, "ma": 50, "mb": 50, "la": 10, "lb": 10}


@dataclass
class SynthSpec:
    languages: dict[str, int] = field(default_factory=default_languages)
    test_per_language: int = 20
    n_consonants: int = 8
    n_vowels: int = 4
    n_words: int = 24
    fbk_dim: int = 16
    ssl_dim: int = 12
    frames_per_phoneme: tuple[int, int] = (4, 8)
    syllables: tuple[int, int] = (2, 5)
    fbk_noise: float = 1.0
    ssl_noise: float = 0.1
    accent: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.frames_per_phoneme = tuple(self.frames_per_phoneme)
        self.syllables = tuple(self.syllables)

    def validate(self) -> "SynthSpec":
        if not self.languages or min(self.languages.values()) <= 0 or self.test_per_language <= 0:
            raise ValueError("every language needs a positive utterance count")
        lo, hi = self.frames_per_phoneme
        if not 2 <= lo <= hi:
            raise ValueError("frames per phoneme must satisfy 2 <= min <= max")
        if not 1 <= self.syllables[0] <= self.syllables[1]:
            raise ValueError("syllable range must satisfy 1 <= min <= max")
        if self.n_consonants < 2 or self.n_vowels < 2:
            raise ValueError("need at least 2 consonants and 2 vowels")
        if not 1 <= self.n_words <= self.n_consonants * self.n_vowels:
            raise ValueError(f"{self.n_words} target words cannot be covered by "
                             f"{self.n_consonants * self.n_vowels} phoneme bigrams")
        if self.fbk_dim < 1 or self.ssl_dim < 1:
            raise ValueError("feature dims must be positive")
        if min(self.fbk_noise, self.ssl_noise, self.accent) < 0:
            raise ValueError("noise levels must be non-negative")
        return self

    @property
    def n_phonemes(self) -> int:
        return self.n_consonants + self.n_vowels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def _letters(n: int, pool: str, tag: str) -> list[str]:
    if n <= len(pool):
        return list(pool[:n])
    return [f"{tag}{i}" for i in range(n)]


@dataclass
class Lexicon:
    """Phoneme names, target words and the syllable -> word table."""
    phonemes: list[str]
    words: list[str]
    syllable_word: np.ndarray  # (n_consonants, n_vowels) word indices

    def transcript(self, latent) -> str:
        return " ".join(self.phonemes[latent[i]] + self.phonemes[latent[i + 1]]
                        for i in range(0, len(latent), 2))

    def translation(self, latent, n_consonants: int) -> str:
        return " ".join(self.words[self.syllable_word[latent[i], latent[i + 1] - n_consonants]]
                        for i in range(0, len(latent), 2))


def build_lexicon(spec: SynthSpec) -> Lexicon:
    rng = np.random.default_rng([spec.seed, 1])
    phonemes = (_letters(spec.n_consonants, CONSONANT_LETTERS, "C")
                + _letters(spec.n_vowels, VOWEL_LETTERS, "V"))
    words: list[str] = []
    seen = set()
    while len(words) < spec.n_words:
        w = "".join(rng.choice(list(string.ascii_lowercase), int(rng.integers(3, 7))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    n_bigrams = spec.n_consonants * spec.n_vowels
    table = (rng.permutation(n_bigrams) % spec.n_words).reshape(spec.n_consonants, spec.n_vowels)
    return Lexicon(phonemes, words, table)


def _utterance(spec: SynthSpec, rng: np.random.Generator, fbk_templates, ssl_templates, distortion):
    n_syl = int(rng.integers(spec.syllables[0], spec.syllables[1] + 1))
    cons = rng.integers(0, spec.n_consonants, n_syl)
    vows = rng.integers(0, spec.n_vowels, n_syl) + spec.n_consonants
    latent = np.stack([cons, vows], axis=1).ravel()
    lo, hi = spec.frames_per_phoneme
    durations = rng.integers(lo, hi + 1, len(latent))
    fbk = np.repeat(fbk_templates[latent], durations, axis=0) @ distortion
    fbk += spec.fbk_noise * rng.standard_normal(fbk.shape)
    fbk = (fbk - fbk.mean(axis=0)) / (fbk.std(axis=0) + 1e-5)
    ssl_dur = np.maximum(1, durations // 2)
    ssl = np.repeat(ssl_templates[latent], ssl_dur, axis=0)
    ssl += spec.ssl_noise * rng.standard_normal(ssl.shape)
    return latent, fbk, ssl


def gen_data(spec: SynthSpec, out_dir) -> dict:
    """Write ``train.tsv``, ``test.tsv``, ``latent.tsv``, ``synth.json`` and
    the feature files under ``feats/``.  Returns a small summary."""
    spec.validate()
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    lex = build_lexicon(spec)
    base = np.random.default_rng([spec.seed, 2])
    fbk_templates = base.standard_normal((spec.n_phonemes, spec.fbk_dim))
    ssl_templates = base.standard_normal((spec.n_phonemes, spec.ssl_dim))
    rows: dict[str, list[Utterance]] = {"train": [], "test": []}
    latents = []
    for li, lang in enumerate(sorted(spec.languages)):
        lrng = np.random.default_rng([spec.seed, 3, li])
        distortion = np.eye(spec.fbk_dim) + spec.accent * lrng.standard_normal(
            (spec.fbk_dim, spec.fbk_dim)) / np.sqrt(spec.fbk_dim)
        for si, (split, count) in enumerate((("train", spec.languages[lang]),
                                             ("test", spec.test_per_language))):
            for i in range(count):
                rng = np.random.default_rng([spec.seed, 4, li, si, i])
                latent, fbk, ssl = _utterance(spec, rng, fbk_templates, ssl_templates, distortion)
                uid = f"{lang}_{split}_{i:04d}"
                write_features(out / "feats" / f"{uid}.feat", ssl)
                write_features(out / "feats" / f"{uid}.fbk", fbk)
                rows[split].append(Utterance(uid, f"feats/{uid}.feat", f"feats/{uid}.fbk",
                                             len(fbk), lex.transcript(latent),
                                             lex.translation(latent, spec.n_consonants), lang))
                latents.append(f"{uid}\t{' '.join(map(str, latent))}")
    for split, rs in rows.items():
        write_manifest(out / f"{split}.tsv", rs)
    (out / "latent.tsv").write_text("\n".join(latents) + "\n")
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    return {"train": len(rows["train"]), "test": len(rows["test"]), "words": lex.words}


def read_latent(path) -> dict[str, list[int]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        uid, seq = line.split("\t")
        out[uid] = [int(x) for x in seq.split()]
    return out
