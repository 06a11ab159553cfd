"""End-to-end experiment: units, vocabularies, pretraining, transplant,
finetuning, decoding and scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import decode as D
from .dsu import (KmeansModel, Utterance, kmeans_assign, kmeans_fit, pool_hash, read_features,
                  read_manifest, sample_training_pool)
from .losses import min_ctc_frames
from .nn import ModelConfig, build_model, desk_config, subsampled_length
from .pipeline import (Checkpoint, Example, FilterLimits, SpecAugmentParams, StagePlan,
                       average_checkpoints,
                       best_checkpoint, filter_dataset, last_checkpoint, split_dev, train_stage,
                       transplant)
from .tokenizer import (BpeModel, Vocabulary, bpe_encode, bpe_train, build_vocab, dedup,
                        corpus_stats, detokenize, parse_hashtag, render_hashtag, unit_inventory)

log = logging.getLogger(__name__)

SYSTEMS = ("scratch", "asr_pretraining", "enc_init", "encdec_init", "dsu_adapter")


def desk_plans() -> dict[str, dict]:
    return {
        "fbk2dsu_pt": dict(stage="fbk2dsu_pt", batch_budget=1200, warmup=150, peak_lr=3e-3,
                           max_steps=900, ckpt_interval=60),
        "asr_pt": dict(stage="asr_pt", batch_budget=1200, warmup=150, peak_lr=3e-3,
                       max_steps=900, ckpt_interval=60),
        "dsu2trl_pt": dict(stage="dsu2trl_pt", batch_budget=400, warmup=150, peak_lr=3e-3,
                           max_steps=900, ctc_weight=0.0, specaugment=False, ckpt_interval=60),
        "st_ft": dict(stage="st_ft", batch_budget=1200, warmup=100, peak_lr=2e-3,
                      max_steps=600, ckpt_interval=40),
    }


@dataclass
class RecipeConfig:
    seed: int = 0
    dev_fraction: float = 0.05
    # clustering
    kmeans_k: int = 12
    kmeans_batch: int | None = None
    kmeans_iters: int = 30
    kmeans_restarts: int = 5
    pool_quota: dict = field(default_factory=lambda: {"High": 40, "Mid": 20, "Low": 5})
    tier_thresholds: tuple = (150, 30)
    # tokenisation
    dsu_bpe_size: int | None = None
    dsu_char_level: bool = False
    tgt_bpe_size: int = 256
    vocab_mode: str = "joint"
    # model
    d_model: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_enc: int = 128
    ffn_dec: int = 64
    heads: int = 4
    dropout: float = 0.1
    # training
    ft_fraction: float = 1.0
    lambda_alpha: float = 0.3
    lambda_beta: float = 0.3
    label_smoothing: float = 0.1
    plans: dict = field(default_factory=desk_plans)
    # SpecAugment widths scaled to the short, low-dimensional desk features
    specaug: dict = field(default_factory=lambda: {"freq_width": 2, "time_width": 4,
                                                   "freq_masks": 2, "time_masks": 2})
    max_frames: int = 3000
    max_tokens: int = 1024
    # inference
    beam: int = 5
    max_len: int = 32
    avg_last: int = 5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown recipe keys: {sorted(unknown)}")
        cfg = cls(**d)
        if "plans" in d:
            merged = desk_plans()
            for k, v in d["plans"].items():
                merged[k] = {**merged.get(k, {}), **v}
            cfg.plans = merged
        cfg.tier_thresholds = tuple(cfg.tier_thresholds)
        return cfg

    def plan(self, stage: str, seed_offset: int) -> StagePlan:
        p = StagePlan.from_dict({**self.plans[stage], "label_smoothing": self.label_smoothing})
        return replace(p, seed=self.seed * 1000 + seed_offset)

    def specaug_params(self) -> SpecAugmentParams:
        return SpecAugmentParams(**self.specaug)


# -- data preparation --------------------------------------------------------------------------

@dataclass
class Prepared:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    fbk: dict[str, np.ndarray]
    units: dict[str, list[int]]
    kmeans: KmeansModel
    dsu_bpe: BpeModel | None
    tgt_bpe: BpeModel
    dsu_vocab: Vocabulary       # decoder table over unit tokens (unit prediction target)
    dsu_ctc: Vocabulary
    src_vocab: Vocabulary       # unit-to-translation encoder table
    tgt_vocab: Vocabulary       # unit-to-translation decoder table
    st_vocab: Vocabulary        # translation-only decoder table
    st_ctc: Vocabulary
    asr_vocab: Vocabulary
    asr_ctc: Vocabulary
    groups: dict[str, tuple[str, ...]]

    def dsu_tokens(self, uid: str) -> list[str]:
        text = render_hashtag(self.units[uid])
        if self.dsu_bpe is None:
            return text.split()
        return bpe_encode(self.dsu_bpe, text)

    def tgt_tokens(self, text: str) -> list[str]:
        return bpe_encode(self.tgt_bpe, text)

    @property
    def all_rows(self) -> list[Utterance]:
        return self.train + self.dev + self.test


def resource_groups(rows: Sequence[Utterance], thresholds) -> dict[str, tuple[str, ...]]:
    counts: dict[str, int] = {}
    for r in rows:
        counts[r.lang] = counts.get(r.lang, 0) + 1
    return D.groups_by_size(counts, *thresholds)


@dataclass
class Splits:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    groups: dict[str, tuple[str, ...]]


def load_splits(data_dir, cfg: RecipeConfig) -> Splits:
    """Read the manifests, filter long utterances, hold out a seeded dev set
    and group languages by training-set size."""
    data_dir = Path(data_dir)
    limits = FilterLimits(cfg.max_frames, max_tokens=cfg.max_tokens)
    train_all = filter_dataset(read_manifest(data_dir / "train.tsv"), limits)
    test = read_manifest(data_dir / "test.tsv")
    train, dev = split_dev(train_all, cfg.dev_fraction, cfg.seed)
    return Splits(train, dev, test, resource_groups(train_all, cfg.tier_thresholds))


def train_kmeans(splits: Splits, cfg: RecipeConfig) -> tuple[KmeansModel, str]:
    """Fit K-means on a per-group quota of training utterances; returns the
    model and the hash of the clustering pool."""
    quota = {}
    for g, langs in splits.groups.items():
        if langs:
            smallest = min(sum(r.lang == l for r in splits.train) for l in langs)
            quota[g] = min(cfg.pool_quota[g], smallest)
    pool, _ = sample_training_pool(splits.train, {g: splits.groups[g] for g in quota}, quota,
                                   cfg.seed)
    km = kmeans_fit(pool, cfg.kmeans_k, cfg.kmeans_batch, cfg.kmeans_iters, seed=cfg.seed,
                    n_init=cfg.kmeans_restarts)
    return km, pool_hash(pool)


def encode_units(km: KmeansModel, rows: Sequence[Utterance]) -> dict[str, list[int]]:
    """De-duplicated unit sequence of every utterance."""
    return {r.id: dedup(kmeans_assign(km, read_features(r.ssl_file())).units) for r in rows}


def train_bpe(train: Sequence[Utterance], units: dict, cfg: RecipeConfig):
    dsu_bpe = None
    if cfg.dsu_bpe_size is not None:
        dsu_bpe = bpe_train([render_hashtag(units[r.id]) for r in train], cfg.dsu_bpe_size,
                            "dsu", cfg.dsu_char_level)
    tgt_bpe = bpe_train([r.translation for r in train], cfg.tgt_bpe_size, "text")
    return dsu_bpe, tgt_bpe


VOCAB_NAMES = ("dsu", "src", "tgt", "st", "asr")


def make_vocabs(dsu_bpe, tgt_bpe, train: Sequence[Utterance], cfg: RecipeConfig) -> dict:
    """Decoder tables: ``dsu`` (unit targets), ``src``/``tgt`` (unit-to-translation,
    one shared table in joint mode), ``st`` (translation only), ``asr``
    (transcript letters)."""
    if cfg.vocab_mode == "joint":
        src = tgt = build_vocab(dsu_bpe, tgt_bpe, "joint", cfg.kmeans_k)
    else:
        src, tgt = build_vocab(dsu_bpe, tgt_bpe, "separate", cfg.kmeans_k)
    unit_tokens = dsu_bpe.inventory() if dsu_bpe is not None else unit_inventory(cfg.kmeans_k)
    letters = sorted({c for r in train for c in r.transcript.replace(" ", "")})
    return {"dsu": Vocabulary(unit_tokens), "src": src, "tgt": tgt,
            "st": Vocabulary(tgt_bpe.inventory()), "asr": Vocabulary(letters)}


def assemble(splits: Splits, km: KmeansModel, units: dict, dsu_bpe, tgt_bpe,
             vocabs: dict) -> Prepared:
    rows = splits.train + splits.dev + splits.test
    fbk = {r.id: read_features(r.fbk_file()) for r in rows}
    return Prepared(splits.train, splits.dev, splits.test, fbk, units, km, dsu_bpe, tgt_bpe,
                    vocabs["dsu"], vocabs["dsu"].ctc_table(), vocabs["src"], vocabs["tgt"],
                    vocabs["st"], vocabs["st"].ctc_table(), vocabs["asr"],
                    vocabs["asr"].ctc_table(), splits.groups)


def prepare(data_dir, cfg: RecipeConfig) -> Prepared:
    """All data preparation in memory."""
    splits = load_splits(data_dir, cfg)
    km, _ = train_kmeans(splits, cfg)
    units = encode_units(km, splits.train + splits.dev + splits.test)
    dsu_bpe, tgt_bpe = train_bpe(splits.train, units, cfg)
    return assemble(splits, km, units, dsu_bpe, tgt_bpe,
                    make_vocabs(dsu_bpe, tgt_bpe, splits.train, cfg))


# -- workspace files ------------------------------------------------------------------------------

def write_units(path, units: dict[str, list[int]]) -> None:
    Path(path).write_text("".join(f"{k}\t{render_hashtag(v)}\n" for k, v in sorted(units.items())),
                          encoding="utf-8")


def read_units(path) -> dict[str, list[int]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        uid, text = line.split("\t")
        out[uid] = parse_hashtag(text)
    return out


def load_workspace(data_dir, work_dir, cfg: RecipeConfig) -> Prepared:
    """Rebuild the prepared data from files written by the individual
    preparation commands."""
    work = Path(work_dir)
    splits = load_splits(data_dir, cfg)
    km = KmeansModel.load(work / "kmeans.npz")
    units = read_units(work / "units.tsv")
    missing = [r.id for r in splits.train + splits.dev + splits.test if r.id not in units]
    if missing:
        raise ValueError(f"units.tsv lacks {len(missing)} utterances (first: {missing[0]})")
    dsu_bpe = BpeModel.load(work / "dsu.bpe") if (work / "dsu.bpe").exists() else None
    tgt_bpe = BpeModel.load(work / "tgt.bpe")
    vocabs = {name: Vocabulary.load(work / f"{name}.vocab") for name in VOCAB_NAMES}
    return assemble(splits, km, units, dsu_bpe, tgt_bpe, vocabs)


# -- examples ------------------------------------------------------------------------------------

def _ctc_ok(n_frames: int, labels) -> bool:
    return len(labels) > 0 and min_ctc_frames(labels) <= int(subsampled_length(n_frames))


def _fbk_examples(prep: Prepared, rows, tokens_of, vocab: Vocabulary, ctc: Vocabulary | None):
    out, dropped = [], 0
    for r in rows:
        toks = tokens_of(r)
        tgt = np.array(vocab.encode(toks), dtype=np.int64)
        labels = None
        if ctc is not None:
            labels = np.array(ctc.encode(toks), dtype=np.int64)
            if not _ctc_ok(r.n_frames, labels):
                dropped += 1
                continue
        out.append(Example(r.id, prep.fbk[r.id], tgt, labels, r.lang))
    if dropped:
        log.info("dropped %d utterances too short for CTC", dropped)
    return out


def unit_examples(prep: Prepared, rows, with_ctc: bool = True):
    return _fbk_examples(prep, rows, lambda r: prep.dsu_tokens(r.id), prep.dsu_vocab,
                         prep.dsu_ctc if with_ctc else None)


def asr_examples(prep: Prepared, rows, with_ctc: bool = True):
    return _fbk_examples(prep, rows, lambda r: list(r.transcript.replace(" ", "")),
                         prep.asr_vocab, prep.asr_ctc if with_ctc else None)


def st_examples(prep: Prepared, rows, vocab: Vocabulary, with_ctc: bool = True):
    return _fbk_examples(prep, rows, lambda r: prep.tgt_tokens(r.translation), vocab,
                         prep.st_ctc if with_ctc else None)


def dsu2trl_examples(prep: Prepared, rows):
    return [Example(r.id, np.array(prep.src_vocab.encode(prep.dsu_tokens(r.id), side="src")),
                    np.array(prep.tgt_vocab.encode(prep.tgt_tokens(r.translation))), None, r.lang)
            for r in rows]


# -- stages ----------------------------------------------------------------------------------------

def _config(cfg: RecipeConfig, role: str, tgt_vocab: int, src_vocab=None, ctc_vocab=0,
            fbk_dim: int = 16) -> ModelConfig:
    return desk_config(role, tgt_vocab, src_vocab, ctc_vocab, fbk_dim=fbk_dim, d_model=cfg.d_model,
                       enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers, ffn_enc=cfg.ffn_enc,
                       ffn_dec=cfg.ffn_dec, heads=cfg.heads, dropout=cfg.dropout,
                       share_embeddings=cfg.vocab_mode == "joint" and role == "dsu2trl")


def _fbk_dim(prep: Prepared) -> int:
    return next(iter(prep.fbk.values())).shape[1]


def pretrain_units(prep: Prepared, cfg: RecipeConfig, lam: float | None = None) -> list[Checkpoint]:
    """Filterbank-to-unit pretraining; returns the checkpoint series."""
    lam = cfg.lambda_alpha if lam is None else lam
    ctc_vocab = len(prep.dsu_ctc) if lam > 0 else 0
    mc = _config(cfg, "fbk2dsu", len(prep.dsu_vocab), ctc_vocab=ctc_vocab, fbk_dim=_fbk_dim(prep))
    plan = replace(cfg.plan("fbk2dsu_pt", 1), ctc_weight=lam)
    model = build_model(mc, cfg.seed * 1000 + 1)
    res = train_stage(plan, model, unit_examples(prep, prep.train, lam > 0),
                      unit_examples(prep, prep.dev, False), cfg.specaug_params())
    return res.checkpoints


def pretrain_asr(prep: Prepared, cfg: RecipeConfig) -> list[Checkpoint]:
    mc = _config(cfg, "asr_pt", len(prep.asr_vocab), ctc_vocab=len(prep.asr_ctc),
                 fbk_dim=_fbk_dim(prep))
    plan = replace(cfg.plan("asr_pt", 2), ctc_weight=cfg.lambda_alpha)
    model = build_model(mc, cfg.seed * 1000 + 2)
    return train_stage(plan, model, asr_examples(prep, prep.train),
                       asr_examples(prep, prep.dev, False), cfg.specaug_params()).checkpoints


def pretrain_translation(prep: Prepared, cfg: RecipeConfig) -> list[Checkpoint]:
    """Unit-to-translation pretraining."""
    mc = _config(cfg, "dsu2trl", len(prep.tgt_vocab), src_vocab=len(prep.src_vocab))
    model = build_model(mc, cfg.seed * 1000 + 3)
    return train_stage(cfg.plan("dsu2trl_pt", 3), model, dsu2trl_examples(prep, prep.train),
                       dsu2trl_examples(prep, prep.dev)).checkpoints


@dataclass
class SystemResult:
    name: str
    checkpoint: Checkpoint
    bleu: D.EvalReport
    chrf: D.EvalReport
    hypotheses: dict[str, str]

    @property
    def score(self) -> float:
        return self.bleu.groups["All"]


def ft_rows(prep: Prepared, cfg: RecipeConfig) -> list[Utterance]:
    """Seeded per-language subset of the training rows used for finetuning
    (pretraining always sees every training utterance)."""
    if not 0.0 < cfg.ft_fraction <= 1.0:
        raise ValueError("ft_fraction must lie in (0, 1]")
    if cfg.ft_fraction == 1.0:
        return list(prep.train)
    rng = np.random.default_rng([cfg.seed, 7])
    out = []
    for lang in sorted({r.lang for r in prep.train}):
        rows = [r for r in prep.train if r.lang == lang]
        n = max(1, int(round(len(rows) * cfg.ft_fraction)))
        out.extend(rows[i] for i in np.sort(rng.choice(len(rows), n, replace=False)))
    return out


def build_system(prep: Prepared, cfg: RecipeConfig, system: str, pt: dict | None = None,
                 ft_ctc: bool = True):
    """Initialise ``system`` from the pretrained series in ``pt`` (keys
    ``units``, ``translation``, ``asr``): the encoder comes from the last
    checkpoint of its series, the decoder from the best."""
    if system not in SYSTEMS:
        raise ValueError(f"unknown system {system!r}")
    pt = pt or {}
    ctc_vocab = len(prep.st_ctc) if ft_ctc else 0
    seed = cfg.seed * 1000 + 10 + SYSTEMS.index(system)
    if system == "scratch":
        return build_model(_config(cfg, "scratch", len(prep.st_vocab), ctc_vocab=ctc_vocab,
                                   fbk_dim=_fbk_dim(prep)), seed)
    if system in ("enc_init", "asr_pretraining"):
        enc = last_checkpoint(pt["asr" if system == "asr_pretraining" else "units"])
        return transplant(enc, None, "enc_init", seed, len(prep.st_vocab), ctc_vocab)
    return transplant(last_checkpoint(pt["units"]), best_checkpoint(pt["translation"]),
                      system, seed, len(prep.tgt_vocab), ctc_vocab)


def finetune_series(prep: Prepared, cfg: RecipeConfig, model, system: str,
                    ft_ctc: bool = True) -> list[Checkpoint]:
    """Finetune ``model`` on speech-translation pairs with interpolated
    MLE + CTC (CTC weight 0 when ``ft_ctc`` is off)."""
    vocab = decoder_vocab(prep, model.config)
    lam = cfg.lambda_beta if ft_ctc else 0.0
    if lam > 0 and not model.config.ctc_vocab:
        raise ValueError("CTC finetuning needs a model with a CTC head")
    offset = SYSTEMS.index(system) if system in SYSTEMS else len(SYSTEMS)
    plan = replace(cfg.plan("st_ft", 20 + offset), ctc_weight=lam,
                   stage="st_scratch" if model.config.role == "scratch" else "st_ft")
    return train_stage(plan, model, st_examples(prep, ft_rows(prep, cfg), vocab, lam > 0),
                       st_examples(prep, prep.dev, vocab, False),
                       cfg.specaug_params()).checkpoints


def final_checkpoint(series: Sequence[Checkpoint], n: int) -> Checkpoint:
    """Average of the last ``n`` checkpoints (the last one if fewer exist)."""
    if len(series) >= n:
        return average_checkpoints(series, n)
    return last_checkpoint(series)


def finetune(prep: Prepared, cfg: RecipeConfig, system: str, pt: dict | None = None,
             ft_ctc: bool = True) -> Checkpoint:
    model = build_system(prep, cfg, system, pt, ft_ctc)
    return final_checkpoint(finetune_series(prep, cfg, model, system, ft_ctc), cfg.avg_last)


def decoder_vocab(prep: Prepared, config: ModelConfig) -> Vocabulary:
    """Translation table of a speech-translation model: transplanted decoders
    keep the unit-to-translation table."""
    return prep.tgt_vocab if config.role in ("encdec_init", "dsu_adapter") else prep.st_vocab


def translate(prep: Prepared, cfg: RecipeConfig, ckpt: Checkpoint,
              rows: Sequence[Utterance]) -> dict[str, str]:
    """Beam-search translations of ``rows`` keyed by utterance id."""
    vocab = decoder_vocab(prep, ckpt.config)
    hyps = D.beam_search_batch(ckpt.to_model(), [prep.fbk[r.id] for r in rows], cfg.beam,
                               cfg.max_len)
    return {r.id: detokenize(vocab.decode(h.content()), "text") for r, h in zip(rows, hyps)}


def score_texts(texts: dict[str, str], rows: Sequence[Utterance], groups) -> tuple:
    """Per-language corpus BLEU and chrF reports."""
    bleu_scores, chrf_scores = {}, {}
    for lang in sorted({r.lang for r in rows}):
        sub = [r for r in rows if r.lang == lang]
        missing = [r.id for r in sub if r.id not in texts]
        if missing:
            raise ValueError(f"no hypothesis for {len(missing)} utterances (first: {missing[0]})")
        h = [texts[r.id] for r in sub]
        ref = [r.translation for r in sub]
        bleu_scores[lang] = D.bleu(h, ref)
        chrf_scores[lang] = D.chrf(h, ref)
    return (D.report_groups(bleu_scores, groups, "bleu"),
            D.report_groups(chrf_scores, groups, "chrf"))


def evaluate(prep: Prepared, cfg: RecipeConfig, ckpt: Checkpoint, name: str = "") -> SystemResult:
    text = translate(prep, cfg, ckpt, prep.test)
    bleu_rep, chrf_rep = score_texts(text, prep.test, prep.groups)
    return SystemResult(name or ckpt.config.role, ckpt, bleu_rep, chrf_rep, text)


# -- experiments -----------------------------------------------------------------------------------

class Experiment:
    """Caches pretraining runs so several systems share them."""

    def __init__(self, data_dir, cfg: RecipeConfig):
        self.cfg = cfg
        self.prep = prepare(data_dir, cfg)
        self._pt: dict = {}

    def units(self, lam: float | None = None) -> list[Checkpoint]:
        lam = self.cfg.lambda_alpha if lam is None else lam
        key = ("units", lam)
        if key not in self._pt:
            self._pt[key] = pretrain_units(self.prep, self.cfg, lam)
        return self._pt[key]

    def translation(self) -> list[Checkpoint]:
        if "translation" not in self._pt:
            self._pt["translation"] = pretrain_translation(self.prep, self.cfg)
        return self._pt["translation"]

    def asr(self) -> list[Checkpoint]:
        if "asr" not in self._pt:
            self._pt["asr"] = pretrain_asr(self.prep, self.cfg)
        return self._pt["asr"]

    def system(self, name: str, ft_ctc: bool = True, pt_ctc: bool = True) -> SystemResult:
        pt = {}
        if name in ("enc_init", "encdec_init", "dsu_adapter"):
            pt["units"] = self.units(None if pt_ctc else 0.0)
        if name in ("encdec_init", "dsu_adapter"):
            pt["translation"] = self.translation()
        if name == "asr_pretraining":
            pt["asr"] = self.asr()
        ckpt = finetune(self.prep, self.cfg, name, pt, ft_ctc)
        return evaluate(self.prep, self.cfg, ckpt, name)

    def ablate_ctc(self) -> dict[str, SystemResult]:
        """DSU-adapter under the four PT/FT CTC settings."""
        out = {}
        for pt_ctc in (False, True):
            for ft_ctc in (False, True):
                out[f"pt_ctc={int(pt_ctc)},ft_ctc={int(ft_ctc)}"] = self.system(
                    "dsu_adapter", ft_ctc, pt_ctc)
        return out


def translate_units(prep: Prepared, cfg: RecipeConfig, ckpt: Checkpoint,
                    rows: Sequence[Utterance]) -> dict[str, str]:
    """Translations produced by a unit-to-translation model."""
    ex = dsu2trl_examples(prep, rows)
    hyps = D.beam_search_batch(ckpt.to_model(), [e.src for e in ex], cfg.beam, cfg.max_len)
    return {r.id: detokenize(prep.tgt_vocab.decode(h.content()), "text")
            for r, h in zip(rows, hyps)}


ABLATION_SYSTEMS = ("enc_init", "encdec_init", "dsu_adapter")


def ablate_tokenization(data_dir, cfg: RecipeConfig, settings: Sequence[dict]) -> list[dict]:
    """One row per tokenisation setting (any of ``dsu_bpe_size``,
    ``dsu_char_level``, ``tgt_bpe_size``, ``vocab_mode``): mean unit length,
    unit/target length ratio, and All-group BLEU of the unit-to-translation
    model and of the three transplanted systems."""
    rows = []
    for setting in settings:
        c = replace(cfg, **setting)
        exp = Experiment(data_dir, c)
        prep = exp.prep
        dsu_len, ratio = corpus_lengths(prep)
        trl = final_checkpoint(exp.translation(), c.avg_last)
        bleu_rep, _ = score_texts(translate_units(prep, c, trl, prep.test), prep.test, prep.groups)
        row = {**setting, "dsu_len": dsu_len, "dsu_tgt_ratio": ratio,
               "dsu2trl": bleu_rep.groups["All"]}
        for name in ABLATION_SYSTEMS:
            row[name] = exp.system(name).score
        rows.append(row)
    return rows


def corpus_lengths(prep: Prepared) -> tuple[float, float]:
    """Mean unit-sequence length and its ratio to the mean target length."""
    return corpus_stats([prep.dsu_tokens(r.id) for r in prep.train],
                        [prep.tgt_tokens(r.translation) for r in prep.train])
