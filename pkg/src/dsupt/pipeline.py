"""Training machinery: data filtering, SpecAugment, the inverse square-root
schedule, Adam, checkpoints, encoder/decoder transplant and averaging."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import SeqTarget, interpolated_loss
from .nn import FT_ROLES, ModelConfig, Seq2Seq, build_model, init_params
from .tokenizer import BOS, EOS, PAD

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DSUC"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# -- data filtering -------------------------------------------------------------------

@dataclass
class FilterLimits:
    max_frames: int = 3000
    max_ssl_frames: int = 320_000
    max_tokens: int = 1024

    def __post_init__(self):
        if min(self.max_frames, self.max_ssl_frames, self.max_tokens) <= 0:
            raise ValueError("filter limits must be positive")


def filter_dataset(rows: Sequence, limits: FilterLimits,
                   ssl_frames: Callable | None = None, n_tokens: Callable | None = None) -> list:
    """Drop utterances longer than the limits.

    ``rows`` need an ``n_frames`` attribute; ``ssl_frames`` and ``n_tokens``
    map a row to its SSL-frame and token counts (skipped when not given).
    """
    kept = []
    for r in rows:
        if r.n_frames > limits.max_frames:
            continue
        if ssl_frames is not None and ssl_frames(r) > limits.max_ssl_frames:
            continue
        if n_tokens is not None and n_tokens(r) > limits.max_tokens:
            continue
        kept.append(r)
    if not kept:
        raise ValueError("filtering removed every utterance")
    return kept


# -- augmentation and schedule -----------------------------------------------------------

@dataclass
class SpecAugmentParams:
    freq_width: int = 30
    time_width: int = 40
    freq_masks: int = 2
    time_masks: int = 2


def spec_augment(fbk: np.ndarray, params: SpecAugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Zero ``freq_masks`` bands of width U[0, F] and ``time_masks`` spans of
    width U[0, T]; widths are clipped to the input size."""
    out = np.array(fbk, dtype=np.float64)
    n_t, n_f = out.shape
    for _ in range(params.freq_masks):
        w = min(int(rng.integers(0, params.freq_width + 1)), n_f)
        f0 = int(rng.integers(0, n_f - w + 1))
        out[:, f0:f0 + w] = 0.0
    for _ in range(params.time_masks):
        w = min(int(rng.integers(0, params.time_width + 1)), n_t)
        t0 = int(rng.integers(0, n_t - w + 1))
        out[t0:t0 + w, :] = 0.0
    return out


def lr_schedule(step: int, warmup: int, peak: float) -> float:
    """Linear warm-up to ``peak`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.98), eps=1e-9, clip_norm: float | None = None):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> float:
        self.t += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if scale != 1.0:
                g = g * scale
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k].data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# -- examples and batching ------------------------------------------------------------------

@dataclass
class Example:
    """One training pair.  ``src`` is a (T, D) filterbank or a 1-D unit-id
    array; ``tgt`` the decoder token ids (no BOS/EOS); ``ctc`` the CTC label
    ids, if the stage uses CTC."""
    id: str
    src: np.ndarray
    tgt: np.ndarray
    ctc: np.ndarray | None = None
    lang: str = ""

    @property
    def src_len(self) -> int:
        return int(self.src.shape[0])


@dataclass
class Batch:
    ids: list[str]
    src: np.ndarray
    src_lengths: np.ndarray
    dec_in: np.ndarray
    target: SeqTarget


def collate(examples: Sequence[Example], ctc_vocab: int = 0, augment: Callable | None = None) -> Batch:
    n = len(examples)
    max_src = max(e.src_len for e in examples)
    first = examples[0].src
    if first.ndim == 2:
        src = np.zeros((n, max_src, first.shape[1]))
        for i, e in enumerate(examples):
            feats = augment(e.src) if augment is not None else e.src
            src[i, : e.src_len] = feats
    else:
        src = np.full((n, max_src), PAD, dtype=np.int64)
        for i, e in enumerate(examples):
            src[i, : e.src_len] = e.src
    max_tgt = max(len(e.tgt) for e in examples) + 1
    dec_in = np.full((n, max_tgt), PAD, dtype=np.int64)
    dec_out = np.full((n, max_tgt), PAD, dtype=np.int64)
    for i, e in enumerate(examples):
        k = len(e.tgt)
        dec_in[i, 0] = BOS
        dec_in[i, 1:k + 1] = e.tgt
        dec_out[i, :k] = e.tgt
        dec_out[i, k] = EOS
    labels = [e.ctc for e in examples] if ctc_vocab else None
    return Batch([e.id for e in examples], src, np.array([e.src_len for e in examples]),
                 dec_in, SeqTarget(dec_out, labels, ctc_vocab))


def make_batches(examples: Sequence[Example], budget: int, rng: np.random.Generator | None = None,
                 max_sentences: int | None = None) -> list[list[Example]]:
    """Sort by source length and pack so that ``batch_size * max_len`` stays
    within ``budget``; bucket order is shuffled when ``rng`` is given."""
    order = sorted(examples, key=lambda e: (e.src_len, e.id))
    batches: list[list[Example]] = []
    cur: list[Example] = []
    for e in order:
        longest = max([e.src_len] + [x.src_len for x in cur[-1:]])
        too_big = (len(cur) + 1) * longest > budget
        too_many = max_sentences is not None and len(cur) >= max_sentences
        if cur and (too_big or too_many):
            batches.append(cur)
            cur = []
        cur.append(e)
    if cur:
        batches.append(cur)
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


# -- stage plans -----------------------------------------------------------------------------

STAGES = ("fbk2dsu_pt", "dsu2trl_pt", "asr_pt", "st_ft", "st_scratch")


@dataclass
class StagePlan:
    stage: str
    batch_budget: int
    warmup: int
    peak_lr: float
    max_steps: int
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    specaugment: bool = True
    seed: int = 0
    ckpt_interval: int = 100
    max_sentences: int | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_budget <= 0 or self.max_steps <= 0 or self.ckpt_interval <= 0:
            raise ValueError("budgets, step counts and intervals must be positive")
        if not 0 < self.warmup < self.max_steps:
            raise ValueError("warmup must lie in (0, max_steps)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# effective batch size, warm-up steps, peak learning rate, maximum training steps
FULL_SCALE_PLANS = {
    "fbk2dsu_pt": StagePlan("fbk2dsu_pt", 32_000, 25_000, 2e-3, 60_000, ckpt_interval=1000),
    "asr_pt": StagePlan("asr_pt", 32_000, 25_000, 2e-3, 60_000, ckpt_interval=1000),
    "st_ft": StagePlan("st_ft", 32_000, 25_000, 2e-3, 60_000, ckpt_interval=1000),
    "st_scratch": StagePlan("st_scratch", 32_000, 25_000, 2e-3, 60_000, ctc_weight=0.0,
                            ckpt_interval=1000),
    "dsu2trl_pt": StagePlan("dsu2trl_pt", 80_000, 10_000, 5e-4, 50_000, ctc_weight=0.0,
                            specaugment=False, ckpt_interval=1000),
}
# Recorded for completeness; the SSL-initialised baseline is not trainable here.
SSL_BASELINE_PLAN = dict(batch_budget=4_000_000, warmup=4_000, peak_lr=1e-4, max_steps=300_000)


# -- checkpoints ----------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: ModelConfig
    step: int = 0
    dev_metric: float | None = None

    @property
    def fingerprint(self) -> bytes:
        return self.config.fingerprint()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<I", CKPT_VERSION))
        buf.write(self.fingerprint)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        meta = {"config": self.config.to_dict(), "step": self.step, "dev_metric": self.dev_metric}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, expected: ModelConfig | None = None) -> "Checkpoint":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        fingerprint = raw[8:40]
        (count,) = struct.unpack_from("<I", raw, 40)
        off = 44
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            params[name] = np.frombuffer(raw, "<f8", size, off).reshape(shape).copy()
            off += 8 * size
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        config = ModelConfig.from_dict(meta["config"])
        if config.fingerprint() != fingerprint:
            raise ValueError(f"{path}: config fingerprint does not match the stored parameters")
        if expected is not None and expected.fingerprint() != fingerprint:
            raise ValueError(f"{path}: checkpoint was built for a different model configuration")
        ckpt = cls(params, config, meta.get("step", 0), meta.get("dev_metric"))
        ckpt.check_shapes()
        return ckpt

    def check_shapes(self) -> None:
        ref = init_params(self.config, 0)
        if set(ref) != set(self.params):
            missing = sorted(set(ref) - set(self.params))
            extra = sorted(set(self.params) - set(ref))
            raise ValueError(f"parameter names differ from config: missing {missing}, extra {extra}")
        for name, arr in ref.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"parameter {name}: shape {self.params[name].shape}, "
                                 f"config expects {arr.shape}")

    def to_model(self) -> Seq2Seq:
        return Seq2Seq(self.config, self.params)


def snapshot(model: Seq2Seq, step: int = 0, dev_metric: float | None = None) -> Checkpoint:
    return Checkpoint(model.state(), model.config, step, dev_metric)


def last_checkpoint(series: Sequence[Checkpoint]) -> Checkpoint:
    return max(series, key=lambda c: c.step)


def best_checkpoint(series: Sequence[Checkpoint]) -> Checkpoint:
    """Lowest dev loss; the later checkpoint wins a tie."""
    scored = [c for c in series if c.dev_metric is not None]
    if not scored:
        raise ValueError("no checkpoint carries a dev metric")
    return min(scored, key=lambda c: (c.dev_metric, -c.step))


def average_checkpoints(series: Sequence[Checkpoint], n: int = 5) -> Checkpoint:
    """Elementwise mean of the last ``n`` checkpoints (by step)."""
    if len(series) < n:
        raise ValueError(f"need {n} checkpoints to average, got {len(series)}")
    chosen = sorted(series, key=lambda c: c.step)[-n:]
    fp = chosen[0].fingerprint
    if any(c.fingerprint != fp for c in chosen):
        raise ValueError("cannot average checkpoints with different config fingerprints")
    params = {}
    for name in chosen[0].params:
        stack = np.sort(np.stack([c.params[name] for c in chosen]), axis=0)
        params[name] = stack[0] + ((stack - stack[0]) / n).sum(axis=0)
    return Checkpoint(params, chosen[0].config, chosen[-1].step, None)


# -- transplant -------------------------------------------------------------------------------------

TRANSPLANT_MODES = ("enc_init", "encdec_init", "dsu_adapter")


def _copy(dst: dict, src: dict, prefixes: tuple[str, ...]) -> list[str]:
    copied = []
    for name, value in src.items():
        if not name.startswith(prefixes):
            continue
        if name not in dst:
            raise ValueError(f"parameter {name} has no counterpart in the new model")
        if dst[name].shape != value.shape:
            raise ValueError(f"parameter {name}: source shape {value.shape} does not match "
                             f"target shape {dst[name].shape}")
        dst[name] = value.copy()
        copied.append(name)
    return copied


def transplant(enc_src: Checkpoint, dec_src: Checkpoint | None, mode: str, seed: int = 0,
               tgt_vocab: int | None = None, ctc_vocab: int = 0,
               dropout: float | None = None) -> Seq2Seq:
    """Initialise a speech-translation model from pretrained parts.

    ``enc_init`` copies the speech encoder only; ``encdec_init`` also copies
    the decoder and its output layer from ``dec_src``; ``dsu_adapter`` does the
    same and appends one fresh encoder layer.  The CTC head is always new.
    """
    if mode not in TRANSPLANT_MODES:
        raise ValueError(f"unknown transplant mode {mode!r}")
    ec = enc_src.config
    if ec.token_input:
        raise ValueError("encoder source must take filterbank input")
    if mode == "enc_init":
        if tgt_vocab is None:
            raise ValueError("enc_init needs the target vocabulary size")
        dec_layers, ffn_dec, vocab = ec.dec_layers, ec.ffn_dim_enc, tgt_vocab
    else:
        if dec_src is None:
            raise ValueError(f"{mode} needs a decoder source checkpoint")
        dc = dec_src.config
        if dc.d_model != ec.d_model:
            raise ValueError(f"d_model differs: encoder {ec.d_model}, decoder {dc.d_model}")
        if tgt_vocab is not None and tgt_vocab != dc.tgt_vocab:
            raise ValueError(f"target vocabulary {tgt_vocab} differs from decoder source "
                             f"{dc.tgt_vocab}")
        if dc.heads != ec.heads:
            raise ValueError(f"attention heads differ: encoder {ec.heads}, decoder {dc.heads}")
        if dc.layernorm_style != ec.layernorm_style:
            raise ValueError("encoder and decoder sources use different layer-norm styles")
        dec_layers, ffn_dec, vocab = dc.dec_layers, dc.ffn_dim_dec, dc.tgt_vocab
    cfg = ModelConfig(mode, ec.enc_layers, dec_layers, ec.d_model, ec.ffn_dim_enc, ffn_dec,
                      ec.heads, vocab, layernorm_style=ec.layernorm_style,
                      adapter_layers=int(mode == "dsu_adapter"), fbk_dim=ec.fbk_dim,
                      conv_channels=ec.conv_channels, ctc_vocab=ctc_vocab,
                      dropout=ec.dropout if dropout is None else dropout).validate()
    params = init_params(cfg, seed)
    _copy(params, enc_src.params, ("enc.",))
    if mode != "enc_init":
        _copy(params, dec_src.params, ("dec.", "out_proj."))
    return Seq2Seq(cfg, params)


# -- training ---------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    losses: list[float] = field(default_factory=list)


def batch_loss(model: Seq2Seq, batch: Batch, plan: StagePlan, rng=None):
    logits, ctc_logits, enc_len = model.forward(batch.src, batch.src_lengths, batch.dec_in, rng)
    lam = plan.ctc_weight if model.config.ctc_vocab else 0.0
    return interpolated_loss(logits, ctc_logits, batch.target, lam, plan.label_smoothing, enc_len)


def dev_loss(model: Seq2Seq, dev: Sequence[Example], plan: StagePlan, budget: int | None = None) -> float:
    """Token-mean label-smoothed decoder loss on held-out data (no dropout)."""
    if not dev:
        return float("nan")
    total, count = 0.0, 0
    with T.no_grad():
        for chunk in make_batches(dev, budget or plan.batch_budget):
            batch = collate(chunk)
            loss, _ = interpolated_loss(model.forward(batch.src, batch.src_lengths, batch.dec_in)[0],
                                        None, batch.target, 0.0, plan.label_smoothing)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / count


def train_stage(plan: StagePlan, model: Seq2Seq, train: Sequence[Example],
                dev: Sequence[Example] = (), specaug: SpecAugmentParams | None = None) -> TrainResult:
    """Adam under the inverse square-root schedule; a checkpoint (with dev
    loss) every ``plan.ckpt_interval`` steps and at the final step."""
    if not train:
        raise ValueError("no training data")
    rng = np.random.default_rng(plan.seed)
    opt = Adam(model.params, clip_norm=plan.clip_norm)
    ctc_vocab = model.config.ctc_vocab if plan.ctc_weight > 0 else 0
    use_aug = plan.specaugment and not model.config.token_input
    params = specaug or SpecAugmentParams()
    augment = (lambda f: spec_augment(f, params, rng)) if use_aug else None
    series: list[Checkpoint] = []
    losses: list[float] = []
    step = 0
    while step < plan.max_steps:
        for chunk in make_batches(train, plan.batch_budget, rng, plan.max_sentences):
            step += 1
            batch = collate(chunk, ctc_vocab, augment)
            loss, _ = batch_loss(model, batch, plan, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step}, batch {batch.ids}")
            model.zero_grad()
            T.backward(loss)
            opt.step(lr_schedule(step, plan.warmup, plan.peak_lr))
            losses.append(value)
            if step % plan.ckpt_interval == 0 or step == plan.max_steps:
                metric = dev_loss(model, dev, plan) if dev else None
                series.append(snapshot(model, step, metric))
                log.info("%s step %d loss %.4f dev %s", plan.stage, step, value, metric)
            if step >= plan.max_steps:
                break
    return TrainResult(series, losses)


def split_dev(items: Sequence, fraction: float = 0.05, seed: int = 0, key=lambda r: r.id):
    """Seeded held-out split; returns (train, dev)."""
    ordered = sorted(items, key=key)
    n_dev = max(1, int(round(len(ordered) * fraction))) if fraction > 0 else 0
    perm = np.random.default_rng(seed).permutation(len(ordered))
    dev_idx = set(perm[:n_dev].tolist())
    train = [r for i, r in enumerate(ordered) if i not in dev_idx]
    dev = [r for i, r in enumerate(ordered) if i in dev_idx]
    return train, dev


def fresh_model(config: ModelConfig, seed: int) -> Seq2Seq:
    return build_model(config, seed)


def with_seed(plan: StagePlan, seed: int) -> StagePlan:
    return replace(plan, seed=seed)
