"""Transformer encoder-decoder used by every system in the recipe.

Parameters live in a flat ``name -> Tensor`` table so that checkpoints,
averaging and encoder/decoder transplant are plain dictionary operations.
Naming scheme::

    enc.conv.{0,1}.*     convolutional subsampler (filterbank input)
    enc.embed.weight     unit embedding (token input)
    enc.{i}.*            encoder layers, enc.ln_out.* final norm (pre-LN)
    adapter.{i}.*        extra encoder layer(s) stacked on a transplanted encoder
    dec.embed.weight     target embedding
    dec.{i}.*            decoder layers, dec.ln_out.* final norm (pre-LN)
    out_proj.weight      decoder output layer
    ctc_head.*           CTC projection on the last encoder layer
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

ROLES = ("fbk2dsu", "dsu2trl", "scratch", "asr_pt", "enc_init", "encdec_init", "dsu_adapter")
FT_ROLES = ("scratch", "enc_init", "encdec_init", "dsu_adapter")
PAD = 0

NEG_INF = -1e9


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    role: str
    enc_layers: int
    dec_layers: int
    d_model: int
    ffn_dim_enc: int
    ffn_dim_dec: int
    heads: int
    tgt_vocab: int
    src_vocab: int | None = None
    layernorm_style: str = "pre"
    adapter_layers: int = 0
    fbk_dim: int = 80
    conv_channels: int = 0
    ctc_vocab: int = 0
    dropout: float = 0.1
    share_embeddings: bool = False

    @property
    def token_input(self) -> bool:
        return self.role == "dsu2trl"

    def validate(self) -> "ModelConfig":
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")
        if self.d_model <= 0 or self.heads <= 0 or self.d_model % self.heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if self.layernorm_style not in ("pre", "post"):
            raise ConfigError(f"layernorm_style must be pre or post, got {self.layernorm_style!r}")
        if self.adapter_layers not in (0, 1):
            raise ConfigError("adapter_layers must be 0 or 1")
        if self.role == "dsu_adapter" and self.adapter_layers != 1:
            raise ConfigError("role dsu_adapter requires adapter_layers = 1")
        if self.role in ("enc_init", "encdec_init") and self.adapter_layers != 0:
            raise ConfigError(f"role {self.role} requires adapter_layers = 0")
        if self.role == "dsu2trl":
            if self.layernorm_style != "pre":
                raise ConfigError("role dsu2trl requires layernorm_style = pre")
            if not self.src_vocab:
                raise ConfigError("role dsu2trl requires src_vocab")
        if self.share_embeddings and (not self.token_input or self.src_vocab != self.tgt_vocab):
            raise ConfigError("share_embeddings needs a token encoder with src_vocab == tgt_vocab")
        if min(self.enc_layers, self.dec_layers) < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.tgt_vocab < 4:
            raise ConfigError("tgt_vocab must cover the reserved tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def fingerprint(self) -> bytes:
        """32-byte digest identifying the parameter layout."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def full_scale_config(role: str, tgt_vocab: int, src_vocab: int | None = None,
                 ctc_vocab: int = 0) -> ModelConfig:
    """Full-size configurations (12-6 speech models at 256/4096, 6-6 unit
    translation model at 256/2048)."""
    speech = dict(enc_layers=12, dec_layers=6, d_model=256, ffn_dim_enc=4096,
                  ffn_dim_dec=4096, heads=4, fbk_dim=80)
    if role == "dsu2trl":
        cfg = ModelConfig(role, 6, 6, 256, 2048, 2048, 4, tgt_vocab, src_vocab=src_vocab)
    elif role in ("encdec_init", "dsu_adapter"):
        cfg = ModelConfig(role, tgt_vocab=tgt_vocab, ctc_vocab=ctc_vocab,
                          adapter_layers=int(role == "dsu_adapter"),
                          **{**speech, "ffn_dim_dec": 2048})
    else:
        cfg = ModelConfig(role, tgt_vocab=tgt_vocab, ctc_vocab=ctc_vocab, **speech)
    return cfg.validate()


def desk_config(role: str, tgt_vocab: int, src_vocab: int | None = None, ctc_vocab: int = 0,
                fbk_dim: int = 16, d_model: int = 32, enc_layers: int = 2, dec_layers: int = 2,
                ffn_enc: int = 128, ffn_dec: int = 64, heads: int = 4,
                dropout: float = 0.1, share_embeddings: bool = False) -> ModelConfig:
    """Scaled-down analogue of :func:`full_scale_config` with the same size relations."""
    if role == "dsu2trl":
        cfg = ModelConfig(role, enc_layers, dec_layers, d_model, ffn_dec, ffn_dec, heads,
                          tgt_vocab, src_vocab=src_vocab, dropout=dropout,
                          share_embeddings=share_embeddings)
    else:
        small_dec = role in ("encdec_init", "dsu_adapter")
        cfg = ModelConfig(role, enc_layers, dec_layers, d_model, ffn_enc,
                          ffn_dec if small_dec else ffn_enc, heads, tgt_vocab,
                          fbk_dim=fbk_dim, ctc_vocab=ctc_vocab, dropout=dropout,
                          adapter_layers=int(role == "dsu_adapter"))
    return cfg.validate()


# -- initialisation -----------------------------------------------------------

def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _linear(params, name, d_in, d_out, seed, bias=True):
    params[f"{name}.weight"] = _glorot(_param_rng(seed, name), (d_in, d_out), d_in, d_out)
    if bias:
        params[f"{name}.bias"] = np.zeros(d_out)


def _norm(params, name, d):
    params[f"{name}.weight"] = np.ones(d)
    params[f"{name}.bias"] = np.zeros(d)


def _embedding(params, name, vocab, d, seed):
    table = _param_rng(seed, name).normal(0.0, d ** -0.5, size=(vocab, d))
    table[PAD] = 0.0
    params[f"{name}.weight"] = table


def _attn_params(params, prefix, d, seed):
    for proj in ("q", "k", "v", "o"):
        _linear(params, f"{prefix}.{proj}", d, d, seed)


def encoder_layer_params(prefix: str, d: int, ffn: int, seed: int) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    _attn_params(params, f"{prefix}.self_attn", d, seed)
    _norm(params, f"{prefix}.ln1", d)
    _linear(params, f"{prefix}.fc1", d, ffn, seed)
    _linear(params, f"{prefix}.fc2", ffn, d, seed)
    _norm(params, f"{prefix}.ln2", d)
    return params


def decoder_layer_params(prefix: str, d: int, ffn: int, seed: int) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    _attn_params(params, f"{prefix}.self_attn", d, seed)
    _norm(params, f"{prefix}.ln1", d)
    _attn_params(params, f"{prefix}.cross_attn", d, seed)
    _norm(params, f"{prefix}.ln2", d)
    _linear(params, f"{prefix}.fc1", d, ffn, seed)
    _linear(params, f"{prefix}.fc2", ffn, d, seed)
    _norm(params, f"{prefix}.ln3", d)
    return params


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    d = cfg.d_model
    params: dict[str, np.ndarray] = {}
    if cfg.token_input:
        if not cfg.share_embeddings:
            _embedding(params, "enc.embed", cfg.src_vocab, d, seed)
    else:
        ch = cfg.conv_channels or d
        for i, (c_in, c_out) in enumerate(((cfg.fbk_dim, ch), (ch, d))):
            name = f"enc.conv.{i}"
            params[f"{name}.weight"] = _glorot(_param_rng(seed, name), (c_out, c_in, 3),
                                               c_in * 3, c_out * 3)
            params[f"{name}.bias"] = np.zeros(c_out)
    for i in range(cfg.enc_layers):
        params.update(encoder_layer_params(f"enc.{i}", d, cfg.ffn_dim_enc, seed))
    for i in range(cfg.adapter_layers):
        params.update(encoder_layer_params(f"adapter.{i}", d, cfg.ffn_dim_enc, seed))
    _embedding(params, "dec.embed", cfg.tgt_vocab, d, seed)
    for i in range(cfg.dec_layers):
        params.update(decoder_layer_params(f"dec.{i}", d, cfg.ffn_dim_dec, seed))
    if cfg.layernorm_style == "pre":
        _norm(params, "enc.ln_out", d)
        _norm(params, "dec.ln_out", d)
        if cfg.adapter_layers:
            _norm(params, "adapter.ln_out", d)
    _linear(params, "out_proj", d, cfg.tgt_vocab, seed, bias=False)
    if cfg.ctc_vocab:
        _linear(params, "ctc_head", d, cfg.ctc_vocab, seed)
    return params


# -- building blocks ------------------------------------------------------------

_PE_CACHE: dict[int, np.ndarray] = {}


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    table = _PE_CACHE.get(d)
    if table is None or table.shape[0] < length:
        n = max(length, 256 if table is None else 2 * table.shape[0])
        pos = np.arange(n)[:, None]
        rate = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
        table = np.zeros((n, d))
        table[:, 0::2] = np.sin(pos * rate)
        table[:, 1::2] = np.cos(pos * rate[: d // 2])
        _PE_CACHE[d] = table
    return table[:length]


def subsampled_length(n_frames):
    """Length after the two stride-2 convolutions: ceil(ceil(T/2)/2)."""
    half = (np.asarray(n_frames) + 1) // 2
    return (half + 1) // 2


def padding_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """True at padded positions, shape (B, max_len)."""
    return np.arange(max_len)[None, :] >= np.asarray(lengths)[:, None]


class Seq2Seq:
    """Transformer encoder-decoder over a flat parameter table."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray | Tensor]):
        self.config = config.validate()
        self.params: dict[str, Tensor] = {}
        for name, value in params.items():
            data = value.data if isinstance(value, Tensor) else value
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- sub-layers ----------------------------------------------------------
    def _linear(self, x, name, bias=True):
        y = x @ self.params[f"{name}.weight"]
        return y + self.params[f"{name}.bias"] if bias else y

    def _ln(self, x, name):
        return T.layer_norm(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _attention(self, prefix, query, memory, mask, rng):
        h = self.config.heads
        bsz, lq, d = query.shape
        lk = memory.shape[1]
        dh = d // h
        q = self._linear(query, f"{prefix}.q").reshape(bsz, lq, h, dh).transpose(0, 2, 1, 3)
        k = self._linear(memory, f"{prefix}.k").reshape(bsz, lk, h, dh).transpose(0, 2, 3, 1)
        v = self._linear(memory, f"{prefix}.v").reshape(bsz, lk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.masked_fill(scores, mask, NEG_INF)
        probs = T.dropout(T.softmax(scores), self.config.dropout, rng)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, lq, d)
        return self._linear(ctx, f"{prefix}.o")

    def _ffn(self, x, prefix, rng):
        hidden = T.relu(self._linear(x, f"{prefix}.fc1"))
        return self._linear(T.dropout(hidden, self.config.dropout, rng), f"{prefix}.fc2")

    def _encoder_layer(self, x, prefix, mask, rng):
        p = self.config.dropout
        if self.config.layernorm_style == "pre":
            h = self._ln(x, f"{prefix}.ln1")
            x = x + T.dropout(self._attention(f"{prefix}.self_attn", h, h, mask, rng), p, rng)
            x = x + T.dropout(self._ffn(self._ln(x, f"{prefix}.ln2"), prefix, rng), p, rng)
            return x
        x = self._ln(x + T.dropout(self._attention(f"{prefix}.self_attn", x, x, mask, rng), p, rng),
                     f"{prefix}.ln1")
        return self._ln(x + T.dropout(self._ffn(x, prefix, rng), p, rng), f"{prefix}.ln2")

    def _decoder_layer(self, y, prefix, memory, self_mask, cross_mask, rng):
        p = self.config.dropout
        if self.config.layernorm_style == "pre":
            h = self._ln(y, f"{prefix}.ln1")
            y = y + T.dropout(self._attention(f"{prefix}.self_attn", h, h, self_mask, rng), p, rng)
            h = self._ln(y, f"{prefix}.ln2")
            y = y + T.dropout(self._attention(f"{prefix}.cross_attn", h, memory, cross_mask, rng),
                              p, rng)
            return y + T.dropout(self._ffn(self._ln(y, f"{prefix}.ln3"), prefix, rng), p, rng)
        y = self._ln(y + T.dropout(self._attention(f"{prefix}.self_attn", y, y, self_mask, rng),
                                   p, rng), f"{prefix}.ln1")
        y = self._ln(y + T.dropout(self._attention(f"{prefix}.cross_attn", y, memory, cross_mask,
                                                   rng), p, rng), f"{prefix}.ln2")
        return self._ln(y + T.dropout(self._ffn(y, prefix, rng), p, rng), f"{prefix}.ln3")

    # -- encoder ---------------------------------------------------------------
    def conv_subsample(self, frames: np.ndarray, lengths: np.ndarray | None = None):
        """(B, T, D) filterbanks -> ((B, T', d_model) Tensor, lengths T')."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ValueError("conv_subsample expects a (B, T, D) batch")
        bsz, t, dim = frames.shape
        if dim != self.config.fbk_dim:
            raise ValueError(f"feature dim {dim} does not match configured fbk_dim "
                             f"{self.config.fbk_dim}")
        lengths = np.full(bsz, t) if lengths is None else np.asarray(lengths)
        if lengths.min() < 4:
            raise ValueError(f"need at least 4 frames, got {int(lengths.min())}")
        x = T.conv1d(Tensor(frames), self["enc.conv.0.weight"], self["enc.conv.0.bias"], 2, 1)
        x = T.relu(x)
        half = (lengths + 1) // 2
        if half.min() < x.shape[1]:
            keep = (~padding_mask(half, x.shape[1]))[:, :, None].astype(np.float64)
            x = x * keep
        x = T.conv1d(x, self["enc.conv.1.weight"], self["enc.conv.1.bias"], 2, 1)
        return x, subsampled_length(lengths)

    def _embed(self, name, ids):
        ids = np.asarray(ids, dtype=np.int64)
        table = self.params[name]
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ValueError(f"token id {int(ids.max())} outside vocabulary of "
                             f"{table.shape[0]} ({name})")
        d = self.config.d_model
        x = T.embedding(table, ids) * math.sqrt(d)
        return x + sinusoidal_positions(ids.shape[1], d)[None]

    def encode(self, src, lengths=None, rng=None):
        """Run the encoder (plus adapter layers).

        ``src`` is a (B, T, D) filterbank batch or a (B, S) unit-id batch.
        Returns the final encoder states and their valid lengths.
        """
        cfg = self.config
        if cfg.token_input:
            ids = np.asarray(src, dtype=np.int64)
            lengths = np.full(ids.shape[0], ids.shape[1]) if lengths is None else np.asarray(lengths)
            x = self._embed("dec.embed.weight" if cfg.share_embeddings else "enc.embed.weight", ids)
        else:
            x, lengths = self.conv_subsample(src, lengths)
            x = x + sinusoidal_positions(x.shape[1], cfg.d_model)[None]
        x = T.dropout(x, cfg.dropout, rng)
        mask = padding_mask(lengths, x.shape[1])[:, None, None, :]
        for i in range(cfg.enc_layers):
            x = self._encoder_layer(x, f"enc.{i}", mask, rng)
        if cfg.layernorm_style == "pre":
            x = self._ln(x, "enc.ln_out")
        for i in range(cfg.adapter_layers):
            x = self._encoder_layer(x, f"adapter.{i}", mask, rng)
        if cfg.adapter_layers and cfg.layernorm_style == "pre":
            x = self._ln(x, "adapter.ln_out")
        return x, lengths

    def ctc_logits(self, enc_out: Tensor) -> Tensor:
        if not self.config.ctc_vocab:
            raise ValueError("model has no CTC head")
        return self._linear(enc_out, "ctc_head")

    # -- decoder ---------------------------------------------------------------
    def decode(self, enc_out: Tensor, enc_lengths, dec_in, rng=None) -> Tensor:
        """Teacher-forced decoder logits, shape (B, L, tgt_vocab)."""
        cfg = self.config
        ids = np.asarray(dec_in, dtype=np.int64)
        length = ids.shape[1]
        y = T.dropout(self._embed("dec.embed.weight", ids), cfg.dropout, rng)
        causal = np.triu(np.ones((length, length), dtype=bool), 1)[None, None]
        cross = padding_mask(enc_lengths, enc_out.shape[1])[:, None, None, :]
        for i in range(cfg.dec_layers):
            y = self._decoder_layer(y, f"dec.{i}", enc_out, causal, cross, rng)
        if cfg.layernorm_style == "pre":
            y = self._ln(y, "dec.ln_out")
        return self._linear(y, "out_proj", bias=False)

    def forward(self, src, src_lengths, dec_in, rng=None):
        """Returns (decoder logits, CTC logits or None, encoder lengths)."""
        enc_out, enc_lengths = self.encode(src, src_lengths, rng)
        logits = self.decode(enc_out, enc_lengths, dec_in, rng)
        ctc = self.ctc_logits(enc_out) if self.config.ctc_vocab else None
        return logits, ctc, enc_lengths


def build_model(config: ModelConfig, seed: int = 0) -> Seq2Seq:
    config.validate()
    return Seq2Seq(config, init_params(config, seed))


def conv_subsample(model: Seq2Seq, frames: np.ndarray) -> Tensor:
    """Single-utterance convenience: (T, D) -> (T', d_model)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("expected a (T, D) filterbank matrix")
    out, _ = model.conv_subsample(frames[None])
    return out.reshape(out.shape[1:])


def forward_s2s(model: Seq2Seq, enc_input, dec_input_tokens, rng=None):
    """Unbatched forward: returns (L x V_tgt decoder logits, T' x V_ctc CTC
    logits or None)."""
    src = np.asarray(enc_input)
    dec = np.asarray(dec_input_tokens, dtype=np.int64)
    logits, ctc, _ = model.forward(src[None], None, dec[None], rng)
    logits = logits.reshape(logits.shape[1:])
    if ctc is not None:
        ctc = ctc.reshape(ctc.shape[1:])
    return logits, ctc
