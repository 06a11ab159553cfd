"""Discrete speech units: feature files, manifests and mini-batch K-means."""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FEAT_MAGIC = b"DSUF"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIII")
MANIFEST_FIELDS = ("id", "feat_path", "fbk_path", "n_frames", "transcript", "translation", "lang")


# -- feature files ---------------------------------------------------------------

def write_features(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValueError("feature matrix must be T x D with T >= 1")
    if not np.isfinite(matrix).all():
        raise ValueError(f"non-finite values in features for {path}")
    t, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, t, d))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_feature_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        magic, version, t, d = _FEAT_HEADER.unpack(fh.read(_FEAT_HEADER.size))
    if magic != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file (magic {magic!r})")
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    return t, d


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, t, d = _FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file (magic {magic!r})")
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=_FEAT_HEADER.size)
    if body.size != t * d:
        raise ValueError(f"{path}: expected {t * d} values, found {body.size}")
    return body.reshape(t, d).astype(np.float64)


# -- manifests ---------------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    feat_path: str
    fbk_path: str
    n_frames: int
    transcript: str
    translation: str
    lang: str
    root: Path = field(default=Path("."), repr=False, compare=False)

    def ssl_file(self) -> Path:
        return self.root / self.feat_path

    def fbk_file(self) -> Path:
        return self.root / self.fbk_path


def read_manifest(path) -> list[Utterance]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: bad manifest header {header}")
        rows = []
        for rec in reader:
            if len(rec) != len(MANIFEST_FIELDS):
                raise ValueError(f"{path}: malformed row {rec}")
            rows.append(Utterance(rec[0], rec[1], rec[2], int(rec[3]), rec[4], rec[5], rec[6],
                                  root=path.parent))
    return rows


def write_manifest(path, rows: Iterable[Utterance]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("\t".join(MANIFEST_FIELDS) + "\n")
        for r in rows:
            fh.write("\t".join([r.id, r.feat_path, r.fbk_path, str(r.n_frames), r.transcript,
                                r.translation, r.lang]) + "\n")


# -- K-means --------------------------------------------------------------------------

@dataclass
class FeatureSequence:
    utt_id: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError(f"{self.utt_id}: features must be T x D with T >= 1")
        if not np.isfinite(self.matrix).all():
            raise ValueError(f"{self.utt_id}: non-finite features")


@dataclass
class DsuSequence:
    utt_id: str
    units: list[int]


@dataclass
class KmeansModel:
    centroids: np.ndarray
    trained_on: int
    inertia_history: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        np.savez(path, centroids=self.centroids, trained_on=self.trained_on)

    @classmethod
    def load(cls, path) -> "KmeansModel":
        with np.load(path) as z:
            return cls(z["centroids"].copy(), int(z["trained_on"]))


def _nearest(x: np.ndarray, centroids: np.ndarray, chunk: int = 2048):
    """Index of and squared distance to the nearest centroid; ties resolve to
    the lowest index."""
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for start in range(0, len(x), chunk):
        diff = x[start:start + chunk, None, :] - centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        idx = d2.argmin(axis=1)
        labels[start:start + chunk] = idx
        dist[start:start + chunk] = d2[np.arange(len(idx)), idx]
    return labels, dist


def inertia(samples: np.ndarray, centroids: np.ndarray) -> float:
    return float(_nearest(np.asarray(samples, dtype=np.float64), centroids)[1].sum())


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator, attempts: int = 3) -> np.ndarray:
    for _ in range(attempts):
        chosen = [int(rng.integers(len(x)))]
        closest = ((x - x[chosen[0]]) ** 2).sum(axis=1)
        for _ in range(1, k):
            total = closest.sum()
            if total <= 0.0:
                break
            nxt = int(rng.choice(len(x), p=closest / total))
            chosen.append(nxt)
            closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(axis=1))
        if len(chosen) == k:
            return x[chosen].copy()
    raise ValueError(f"cannot seed {k} distinct centroids: samples have fewer distinct points")


def kmeans_fit(samples, k: int, batch_size: int | None = None, iters: int = 100, seed: int = 0,
               reassign_ratio: float = 0.01, track_inertia: bool = False,
               n_init: int = 1) -> KmeansModel:
    """Mini-batch K-means with K-means++ seeding.

    Each centroid keeps a running count of the points it absorbed and moves
    by ``(x - centroid) / count`` per point.  Clusters that receive no point
    in a batch while holding fewer than ``reassign_ratio`` of the largest
    count are moved onto the batch points farthest from their centroids.
    With ``n_init > 1`` the fit restarts from fresh seedings and the run with
    the lowest final inertia is kept.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be an N x D matrix")
    n = len(x)
    if k < 2:
        raise ValueError("K must be at least 2")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of samples N={n}")
    batch_size = n if batch_size is None else int(batch_size)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, N={n}]")
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        model = _fit_once(x, k, batch_size, iters, rng, reassign_ratio, track_inertia)
        score = inertia(x, model.centroids)
        if best is None or score < best[0]:
            best = (score, model)
    return best[1]


def _fit_once(x, k, batch_size, iters, rng, reassign_ratio, track_inertia) -> KmeansModel:
    n = len(x)
    centroids = kmeans_plus_plus(x, k, rng)
    counts = np.zeros(k)
    history: list[float] = []
    full = batch_size == n
    for _ in range(iters):
        batch = x if full else x[np.sort(rng.choice(n, batch_size, replace=False))]
        labels, dist = _nearest(batch, centroids)
        hits = np.bincount(labels, minlength=k)
        starving = np.flatnonzero((hits == 0) & (counts <= reassign_ratio * counts.max()))
        if starving.size:
            far = np.argsort(-dist, kind="stable")[: starving.size]
            for c, idx in zip(starving, far):
                centroids[c] = batch[idx]
                counts[c] = 0.0
                labels[idx] = c
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, batch)
        got = np.bincount(labels, minlength=k).astype(np.float64)
        moved = got > 0
        counts[moved] += got[moved]
        centroids[moved] += (sums[moved] - got[moved, None] * centroids[moved]) / counts[moved, None]
        if track_inertia:
            history.append(inertia(x, centroids))
    return KmeansModel(centroids, n, history)


def kmeans_assign(model: KmeansModel, features) -> DsuSequence:
    """Map every frame to its nearest centroid (squared Euclidean)."""
    if not isinstance(features, FeatureSequence):
        features = FeatureSequence("", features)
    if features.matrix.shape[1] != model.dim:
        raise ValueError(f"{features.utt_id}: feature dim {features.matrix.shape[1]} does not "
                         f"match centroid dim {model.dim}")
    labels, _ = _nearest(features.matrix, model.centroids)
    return DsuSequence(features.utt_id, labels.tolist())


# -- clustering pool ---------------------------------------------------------------------

# Clustering pool at full scale: utterances drawn per language.
KMEANS_SAMPLING_GROUPS = {
    "1k": ("ar", "cy", "et", "id", "ja", "lv", "mn", "sl", "sv", "ta", "tr"),
    "3k": ("nl", "pt", "ru", "zh"),
    "12.5k": ("ca", "de", "es", "fa", "fr", "it"),
}
KMEANS_SAMPLING_QUOTAS = {"1k": 1000, "3k": 3000, "12.5k": 12500}


def pool_size(groups: Mapping[str, Sequence[str]], quotas: Mapping[str, int]) -> int:
    """Number of utterances ``sample_training_pool`` draws."""
    return sum(int(quotas[g]) * len(langs) for g, langs in groups.items())


def sample_training_pool(manifest: Sequence[Utterance], groups: Mapping[str, Sequence[str]],
                         quotas: Mapping[str, int], seed: int = 0):
    """Draw ``quotas[group]`` utterances from every language of each group and
    stack their SSL frames.  Returns (sample matrix, selected utterance ids)."""
    by_lang: dict[str, list[Utterance]] = {}
    for utt in manifest:
        by_lang.setdefault(utt.lang, []).append(utt)
    rng = np.random.default_rng(seed)
    chosen: list[Utterance] = []
    for group, langs in groups.items():
        pool = [u for lang in langs for u in by_lang.get(lang, [])]
        if not pool:
            raise ValueError(f"group {group!r} has no utterances (languages: {list(langs)})")
        quota = int(quotas[group])
        for lang in langs:
            rows = sorted(by_lang.get(lang, []), key=lambda u: u.id)
            if quota > len(rows):
                raise ValueError(f"group {group!r}: quota {quota} exceeds the {len(rows)} "
                                 f"utterances of language {lang!r}")
            picks = np.sort(rng.choice(len(rows), quota, replace=False))
            chosen.extend(rows[i] for i in picks)
    if not chosen:
        raise ValueError("empty clustering pool")
    matrix = np.concatenate([read_features(u.ssl_file()) for u in chosen], axis=0)
    return matrix, [u.id for u in chosen]


def pool_hash(matrix: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(matrix, dtype="<f8").tobytes()).hexdigest()
