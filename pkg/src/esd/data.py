"""Feature files, synthetic two-domain data, batching and min-max scaling."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, DataError, DimensionError, FormatError
from .nn import Node

FEATURE_MAGIC = b"ESDF"


@dataclass
class FeatureSet:
    """One domain's worth of features as stored in a single file."""

    features: np.ndarray
    labels: np.ndarray | None = None
    K: int | None = None

    def __post_init__(self):
        self.features = nn.as_matrix(self.features)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise DimensionError(f"{self.labels.size} labels for {self.features.shape[0]} samples")
            _check_labels(self.labels, self.K)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def _check_labels(labels: np.ndarray, K: int | None) -> None:
    if labels.size and labels.min() < 0:
        raise DataError(f"negative class label {labels.min()}")
    if K is not None and labels.size and labels.max() >= K:
        raise DataError(f"class label {labels.max()} out of range for K={K}")


@dataclass
class DatasetSplit:
    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    K: int
    # evaluation only; no training path reads it
    target_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.source_features = nn.as_matrix(self.source_features)
        self.target_features = nn.as_matrix(self.target_features)
        self.source_labels = np.asarray(self.source_labels, dtype=np.int64)
        if self.source_features.shape[1] != self.target_features.shape[1]:
            raise DimensionError(
                f"source and target feature widths differ: {self.source_features.shape} vs {self.target_features.shape}"
            )
        if self.n_s < 1 or self.n_t < 1:
            raise DataError("both domains need at least one sample")
        if self.source_labels.shape != (self.n_s,):
            raise DimensionError(f"{self.source_labels.size} source labels for {self.n_s} samples")
        _check_labels(self.source_labels, self.K)
        if self.target_labels is not None:
            self.target_labels = np.asarray(self.target_labels, dtype=np.int64)
            if self.target_labels.shape != (self.n_t,):
                raise DimensionError(f"{self.target_labels.size} target labels for {self.n_t} samples")
            _check_labels(self.target_labels, self.K)

    @property
    def n_s(self) -> int:
        return self.source_features.shape[0]

    @property
    def n_t(self) -> int:
        return self.target_features.shape[0]

    @property
    def d(self) -> int:
        return self.source_features.shape[1]

    @classmethod
    def from_sets(cls, source: FeatureSet, target: FeatureSet, K: int | None = None) -> "DatasetSplit":
        if source.labels is None:
            raise DataError("source features must carry labels")
        if K is None:
            known = [k for k in (source.K, target.K) if k]
            K = max(known) if known else int(source.labels.max()) + 1
        return cls(source.features, source.labels, target.features, K, target.labels)


@dataclass
class FeatureBatch:
    features: np.ndarray
    domain: str
    labels: np.ndarray | None = None
    indices: np.ndarray | None = None

    def __len__(self):
        return self.features.shape[0]


# ---- feature files ----

def _write_binary(fs: FeatureSet) -> bytes:
    n, d = fs.features.shape
    has_labels = fs.labels is not None
    parts = [FEATURE_MAGIC, struct.pack("<IIB", n, d, int(has_labels))]
    parts.append(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())
    if has_labels:
        parts.append(np.ascontiguousarray(fs.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def _read_binary(data: bytes, K: int | None) -> FeatureSet:
    if len(data) < 13:
        raise FormatError("ESDF header truncated", len(data))
    n, d, has_labels = struct.unpack_from("<IIB", data, 4)
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels flag must be 0 or 1, got {has_labels}", 12)
    pos = 13
    need = 4 * n * d
    if len(data) < pos + need:
        raise FormatError(f"feature block truncated: expected {need} bytes for {n}x{d}", len(data))
    features = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).astype(np.float64).reshape(n, d)
    pos += need
    labels = None
    if has_labels:
        if len(data) < pos + 4 * n:
            raise FormatError(f"label block truncated: expected {4 * n} bytes", len(data))
        labels = np.frombuffer(data, dtype="<u4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after ESDF payload", pos)
    if not np.all(np.isfinite(features)):
        raise DataError("feature file contains non-finite values")
    return FeatureSet(features, labels, K)


def _fmt32(x: float) -> str:
    return str(np.float32(x))


def _write_text(fs: FeatureSet) -> bytes:
    K = fs.K if fs.K is not None else (int(fs.labels.max()) + 1 if fs.labels is not None and fs.n else 0)
    lines = [f"{fs.d},{K}"]
    for i, row in enumerate(fs.features):
        cells = [_fmt32(v) for v in row]
        if fs.labels is not None:
            cells.append(str(int(fs.labels[i])))
        lines.append(",".join(cells))
    return ("\n".join(lines) + "\n").encode("ascii")


def _read_text(data: bytes, K: int | None) -> FeatureSet:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("text feature file is not ASCII", exc.start) from None
    offset = 0
    rows: list[list[float]] = []
    labels: list[int] = []
    d = file_k = None
    for line in text.splitlines(keepends=True):
        start, offset = offset, offset + len(line)
        body = line.strip()
        if not body:
            continue
        cells = body.split(",")
        if d is None:
            try:
                d, file_k = (int(c) for c in cells)
            except ValueError:
                raise FormatError(f"header must be 'd,K', got {body!r}", start) from None
            if d < 1 or file_k < 0:
                raise FormatError(f"invalid header values d={d}, K={file_k}", start)
            continue
        if len(cells) not in (d, d + 1):
            raise FormatError(f"expected {d} or {d + 1} fields, got {len(cells)}", start)
        try:
            rows.append([float(c) for c in cells[:d]])
            if len(cells) == d + 1:
                labels.append(int(cells[d]))
        except ValueError:
            raise FormatError(f"unparseable number in line {body[:40]!r}", start) from None
    if d is None:
        raise FormatError("empty text feature file", 0)
    if labels and len(labels) != len(rows):
        raise FormatError("labels present on some samples but not others", len(data))
    features = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    if not np.all(np.isfinite(features)):
        raise DataError("feature file contains non-finite values")
    k = K if K is not None else (file_k or None)
    return FeatureSet(features, np.array(labels) if labels else None, k)


def features_from_bytes(data: bytes, K: int | None = None) -> FeatureSet:
    if data[:4] == FEATURE_MAGIC:
        return _read_binary(data, K)
    return _read_text(data, K)


def features_to_bytes(fs: FeatureSet, fmt: str = "binary") -> bytes:
    if fmt == "binary":
        return _write_binary(fs)
    if fmt == "text":
        return _write_text(fs)
    raise ConfigError(f"feature format must be 'binary' or 'text', got {fmt!r}")


def load_features(path: str | Path, K: int | None = None) -> FeatureSet:
    """Read an ESDF binary file or a ``d,K`` text file (detected by magic)."""
    return features_from_bytes(Path(path).read_bytes(), K)


def save_features(path: str | Path, fs: FeatureSet, fmt: str = "binary") -> None:
    Path(path).write_bytes(features_to_bytes(fs, fmt))


# ---- synthetic data ----

@dataclass
class SynthSpec:
    means: np.ndarray  # K x d source class means
    shift: np.ndarray | tuple[np.ndarray, np.ndarray]  # vector, or (A, b) affine map on means
    sigma: float = 1.0
    n_per_class: int = 200
    seed: int = 0

    def __post_init__(self):
        self.means = nn.as_matrix(self.means)
        if self.K < 2:
            raise ConfigError("synthetic data needs at least 2 classes")
        if self.sigma <= 0:
            raise ConfigError(f"covariance scale must be positive, got {self.sigma}")
        if self.n_per_class < 1:
            raise ConfigError("need at least one sample per class")
        gaps = [np.linalg.norm(a - b) for i, a in enumerate(self.means) for b in self.means[i + 1 :]]
        if min(gaps) == 0:
            raise ConfigError("class means must be pairwise distinct")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def target_means(self) -> np.ndarray:
        if isinstance(self.shift, tuple):
            A, b = self.shift
            return self.means @ np.asarray(A, dtype=np.float64).T + np.asarray(b, dtype=np.float64)
        return self.means + np.asarray(self.shift, dtype=np.float64).reshape(1, -1)


def blob_spec(
    K: int = 3,
    d: int = 20,
    shift_sigmas: float = 2.0,
    n_per_class: int = 200,
    seed: int = 0,
    sigma: float = 1.0,
    margin: float = 2.2,
) -> SynthSpec:
    """Axis-aligned class blobs with a translation that pushes class 0 toward class 1.

    Class ``k`` sits at ``margin * sqrt(2) * sigma`` along axis ``k`` so every
    pair of means is ``2 * margin * sigma`` apart (``margin`` sigmas to each
    decision boundary). The target domain is the source translated by
    ``shift_sigmas * sigma`` along the unit vector from mean 0 to mean 1.
    """
    if d < K:
        raise ConfigError(f"need d >= K for axis-aligned means, got d={d}, K={K}")
    means = np.zeros((K, d))
    means[np.arange(K), np.arange(K)] = margin * math.sqrt(2.0) * sigma
    direction = means[1] - means[0]
    shift = shift_sigmas * sigma * direction / np.linalg.norm(direction)
    return SynthSpec(means, shift, sigma, n_per_class, seed)


def gen_synthetic(spec: SynthSpec) -> DatasetSplit:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_per_class
    labels = np.repeat(np.arange(spec.K), n)

    def draw(means):
        return np.repeat(means, n, axis=0) + spec.sigma * rng.standard_normal((spec.K * n, spec.d))

    source = draw(spec.means)
    target = draw(spec.target_means())
    return DatasetSplit(source, labels, target, spec.K, target_labels=labels.copy())


# ---- batching ----

def _index_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]


def batches(split: DatasetSplit, batch_size: int, seed: int) -> Iterator[tuple[FeatureBatch, FeatureBatch]]:
    """Endless stream of (source, target) batch pairs.

    Each domain is reshuffled independently whenever fewer than
    ``batch_size`` unseen samples remain (the short tail is dropped). One
    epoch is ``max(n_s, n_t) // batch_size`` pairs, so the smaller domain
    cycles while the larger one is consumed once.
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be at least 2, got {batch_size}")
    if batch_size > min(split.n_s, split.n_t):
        raise ConfigError(f"batch size {batch_size} exceeds the smaller domain ({min(split.n_s, split.n_t)} samples)")
    src_seq, tgt_seq = np.random.SeedSequence(seed).spawn(2)
    src_idx = _index_batches(split.n_s, batch_size, np.random.default_rng(src_seq))
    tgt_idx = _index_batches(split.n_t, batch_size, np.random.default_rng(tgt_seq))
    for si, ti in zip(src_idx, tgt_idx):
        yield (
            FeatureBatch(split.source_features[si], "source", split.source_labels[si], si),
            FeatureBatch(split.target_features[ti], "target", None, ti),
        )


def pairs_per_epoch(split: DatasetSplit, batch_size: int) -> int:
    return max(split.n_s, split.n_t) // batch_size


# ---- normalization ----

def minmax_bounds(x) -> tuple[float, float]:
    v = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    return float(v.min()), float(v.max())


def minmax_normalize(x, bounds: tuple[float, float] | None = None):
    """Map a whole batch affinely onto [0, 1]; a constant batch maps to 0.5.

    On a tape node the bounds act as constants, so the gradient is the
    plain ``1 / (max - min)`` scale. Pass ``bounds`` to reuse previously
    measured ones.
    """
    lo, hi = bounds if bounds is not None else minmax_bounds(x)
    span = hi - lo
    if isinstance(x, Node):
        if span == 0:
            return nn.add_const(nn.scale(x, 0.0), 0.5)
        return nn.scale(nn.add_const(x, -lo), 1.0 / span)
    x = np.asarray(x, dtype=np.float64)
    if span == 0:
        return np.full_like(x, 0.5)
    return (x - lo) / span
