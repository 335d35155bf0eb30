"""Surrogate for the two-headed vision model.

One forward pass maps a feature vector to a binary semantic hash (a sigmoid
layer thresholded at 0.5) and to a ranked list of leaf categories with softmax
confidences.

Projection weights are regenerated from ``(seed, nbits, dim)`` and never
stored.  The generator is fixed so index files are reproducible:

* bit generator: PCG64 (numpy's ``PCG64(seed)``), raw 64-bit outputs;
* uniforms: ``u = ((raw >> 11) + 1) * 2**-53``, which lies in (0, 1];
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)``, emitting
  ``sqrt(-2 ln u1) cos(2 pi u2)`` then ``sqrt(-2 ln u1) sin(2 pi u2)``;
* the weight matrix is filled row-major, ``nbits`` rows of ``dim`` values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import ConfigError, CorruptionError, RejectedInput
from .sigcore import DEFAULT_BITS, BinarySignature, nbytes_for

DEFAULT_DIM = 128

PROJECTOR_MAGIC = b"HMPJ"
PROJECTOR_LAYOUT = struct.Struct("<4sHQII")


def standard_normals(seed: int, count: int) -> np.ndarray:
    """``count`` standard normal draws from the documented PCG64 + Box-Muller stream."""
    pairs = (count + 1) // 2
    raw = np.random.PCG64(seed).random_raw(2 * pairs).astype(np.uint64)
    u = ((raw >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:count]


@dataclass(frozen=True)
class HashProjector:
    seed: int
    nbits: int = DEFAULT_BITS
    dim: int = DEFAULT_DIM
    version: int = 1

    def __post_init__(self):
        if self.nbits < 1 or self.dim < 1:
            raise RejectedInput(f"bad projector shape {self.nbits}x{self.dim}")
        if not 0 <= self.seed < 2**64:
            raise RejectedInput("seed must fit in 64 bits")
        if not 0 <= self.version < 2**16:
            raise RejectedInput("model version must fit in 16 bits")

    @cached_property
    def weights(self) -> np.ndarray:
        w = standard_normals(self.seed, self.nbits * self.dim).reshape(self.nbits, self.dim)
        w.flags.writeable = False
        return w

    @cached_property
    def bias(self) -> np.ndarray:
        b = np.zeros(self.nbits)
        b.flags.writeable = False
        return b

    @property
    def nbytes(self) -> int:
        return nbytes_for(self.nbits)

    def to_bytes(self) -> bytes:
        return PROJECTOR_LAYOUT.pack(PROJECTOR_MAGIC, self.version, self.seed, self.nbits, self.dim)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HashProjector":
        if len(raw) != PROJECTOR_LAYOUT.size:
            raise CorruptionError(f"projector descriptor must be {PROJECTOR_LAYOUT.size} bytes")
        magic, version, seed, nbits, dim = PROJECTOR_LAYOUT.unpack(raw)
        if magic != PROJECTOR_MAGIC:
            raise CorruptionError("bad projector magic")
        return cls(seed=seed, nbits=nbits, dim=dim, version=version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "HashProjector":
        return cls.from_bytes(Path(path).read_bytes())


def _check_features(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise RejectedInput(f"feature dimension {x.shape[-1]} != projector dimension {dim}")
    if not np.all(np.isfinite(x)):
        raise RejectedInput("feature vectors must be finite")
    return x


def extract_hash(x, p: HashProjector) -> BinarySignature:
    x = _check_features(x, p.dim)
    if x.ndim != 1:
        raise RejectedInput("extract_hash takes a single vector; use extract_hashes for batches")
    # sigmoid(z) > 0.5 exactly when z > 0; ties at 0 give a zero bit
    bits = (p.weights @ x + p.bias) > 0
    return BinarySignature.from_bits(bits)


def extract_hashes(X, p: HashProjector, batch: int = 4096) -> np.ndarray:
    """Hash each row of ``X``; returns an ``(n, nbytes)`` uint8 matrix."""
    X = _check_features(np.atleast_2d(X), p.dim)
    out = np.empty((X.shape[0], p.nbytes), dtype=np.uint8)
    for lo in range(0, X.shape[0], batch):
        z = X[lo : lo + batch] @ p.weights.T + p.bias
        out[lo : lo + batch] = np.packbits(z > 0, axis=1, bitorder="little")
    return out


@dataclass(frozen=True)
class AbsoluteTopN:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise RejectedInput("N must be at least 1")


@dataclass(frozen=True)
class Cumulative:
    n_max: int
    threshold: float = 0.95

    def __post_init__(self):
        if self.n_max < 1:
            raise RejectedInput("N must be at least 1")
        if not 0.0 < self.threshold <= 1.0:
            raise RejectedInput("cumulative threshold must lie in (0, 1]")


PredictionMode = Union[AbsoluteTopN, Cumulative]


@dataclass(frozen=True)
class CategoryPrediction:
    ranked: tuple[tuple[int, float], ...]

    @property
    def categories(self) -> list[int]:
        return [c for c, _ in self.ranked]

    def __len__(self):
        return len(self.ranked)


class CategoryModel:
    """Nearest-centroid classifier with softmax over negative squared distance."""

    def __init__(self, centroids: Mapping[int, Iterable[float]], temperature: float = 1.0):
        if not centroids:
            raise ConfigError("category model needs at least one category")
        if not temperature > 0:
            raise ConfigError("temperature must be positive")
        ids = sorted(int(c) for c in centroids)
        mat = np.array([np.asarray(centroids[c], dtype=np.float64) for c in ids])
        if mat.ndim != 2:
            raise ConfigError("centroids must share one dimension")
        self.category_ids = np.array(ids, dtype=np.int64)
        self.centroids = mat
        self.temperature = float(temperature)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __len__(self):
        return len(self.category_ids)

    def probabilities(self, X) -> np.ndarray:
        """Softmax confidences, one row per query, columns in ``category_ids`` order."""
        X = _check_features(np.atleast_2d(X), self.dim)
        # direct differences keep equidistant centroids exactly tied
        sq = np.empty((X.shape[0], len(self)))
        step = max(1, 2**22 // (len(self) * self.dim))
        for lo in range(0, X.shape[0], step):
            diff = X[lo : lo + step, None, :] - self.centroids[None, :, :]
            sq[lo : lo + step] = np.einsum("ijk,ijk->ij", diff, diff)
        logits = -sq / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def rank(self, probs: np.ndarray) -> np.ndarray:
        """Column order by descending confidence, ties by ascending category id."""
        return np.lexsort((np.broadcast_to(self.category_ids, probs.shape), -probs), axis=-1)


def truncate(ranked: list[tuple[int, float]], mode: PredictionMode) -> list[tuple[int, float]]:
    if isinstance(mode, AbsoluteTopN):
        return ranked[: mode.n]
    out, acc = [], 0.0
    for cat, conf in ranked[: mode.n_max]:
        out.append((cat, conf))
        acc += conf
        if acc >= mode.threshold:
            break
    return out


def predict_categories(x, m: CategoryModel, mode: PredictionMode) -> CategoryPrediction:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise RejectedInput("predict_categories takes a single vector")
    probs = m.probabilities(x)[0]
    order = m.rank(probs)
    ranked = [(int(m.category_ids[j]), float(probs[j])) for j in order]
    return CategoryPrediction(tuple(truncate(ranked, mode)))


def bit_balance(signatures) -> np.ndarray:
    """Fraction of signatures with each bit set.

    Accepts a sequence of ``BinarySignature`` or an ``(n, nbytes)`` uint8
    matrix plus implied width ``nbytes * 8``.
    """
    if isinstance(signatures, np.ndarray):
        rows, nbits = signatures, signatures.shape[1] * 8
    else:
        sigs = list(signatures)
        if not sigs:
            raise RejectedInput("bit_balance needs at least one signature")
        nbits = sigs[0].nbits
        if any(s.nbits != nbits for s in sigs):
            raise RejectedInput("signatures must share one width")
        rows = np.frombuffer(b"".join(s.data for s in sigs), dtype=np.uint8).reshape(len(sigs), -1)
    if rows.shape[0] == 0:
        raise RejectedInput("bit_balance needs at least one signature")
    counts = np.zeros(nbits, dtype=np.int64)
    for lo in range(0, rows.shape[0], 2048):
        bits = np.unpackbits(rows[lo : lo + 2048], axis=1, bitorder="little", count=nbits)
        counts += bits.sum(axis=0, dtype=np.int64)
    return counts / rows.shape[0]


def balanced_share(fractions: np.ndarray, lo: float = 0.45, hi: float = 0.55) -> float:
    """Share of bits whose activation fraction falls in ``[lo, hi]``."""
    return float(np.mean((fractions >= lo) & (fractions <= hi)))


@dataclass
class SurrogateModel:
    """Both heads behind one call, like the shared-trunk network they stand in for."""

    projector: HashProjector
    categories: CategoryModel

    def forward(self, x, mode: PredictionMode) -> tuple[BinarySignature, CategoryPrediction]:
        return extract_hash(x, self.projector), predict_categories(x, self.categories, mode)
