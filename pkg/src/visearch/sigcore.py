"""Binary signatures, Hamming distance and the score algebra.

Bit ``i`` of a signature lives in byte ``i // 8`` at position ``i % 8``
counting from the least significant bit.  Pad bits past ``nbits`` are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import RejectedInput

DEFAULT_BITS = 4096
DEFAULT_LAMBDA = 0.75


def nbytes_for(nbits: int) -> int:
    return (nbits + 7) // 8


@dataclass(frozen=True)
class BinarySignature:
    data: bytes
    nbits: int = DEFAULT_BITS

    def __post_init__(self):
        if self.nbits < 1:
            raise RejectedInput(f"signature width must be positive, got {self.nbits}")
        data = bytes(self.data)
        if len(data) != nbytes_for(self.nbits):
            raise RejectedInput(
                f"{self.nbits}-bit signature needs {nbytes_for(self.nbits)} bytes, got {len(data)}"
            )
        spare = len(data) * 8 - self.nbits
        if spare and data[-1] >> (8 - spare):
            raise RejectedInput("pad bits past the signature width must be zero")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_bits(cls, bits) -> "BinarySignature":
        bits = np.asarray(bits).astype(bool).ravel()
        packed = np.packbits(bits, bitorder="little")
        return cls(packed.tobytes(), int(bits.size))

    @classmethod
    def from_hex(cls, text: str, nbits: int | None = None) -> "BinarySignature":
        raw = bytes.fromhex(text.strip())
        return cls(raw, nbits if nbits is not None else len(raw) * 8)

    @classmethod
    def zeros(cls, nbits: int = DEFAULT_BITS) -> "BinarySignature":
        return cls(bytes(nbytes_for(nbits)), nbits)

    @classmethod
    def ones(cls, nbits: int = DEFAULT_BITS) -> "BinarySignature":
        return cls.from_bits(np.ones(nbits, dtype=bool))

    @classmethod
    def random(cls, rng: np.random.Generator, nbits: int = DEFAULT_BITS) -> "BinarySignature":
        return cls.from_bits(rng.integers(0, 2, size=nbits))

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def bits(self) -> np.ndarray:
        """0/1 array of length ``nbits``."""
        raw = np.frombuffer(self.data, dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little", count=self.nbits)

    def words(self) -> np.ndarray:
        return as_words(np.frombuffer(self.data, dtype=np.uint8)[None, :])[0]

    def hex(self) -> str:
        return self.data.hex()

    def __repr__(self):
        head = self.data[:8].hex()
        return f"BinarySignature({head}{'...' if self.nbytes > 8 else ''}, nbits={self.nbits})"


def as_words(rows: np.ndarray) -> np.ndarray:
    """View an ``(n, nbytes)`` uint8 matrix as ``(n, ceil(nbytes/8))`` uint64 words.

    Zero-copy when the row width is already a multiple of 8 and the array is
    C-contiguous; otherwise the rows are zero padded into a fresh array.
    """
    rows = np.asarray(rows, dtype=np.uint8)
    n, width = rows.shape
    if width % 8 == 0 and rows.flags.c_contiguous:
        return rows.view("<u8")
    padded = np.zeros((n, (width + 7) // 8 * 8), dtype=np.uint8)
    padded[:, :width] = rows
    return padded.view("<u8")


def hamming_words(words: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Distances from ``query`` (k words) to every row of ``words`` (n x k).

    XOR plus a per-word popcount, accumulated across the row with no early exit.
    """
    return np.bitwise_count(np.bitwise_xor(words, query)).sum(axis=1, dtype=np.int64)


def hamming(a: BinarySignature, b: BinarySignature) -> int:
    if a.nbits != b.nbits:
        raise RejectedInput(f"width mismatch: {a.nbits} vs {b.nbits} bits")
    return int(np.bitwise_count(np.bitwise_xor(a.words(), b.words())).sum())


def appearance_score(d: int, nbits: int = DEFAULT_BITS) -> float:
    """Similarity in [0, 1] from a Hamming distance; 1 means identical."""
    if nbits < 1:
        raise RejectedInput("nbits must be positive")
    if not 0 <= d <= nbits:
        raise RejectedInput(f"distance {d} outside [0, {nbits}]")
    return 1.0 - d / nbits


def _clean(text) -> str:
    return str(text).strip()


class AspectSet(frozenset):
    """Set of ``(name, value)`` pairs with surrounding whitespace trimmed."""

    def __new__(cls, pairs: Iterable[tuple[str, str]] | Mapping[str, str] = ()):
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        return super().__new__(cls, ((_clean(n), _clean(v)) for n, v in pairs))

    def names(self) -> set[str]:
        return {n for n, _ in self}

    def value_of(self, name: str) -> list[str]:
        return sorted(v for n, v in self if n == name)

    def encode(self) -> str:
        """``name=value;name=value`` with percent-escaping, sorted for stable output."""
        from urllib.parse import quote

        return ";".join(f"{quote(n, safe='')}={quote(v, safe='')}" for n, v in sorted(self))

    @classmethod
    def decode(cls, text: str) -> "AspectSet":
        from urllib.parse import unquote

        text = text.strip()
        if not text:
            return cls()
        pairs = []
        for item in text.split(";"):
            name, sep, value = item.partition("=")
            if not sep:
                raise RejectedInput(f"aspect entry {item!r} lacks '='")
            pairs.append((unquote(name), unquote(value)))
        return cls(pairs)

    def __repr__(self):
        return f"AspectSet({sorted(self)!r})"


@dataclass(frozen=True)
class AspectWeights:
    weights: Mapping[str, float] = field(
        default_factory=lambda: {"size": 3.0, "brand": 3.0, "price": 3.0}
    )
    default_weight: float = 1.0

    def __post_init__(self):
        bad = {k: w for k, w in self.weights.items() if not w > 0}
        if bad or not self.default_weight > 0:
            raise RejectedInput(f"aspect weights must be strictly positive: {bad or self.default_weight}")

    def weight(self, name: str) -> float:
        return float(self.weights.get(_clean(name), self.default_weight))

    def attach(self, aspects: Iterable[tuple[str, str]]) -> list[tuple[tuple[str, str], float]]:
        return [((n, v), self.weight(n)) for n, v in sorted(aspects)]


@dataclass(frozen=True)
class ScoringConfig:
    lam: float = DEFAULT_LAMBDA
    nbits: int = DEFAULT_BITS

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise RejectedInput(f"lambda must lie in [0, 1], got {self.lam}")
        if self.nbits < 1:
            raise RejectedInput("nbits must be positive")


def aspect_score(
    predicted: Sequence[tuple[tuple[str, str], float]],
    ground_truth: Iterable[tuple[str, str]],
) -> float:
    """Weighted fraction of predicted aspects found verbatim in ``ground_truth``.

    Empty predictions score 0.  The result is clamped to 1 so a listing that
    repeats the same aspect value cannot push the blend out of range.
    """
    if not predicted:
        return 0.0
    truth = [(_clean(n), _clean(v)) for n, v in ground_truth]
    total = 0.0
    matched = 0.0
    for (name, value), w in predicted:
        if not w > 0:
            raise RejectedInput(f"reward point for {name!r} must be positive")
        total += w
        key = (_clean(name), _clean(value))
        matched += w * sum(1 for t in truth if t == key)
    return min(1.0, matched / total)


def blended_score(s_app: float, s_asp: float, cfg: ScoringConfig = ScoringConfig()) -> float:
    for label, s in (("appearance", s_app), ("aspect", s_asp)):
        if not (0.0 <= s <= 1.0) or math.isnan(s):
            raise RejectedInput(f"{label} score {s} outside [0, 1]")
    if cfg.lam == 1.0:
        return float(s_app)
    if cfg.lam == 0.0:
        return float(s_asp)
    return cfg.lam * s_app + (1.0 - cfg.lam) * s_asp
