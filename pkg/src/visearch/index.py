"""Per-category index files and in-memory partitions.

File layout, little-endian::

    header (32 bytes)
        magic           8s   b"EBVSIDX1"
        format_version  u32
        category_id     u32
        hash_bytes      u32
        record_count    u64
        model_version   u32
    record_count records, each
        listing_id      u64
        signature       hash_bytes

Files live at ``<root>/<model_version>/<category_id>.idx``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptionError, RejectedInput
from .sigcore import DEFAULT_BITS, BinarySignature, as_words, nbytes_for

MAGIC = b"EBVSIDX1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIIQI")
HEADER_SIZE = HEADER.size
ID_BYTES = 8

assert HEADER_SIZE == 32


def record_stride(hash_bytes: int) -> int:
    return ID_BYTES + hash_bytes


def storage_bytes(n_records: int, nbits: int = DEFAULT_BITS) -> int:
    return n_records * record_stride(nbytes_for(nbits))


def float_vector_bytes(dim: int = 8192, itemsize: int = 4) -> int:
    return dim * itemsize


def storage_reduction(nbits: int = DEFAULT_BITS, dim: int = 8192) -> float:
    """Fractional saving of a packed signature over a float32 feature vector."""
    return 1.0 - nbytes_for(nbits) / float_vector_bytes(dim)


@dataclass(frozen=True)
class IndexFileHeader:
    category_id: int
    record_count: int
    hash_bytes: int = nbytes_for(DEFAULT_BITS)
    model_version: int = 1
    format_version: int = FORMAT_VERSION
    magic: bytes = MAGIC

    def pack(self) -> bytes:
        return HEADER.pack(
            self.magic,
            self.format_version,
            self.category_id,
            self.hash_bytes,
            self.record_count,
            self.model_version,
        )

    @classmethod
    def unpack(cls, raw: bytes, path=None) -> "IndexFileHeader":
        if len(raw) < HEADER_SIZE:
            raise CorruptionError("truncated header", path)
        magic, fmt, cat, hb, count, ver = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise CorruptionError("bad magic", path)
        if fmt != FORMAT_VERSION:
            raise CorruptionError(f"unsupported format version {fmt}", path)
        if hb == 0:
            raise CorruptionError("zero hash width", path)
        return cls(category_id=cat, record_count=count, hash_bytes=hb, model_version=ver)

    @property
    def stride(self) -> int:
        return record_stride(self.hash_bytes)


@dataclass(frozen=True, eq=False)
class CategoryPartition:
    category_id: int
    listing_ids: np.ndarray
    signatures: np.ndarray
    partition_index: int = 0
    nbits: int = field(default=0)

    def __post_init__(self):
        ids = np.ascontiguousarray(self.listing_ids, dtype=np.uint64)
        sigs = np.ascontiguousarray(self.signatures, dtype=np.uint8)
        if sigs.ndim != 2 or sigs.shape[0] != ids.shape[0]:
            raise RejectedInput(
                f"signature matrix shape {sigs.shape} does not match {ids.shape[0]} listing ids"
            )
        if ids.size > 1 and not np.all(ids[1:] > ids[:-1]):
            raise RejectedInput("listing ids must be strictly ascending within a partition")
        nbits = self.nbits or sigs.shape[1] * 8
        if nbytes_for(nbits) != sigs.shape[1]:
            raise RejectedInput(f"{nbits} bits do not fit a {sigs.shape[1]}-byte record")
        ids.flags.writeable = False
        sigs.flags.writeable = False
        object.__setattr__(self, "listing_ids", ids)
        object.__setattr__(self, "signatures", sigs)
        object.__setattr__(self, "nbits", nbits)

    @classmethod
    def from_records(
        cls,
        category_id: int,
        records: Sequence[tuple[int, BinarySignature]],
        partition_index: int = 0,
        nbits: int | None = None,
    ) -> "CategoryPartition":
        if records:
            widths = {sig.nbits for _, sig in records}
            if len(widths) != 1:
                raise RejectedInput(f"mixed signature widths {sorted(widths)}")
            nbits = widths.pop()
        nbits = nbits or DEFAULT_BITS
        ids = np.array([lid for lid, _ in records], dtype=np.uint64)
        sigs = np.frombuffer(b"".join(sig.data for _, sig in records), dtype=np.uint8)
        return cls(category_id, ids, sigs.reshape(len(records), nbytes_for(nbits)), partition_index, nbits)

    @classmethod
    def empty(cls, category_id: int, nbits: int = DEFAULT_BITS, partition_index: int = 0):
        return cls(
            category_id,
            np.zeros(0, dtype=np.uint64),
            np.zeros((0, nbytes_for(nbits)), dtype=np.uint8),
            partition_index,
            nbits,
        )

    def __len__(self):
        return int(self.listing_ids.shape[0])

    @property
    def hash_bytes(self) -> int:
        return int(self.signatures.shape[1])

    @cached_property
    def words(self) -> np.ndarray:
        return as_words(self.signatures)

    def records(self) -> list[tuple[int, BinarySignature]]:
        return [
            (int(lid), BinarySignature(row.tobytes(), self.nbits))
            for lid, row in zip(self.listing_ids, self.signatures)
        ]

    def body_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=_record_dtype(self.hash_bytes))
        rec["id"] = self.listing_ids
        rec["sig"] = self.signatures
        return rec.tobytes()

    def same_records(self, other: "CategoryPartition") -> bool:
        return (
            self.category_id == other.category_id
            and np.array_equal(self.listing_ids, other.listing_ids)
            and np.array_equal(self.signatures, other.signatures)
        )


def _record_dtype(hash_bytes: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("sig", "u1", (hash_bytes,))])


def index_path(root, model_version: int, category_id: int) -> Path:
    return Path(root) / str(model_version) / f"{category_id}.idx"


def _atomic_write(path: Path, chunks: Iterable[bytes]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    written = 0
    with open(tmp, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
            written += len(chunk)
    os.replace(tmp, path)
    return written


def write_partition(partition: CategoryPartition, path, model_version: int = 1) -> int:
    header = IndexFileHeader(
        category_id=partition.category_id,
        record_count=len(partition),
        hash_bytes=partition.hash_bytes,
        model_version=model_version,
    )
    return _atomic_write(Path(path), [header.pack(), partition.body_bytes()])


def write_index(
    category_id: int,
    records: Sequence[tuple[int, BinarySignature]],
    path,
    model_version: int = 1,
    nbits: int = DEFAULT_BITS,
) -> int:
    ids = [lid for lid, _ in records]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise RejectedInput("records must be sorted by listing id with no duplicates")
    if any(not 0 <= lid < 2**64 for lid in ids):
        raise RejectedInput("listing ids must fit in u64")
    part = CategoryPartition.from_records(category_id, records, nbits=nbits)
    return write_partition(part, path, model_version)


def read_header(path) -> IndexFileHeader:
    with open(path, "rb") as fh:
        return IndexFileHeader.unpack(fh.read(HEADER_SIZE), path)


def read_index(path, nbits: int | None = None) -> tuple[IndexFileHeader, CategoryPartition]:
    path = Path(path)
    raw = path.read_bytes()
    header = IndexFileHeader.unpack(raw, path)
    body = memoryview(raw)[HEADER_SIZE:]
    if len(body) % header.stride:
        raise CorruptionError("body length not a multiple of record stride", path)
    if len(body) // header.stride != header.record_count:
        raise CorruptionError(
            f"record count {header.record_count} does not match body length "
            f"({len(body) // header.stride} records)",
            path,
        )
    rec = np.frombuffer(body, dtype=_record_dtype(header.hash_bytes))
    ids = rec["id"].copy()
    if ids.size > 1 and not np.all(ids[1:] > ids[:-1]):
        raise CorruptionError("listing ids not strictly ascending", path)
    nbits = nbits or header.hash_bytes * 8
    if nbytes_for(nbits) != header.hash_bytes:
        raise CorruptionError(f"{nbits}-bit width disagrees with hash_bytes={header.hash_bytes}", path)
    part = CategoryPartition(header.category_id, ids, rec["sig"].copy(), 0, nbits)
    return header, part


def concat_index_files(parts: Sequence, out_path) -> IndexFileHeader:
    """Join index files for one category under a single summed header.

    Inputs must agree on category, width and model version and be given in
    partition order.
    """
    headers = [read_header(p) for p in parts]
    if not headers:
        raise RejectedInput("nothing to concatenate")
    first = headers[0]
    for h, p in zip(headers, parts):
        if (h.category_id, h.hash_bytes, h.model_version) != (
            first.category_id,
            first.hash_bytes,
            first.model_version,
        ):
            raise RejectedInput(f"{p} does not match the first file's category/width/version")
    merged = IndexFileHeader(
        category_id=first.category_id,
        record_count=sum(h.record_count for h in headers),
        hash_bytes=first.hash_bytes,
        model_version=first.model_version,
    )

    def chunks():
        yield merged.pack()
        for p, h in zip(parts, headers):
            body = Path(p).read_bytes()[HEADER_SIZE:]
            if len(body) != h.record_count * h.stride:
                raise CorruptionError("record count does not match body length", p)
            yield body

    _atomic_write(Path(out_path), chunks())
    return merged


def split_sizes(total: int, n: int) -> list[int]:
    if n < 1:
        raise RejectedInput(f"cannot split into {n} partitions")
    q, r = divmod(total, n)
    return [q + 1 if i < r else q for i in range(n)]


def split_partition(p: CategoryPartition, n: int) -> list[CategoryPartition]:
    """Contiguous, order-preserving split; earlier pieces take the remainder."""
    out = []
    lo = 0
    for i, size in enumerate(split_sizes(len(p), n)):
        out.append(
            CategoryPartition(
                p.category_id,
                p.listing_ids[lo : lo + size],
                p.signatures[lo : lo + size],
                i,
                p.nbits,
            )
        )
        lo += size
    return out


def load_category_root(root, model_version: int) -> dict[int, CategoryPartition]:
    """Every ``<category>.idx`` under ``<root>/<model_version>/``."""
    base = Path(root) / str(model_version)
    out = {}
    for f in sorted(base.glob("*.idx")):
        header, part = read_index(f)
        out[header.category_id] = part
    return out
