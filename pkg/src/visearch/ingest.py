"""Listing ingestion: exact-duplicate detection, micro-batch hashing,
a versioned hash store and per-category extracts.

Update stream format (one record per line, tab separated)::

    op  timestamp  listing_id  category_id  image_b64  aspects

``op`` is ``upsert`` or ``delete``; ``image_b64`` is the base64 of the raw
image bytes (empty for deletes); ``aspects`` is ``name=value;...`` with
percent-escaping (see ``AspectSet.encode``).  Blank lines and lines starting
with ``#`` are ignored.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
import logging
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, RejectedInput
from .hashmodel import HashProjector, extract_hashes
from .index import (
    CategoryPartition,
    concat_index_files,
    index_path,
    split_sizes,
    write_partition,
)
from .sigcore import AspectSet, BinarySignature

log = logging.getLogger(__name__)

MAX_VERSIONS = 2

Featurizer = Callable[[bytes], np.ndarray]


def dedup_key(image_bytes: bytes) -> bytes:
    """MD5 of the raw bytes, no decoding or resizing."""
    if not image_bytes:
        raise RejectedInput("image bytes must be nonempty")
    return hashlib.md5(bytes(image_bytes)).digest()


@dataclass(frozen=True)
class ListingUpdate:
    listing_id: int
    category_id: int
    image_bytes: bytes = b""
    aspects: AspectSet = field(default_factory=AspectSet)
    op: str = "upsert"
    timestamp: int = 0

    def __post_init__(self):
        if self.op not in ("upsert", "delete"):
            raise RejectedInput(f"unknown op {self.op!r}")
        if self.op == "upsert" and not self.image_bytes:
            raise RejectedInput(f"upsert of listing {self.listing_id} has no image bytes")
        if not 0 <= self.listing_id < 2**64 or not 0 <= self.category_id < 2**32:
            raise RejectedInput("listing id must fit u64 and category id u32")
        if not isinstance(self.aspects, AspectSet):
            object.__setattr__(self, "aspects", AspectSet(self.aspects))

    def to_line(self) -> str:
        img = base64.b64encode(self.image_bytes).decode("ascii")
        return "\t".join(
            [self.op, str(self.timestamp), str(self.listing_id), str(self.category_id), img, self.aspects.encode()]
        )

    @classmethod
    def from_line(cls, line: str) -> "ListingUpdate":
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 6:
            raise RejectedInput(f"expected 6 tab-separated fields, got {len(parts)}")
        op, ts, lid, cat, img, aspects = parts
        try:
            image = base64.b64decode(img, validate=True)
            return cls(int(lid), int(cat), image, AspectSet.decode(aspects), op, int(ts))
        except (ValueError, binascii.Error) as exc:
            raise RejectedInput(str(exc)) from exc


def read_updates(stream: Iterable[str]) -> list[ListingUpdate]:
    """Parse every line; malformed lines are collected and reported together."""
    out, errors = [], []
    for lineno, line in enumerate(stream, 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            out.append(ListingUpdate.from_line(line))
        except RejectedInput as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        raise RejectedInput("malformed update records:\n  " + "\n  ".join(errors))
    return out


@dataclass(frozen=True)
class HashStoreEntry:
    image_key: bytes
    hashes: tuple[tuple[int, BinarySignature], ...] = ()
    ref_count: int = 0

    @property
    def versions(self) -> tuple[int, ...]:
        return tuple(v for v, _ in self.hashes)

    def hash_for(self, version: int) -> BinarySignature | None:
        for v, sig in self.hashes:
            if v == version:
                return sig
        return None

    def with_hash(self, version: int, sig: BinarySignature) -> "HashStoreEntry":
        kept = sorted([(v, s) for v, s in self.hashes if v != version] + [(version, sig)], key=lambda t: t[0])
        return replace(self, hashes=tuple(kept[-MAX_VERSIONS:]))


@dataclass(frozen=True)
class ListingState:
    listing_id: int
    category_id: int
    image_key: bytes
    aspects: AspectSet
    live: bool
    timestamp: int


@dataclass
class IngestCounts:
    hashed: int = 0
    duplicates: int = 0
    deletions: int = 0
    unknown_deletes: int = 0
    unchanged: int = 0

    def __iadd__(self, other: "IngestCounts"):
        for k in vars(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))
        return self


@dataclass(frozen=True)
class StoreSnapshot:
    images: Mapping[bytes, HashStoreEntry]
    listings: Mapping[int, ListingState]
    versions: tuple[int, ...]

    def live_listings(self) -> list[ListingState]:
        return [s for s in self.listings.values() if s.live]

    def hash_of(self, listing_id: int, version: int) -> BinarySignature | None:
        state = self.listings.get(listing_id)
        if state is None or not state.live:
            return None
        return self.images[state.image_key].hash_for(version)


# persistence records: u8 kind, u32 payload length, payload
_REC = struct.Struct("<BI")
_KIND_IMAGE, _KIND_LISTING, _KIND_BLOB, _KIND_PROJECTORS = 1, 2, 3, 4
STORE_MAGIC = b"EBVSHST1"


def _encode_image(e: HashStoreEntry) -> bytes:
    buf = io.BytesIO()
    buf.write(e.image_key)
    buf.write(struct.pack("<IB", e.ref_count, len(e.hashes)))
    for v, sig in e.hashes:
        buf.write(struct.pack("<HI", v, sig.nbits))
        buf.write(sig.data)
    return buf.getvalue()


def _decode_image(raw: bytes) -> HashStoreEntry:
    key = raw[:16]
    ref, n = struct.unpack_from("<IB", raw, 16)
    off = 21
    hashes = []
    for _ in range(n):
        v, nbits = struct.unpack_from("<HI", raw, off)
        off += 6
        nb = (nbits + 7) // 8
        hashes.append((v, BinarySignature(raw[off : off + nb], nbits)))
        off += nb
    return HashStoreEntry(key, tuple(hashes), ref)


def _encode_listing(s: ListingState) -> bytes:
    asp = s.aspects.encode().encode("utf-8")
    return struct.pack("<QI16sBQI", s.listing_id, s.category_id, s.image_key, s.live, s.timestamp, len(asp)) + asp


def _decode_listing(raw: bytes) -> ListingState:
    lid, cat, key, live, ts, n = struct.unpack_from("<QI16sBQI", raw)
    off = struct.calcsize("<QI16sBQI")
    aspects = AspectSet.decode(raw[off : off + n].decode("utf-8"))
    return ListingState(lid, cat, key, aspects, bool(live), ts)


class HashStore:
    """Image hashes keyed by dedup key, plus the listing table and image blobs.

    Writers serialize on one lock and replace immutable entries, so
    ``snapshot()`` hands readers a consistent point-in-time copy.  With a
    ``root`` directory, every mutation is appended to ``log.bin``;
    ``compact()`` folds the log into ``snapshot.bin``.
    """

    def __init__(self, root=None):
        self.images: dict[bytes, HashStoreEntry] = {}
        self.listings: dict[int, ListingState] = {}
        self.blobs: dict[bytes, bytes] = {}
        self.projectors: list[HashProjector] = []
        self._lock = threading.RLock()
        self.root = Path(root) if root is not None else None
        self._log = None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._replay(self.root / "snapshot.bin")
            self._replay(self.root / "log.bin")
            self._log = open(self.root / "log.bin", "ab")
            if self._log.tell() == 0:
                self._log.write(STORE_MAGIC)
                self._log.flush()

    @property
    def versions(self) -> tuple[int, ...]:
        return tuple(p.version for p in self.projectors)

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            return StoreSnapshot(dict(self.images), dict(self.listings), self.versions)

    def state_digest(self) -> str:
        """Order-independent digest of images and listings, for equality checks."""
        h = hashlib.sha256()
        with self._lock:
            for k in sorted(self.images):
                h.update(_encode_image(self.images[k]))
            for lid in sorted(self.listings):
                h.update(_encode_listing(self.listings[lid]))
        return h.hexdigest()

    # mutation helpers; callers hold the lock
    def _put_image(self, entry: HashStoreEntry, pending: list):
        self.images[entry.image_key] = entry
        pending.append((_KIND_IMAGE, _encode_image(entry)))

    def _put_listing(self, state: ListingState, pending: list):
        self.listings[state.listing_id] = state
        pending.append((_KIND_LISTING, _encode_listing(state)))

    def _put_blob(self, key: bytes, data: bytes, pending: list):
        self.blobs[key] = data
        pending.append((_KIND_BLOB, key + data))

    def _set_projectors(self, projectors: list[HashProjector], pending: list):
        self.projectors = list(projectors)
        pending.append((_KIND_PROJECTORS, b"".join(p.to_bytes() for p in projectors)))

    def _commit(self, pending: list):
        if self._log is None or not pending:
            return
        for kind, payload in pending:
            self._log.write(_REC.pack(kind, len(payload)))
            self._log.write(payload)
        self._log.flush()

    def _replay(self, path: Path):
        if not path.exists():
            return
        raw = path.read_bytes()
        if not raw:
            return
        if raw[:8] != STORE_MAGIC:
            raise CorruptionError("bad hash store magic", path)
        off = 8
        while off < len(raw):
            if off + _REC.size > len(raw):
                log.warning("ignoring torn record header at end of %s", path)
                break
            kind, n = _REC.unpack_from(raw, off)
            off += _REC.size
            payload = raw[off : off + n]
            if len(payload) != n:
                log.warning("ignoring torn record at end of %s", path)
                break
            off += n
            if kind == _KIND_IMAGE:
                e = _decode_image(payload)
                self.images[e.image_key] = e
            elif kind == _KIND_LISTING:
                s = _decode_listing(payload)
                self.listings[s.listing_id] = s
            elif kind == _KIND_BLOB:
                self.blobs[payload[:16]] = payload[16:]
            elif kind == _KIND_PROJECTORS:
                self.projectors = [
                    HashProjector.from_bytes(payload[i : i + 22]) for i in range(0, len(payload), 22)
                ]
            else:
                raise CorruptionError(f"unknown record kind {kind}", path)

    def compact(self):
        if self.root is None:
            return
        with self._lock:
            tmp = self.root / "snapshot.bin.tmp"
            with open(tmp, "wb") as fh:
                fh.write(STORE_MAGIC)
                records = [(_KIND_PROJECTORS, b"".join(p.to_bytes() for p in self.projectors))]
                records += [(_KIND_BLOB, k + v) for k, v in sorted(self.blobs.items())]
                records += [(_KIND_IMAGE, _encode_image(e)) for _, e in sorted(self.images.items())]
                records += [(_KIND_LISTING, _encode_listing(s)) for _, s in sorted(self.listings.items())]
                for kind, payload in records:
                    fh.write(_REC.pack(kind, len(payload)))
                    fh.write(payload)
            tmp.replace(self.root / "snapshot.bin")
            self._log.close()
            self._log = open(self.root / "log.bin", "wb")
            self._log.write(STORE_MAGIC)
            self._log.flush()

    def close(self):
        if self._log is not None:
            self._log.close()
            self._log = None


@dataclass
class ExtractManifest:
    model_version: int
    files: dict[int, str]
    counts: dict[int, int]
    total_scanned: int

    MAGIC = b"EBVSMAN1"

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(self.MAGIC)
        buf.write(struct.pack("<IQI", self.model_version, self.total_scanned, len(self.files)))
        for cat in sorted(self.files):
            path = self.files[cat].encode("utf-8")
            buf.write(struct.pack("<IQH", cat, self.counts[cat], len(path)))
            buf.write(path)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ExtractManifest":
        if raw[:8] != cls.MAGIC:
            raise CorruptionError("bad manifest magic")
        ver, total, n = struct.unpack_from("<IQI", raw, 8)
        off = 8 + 16
        files, counts = {}, {}
        for _ in range(n):
            cat, count, plen = struct.unpack_from("<IQH", raw, off)
            off += 14
            files[cat] = raw[off : off + plen].decode("utf-8")
            counts[cat] = count
            off += plen
        return cls(ver, files, counts, total)

    def to_text(self) -> str:
        lines = [
            f"model_version {self.model_version}",
            f"total_scanned {self.total_scanned}",
            f"categories {len(self.files)}",
            f"records {sum(self.counts.values())}",
        ]
        lines += [f"{cat}\t{self.counts[cat]}\t{self.files[cat]}" for cat in sorted(self.files)]
        return "\n".join(lines) + "\n"

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "MANIFEST.bin").write_bytes(self.to_bytes())
        (d / "MANIFEST.txt").write_text(self.to_text())


class IngestPipeline:
    """Single-writer ingestion over a ``HashStore``.

    Every retained model version hashes new images, so an image uploaded in
    the middle of a rehash is never missing the newer hash.
    """

    def __init__(self, store: HashStore, featurizer: Featurizer, projector: HashProjector | None = None):
        self.store = store
        self.featurizer = featurizer
        self.hash_computations = 0
        if projector is not None and not store.projectors:
            pending: list = []
            with store._lock:
                store._set_projectors([projector], pending)
                store._commit(pending)
        if not store.projectors:
            raise ConfigError("ingest pipeline needs a projector")

    @property
    def current_version(self) -> int:
        return self.store.projectors[-1].version

    def _hash_keys(self, keys: Sequence[bytes], projector: HashProjector) -> list[BinarySignature]:
        if not keys:
            return []
        X = np.stack([np.asarray(self.featurizer(self.store.blobs[k]), dtype=np.float64) for k in keys])
        rows = extract_hashes(X, projector)
        self.hash_computations += len(keys)
        return [BinarySignature(r.tobytes(), projector.nbits) for r in rows]

    def ingest_batch(self, updates: Sequence[ListingUpdate]) -> IngestCounts:
        counts = IngestCounts()
        store = self.store
        pending: list = []
        with store._lock:
            touched: dict[bytes, None] = {}
            for u in updates:
                prev = store.listings.get(u.listing_id)
                if prev is not None and u.timestamp <= prev.timestamp:
                    counts.unchanged += 1
                    continue
                if u.op == "delete":
                    if prev is None or not prev.live:
                        counts.unknown_deletes += 1
                        continue
                    self._unlink(prev.image_key, pending)
                    store._put_listing(replace(prev, live=False, timestamp=u.timestamp), pending)
                    counts.deletions += 1
                    continue
                key = dedup_key(u.image_bytes)
                if prev is not None and prev.live:
                    self._unlink(prev.image_key, pending)
                entry = store.images.get(key)
                if entry is None:
                    store._put_blob(key, bytes(u.image_bytes), pending)
                    entry = HashStoreEntry(key)
                    counts.hashed += 1
                elif entry.ref_count > 0:
                    counts.duplicates += 1
                touched[key] = None
                store._put_image(replace(entry, ref_count=entry.ref_count + 1), pending)
                store._put_listing(
                    ListingState(u.listing_id, u.category_id, key, u.aspects, True, u.timestamp), pending
                )
            self._fill_missing_hashes(list(touched), pending)
            store._commit(pending)
        return counts

    def _unlink(self, key: bytes, pending: list):
        e = self.store.images[key]
        self.store._put_image(replace(e, ref_count=max(0, e.ref_count - 1)), pending)

    def _fill_missing_hashes(self, keys: list[bytes], pending: list):
        # new uploads, plus revived tombstones that missed a rehash
        for proj in self.store.projectors:
            need = [
                k for k in keys if self.store.images[k].ref_count > 0 and self.store.images[k].hash_for(proj.version) is None
            ]
            for k, sig in zip(need, self._hash_keys(need, proj)):
                self.store._put_image(self.store.images[k].with_hash(proj.version, sig), pending)

    def iter_rehash(self, new_projector: HashProjector, batch_size: int = 256) -> Iterator[int]:
        """Recompute hashes for live images in micro-batches, yielding progress.

        The new version is registered up front (evicting the oldest beyond
        two); entries keep their older hash until their batch is processed.
        """
        store = self.store
        if new_projector.version in store.versions:
            log.info("model version %d already present; rehash is a no-op", new_projector.version)
            return
        with store._lock:
            pending: list = []
            store._set_projectors((store.projectors + [new_projector])[-MAX_VERSIONS:], pending)
            store._commit(pending)
            keys = sorted(k for k, e in store.images.items() if e.ref_count > 0)
        done = 0
        for lo in range(0, len(keys), batch_size):
            with store._lock:
                batch = [k for k in keys[lo : lo + batch_size] if store.images[k].hash_for(new_projector.version) is None]
                pending = []
                for k, sig in zip(batch, self._hash_keys(batch, new_projector)):
                    store._put_image(store.images[k].with_hash(new_projector.version, sig), pending)
                store._commit(pending)
            done += len(batch)
            yield done

    def rehash_all(self, new_projector: HashProjector, batch_size: int = 256) -> int:
        done = 0
        for done in self.iter_rehash(new_projector, batch_size):
            pass
        return done

    def run_extract(
        self,
        model_version: int,
        supported_categories: Iterable[int],
        out_root,
        job_partitions: int = 4,
    ) -> ExtractManifest:
        snap = self.store.snapshot()
        if model_version not in snap.versions:
            raise ConfigError(f"hash store has no model version {model_version} (has {list(snap.versions)})")
        supported = sorted(set(int(c) for c in supported_categories))
        live = sorted(snap.live_listings(), key=lambda s: s.listing_id)
        nbits = next(p.nbits for p in self.store.projectors if p.version == model_version)

        chosen = [s for s in live if s.category_id in set(supported)]
        sigs = []
        for s in chosen:
            sig = snap.images[s.image_key].hash_for(model_version)
            if sig is None:
                raise ConfigError(f"image of listing {s.listing_id} lacks version {model_version}")
            sigs.append(sig)

        out_dir = Path(out_root) / str(model_version)
        parts_dir = out_dir / "_parts"
        parts_dir.mkdir(parents=True, exist_ok=True)
        part_files: dict[int, list[Path]] = {c: [] for c in supported}
        lo = 0
        # job partitions cover contiguous listing-id ranges, so concatenation keeps ids sorted
        for p, size in enumerate(split_sizes(len(chosen), job_partitions)):
            rows = list(zip(chosen[lo : lo + size], sigs[lo : lo + size]))
            lo += size
            for cat in supported:
                recs = [(s.listing_id, sig) for s, sig in rows if s.category_id == cat]
                part = (
                    CategoryPartition.from_records(cat, recs, nbits=nbits)
                    if recs
                    else CategoryPartition.empty(cat, nbits)
                )
                path = parts_dir / f"{cat}.{p}.idx"
                write_partition(part, path, model_version)
                part_files[cat].append(path)

        files, counts = {}, {}
        for cat in supported:
            target = index_path(out_root, model_version, cat)
            header = concat_index_files(part_files[cat], target)
            files[cat] = str(target)
            counts[cat] = header.record_count
            for f in part_files[cat]:
                f.unlink()
        parts_dir.rmdir()
        manifest = ExtractManifest(model_version, files, counts, len(live))
        manifest.save(out_dir)
        return manifest


def synthetic_image_bytes(vec) -> bytes:
    """Encode a feature vector as an opaque 'image' for the synthetic pipeline."""
    return b"SYNIMG01" + np.asarray(vec, dtype="<f4").tobytes()


class SyntheticFeaturizer:
    """Decodes ``synthetic_image_bytes``; other byte strings get seeded noise
    keyed by their MD5 digest."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, image_bytes: bytes) -> np.ndarray:
        if image_bytes[:8] == b"SYNIMG01" and len(image_bytes) == 8 + 4 * self.dim:
            return np.frombuffer(image_bytes, dtype="<f4", offset=8).astype(np.float64)
        key = int.from_bytes(dedup_key(image_bytes)[:8], "little")
        return np.random.default_rng([self.seed, key]).standard_normal(self.dim)
