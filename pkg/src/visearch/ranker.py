"""Query path: per-node partition scans, scatter-gather merge, aspect re-ranking.

Ordering everywhere is ascending Hamming distance, then ascending listing id.

Wire protocol (little-endian, each message framed by ``visearch.wire``)::

    request  = b"EBVSQRY1" u64 request_id  u32 hash_bytes  hash
               u16 category_count  category_count * u32 category_id
               u32 N  u8 flags
               [if flags & 2: u16 aspect_count, aspect_count *
                    (u16 len, name, u16 len, value, f32 weight)]
    response = b"EBVSRSP1" u64 request_id  u8 degraded  u32 result_count
               result_count * (u64 listing_id, u32 category_id, u16 hamming,
                               f32 s_appearance, f32 s_aspect, f32 s_final)

Flags: bit 0 re-rank, bit 1 predicted aspects follow, bit 2 local scan only
(node to node; the receiver must not fan out again).
"""

from __future__ import annotations

import concurrent.futures as cf
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from .cluster import ClusterView, NodeId, compute_assignment
from .errors import ClusterUnavailable, CorruptionError, RejectedInput
from .hashmodel import AbsoluteTopN, PredictionMode, SurrogateModel, extract_hash, predict_categories
from .index import CategoryPartition, split_partition
from .sigcore import (
    AspectSet,
    BinarySignature,
    ScoringConfig,
    appearance_score,
    aspect_score,
    blended_score,
    hamming_words,
)
from .wire import Reader, pack_text
from . import wire

MAX_N = 10000
RERANK_CAP = 1000
DEFAULT_FETCH = 50
DEFAULT_N = 50
DEFAULT_TIMEOUT = 0.5

PredictedAspects = Sequence[tuple[tuple[str, str], float]]


class Hits(NamedTuple):
    listing_ids: np.ndarray
    hamming: np.ndarray

    def __len__(self):
        return int(self.listing_ids.shape[0])

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.listing_ids.tolist(), self.hamming.tolist()))


EMPTY_HITS = Hits(np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class RankedResult:
    listing_id: int
    category_id: int
    hamming: int
    s_appearance: float
    s_aspect: float = 0.0
    s_final: float = 0.0


@dataclass(frozen=True)
class QueryRequest:
    signature: BinarySignature
    categories: tuple[tuple[int, float], ...]
    n: int = DEFAULT_N
    predicted_aspects: tuple = ()
    rerank: bool = False
    request_id: int = 0
    fetch: int | None = None
    local: bool = False

    def __post_init__(self):
        if not 1 <= self.n <= MAX_N:
            raise RejectedInput(f"N must lie in [1, {MAX_N}], got {self.n}")
        if self.fetch is not None and not 1 <= self.fetch <= MAX_N:
            raise RejectedInput(f"per-category fetch must lie in [1, {MAX_N}]")
        if not self.categories:
            raise RejectedInput("query needs at least one category")
        cats = tuple((int(c), float(w)) for c, w in self.categories)
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "predicted_aspects", tuple(self.predicted_aspects))

    @property
    def category_ids(self) -> list[int]:
        return [c for c, _ in self.categories]

    @property
    def per_category(self) -> int:
        return self.fetch if self.fetch is not None else self.n


@dataclass
class PartialResult:
    node: NodeId
    per_category: dict[int, Hits] = field(default_factory=dict)
    partitions_scanned: int = 0
    partitions_missing: int = 0


def scan_partition(p: CategoryPartition, q: BinarySignature, n: int, block: int = 8192) -> Hits:
    """Exact top-``n`` of one partition.

    Distances are packed with the row position into one int64 key, so a
    partial selection over keys yields ties in listing-id order (ids ascend
    within a partition).  Only ``n`` + ``block`` keys are live at a time.
    """
    if q.nbits != p.nbits:
        raise RejectedInput(f"query width {q.nbits} != partition width {p.nbits}")
    if n < 1:
        raise RejectedInput("n must be at least 1")
    if len(p) == 0:
        return EMPTY_HITS
    words, qw = p.words, q.words()
    best = None
    for lo in range(0, len(p), block):
        d = hamming_words(words[lo : lo + block], qw)
        keys = (d << 32) | np.arange(lo, lo + d.shape[0], dtype=np.int64)
        if best is not None:
            keys = np.concatenate([best, keys])
        if keys.shape[0] > n:
            keys = np.partition(keys, n - 1)[:n]
        best = keys
    best.sort()
    return Hits(p.listing_ids[best & 0xFFFFFFFF], best >> 32)


def merge_hits(parts: Iterable[Hits], n: int) -> Hits:
    parts = [h for h in parts if len(h)]
    if not parts:
        return EMPTY_HITS
    if len(parts) == 1 and len(parts[0]) <= n:
        return parts[0]
    ids = np.concatenate([h.listing_ids for h in parts])
    d = np.concatenate([h.hamming for h in parts])
    order = np.lexsort((ids, d))[:n]
    return Hits(ids[order], d[order])


def node_search(
    req: QueryRequest,
    partitions: Mapping[int, Sequence[CategoryPartition]],
    workers: int = 1,
    executor: cf.Executor | None = None,
    node: NodeId = "local",
) -> PartialResult:
    """Scan every locally held piece of each requested category.

    Each piece is cut into ``workers`` sub-partitions scanned concurrently;
    per-category results are merged to the per-category fetch size.
    """
    n = req.per_category
    jobs: list[tuple[int, CategoryPartition]] = []
    scanned = 0
    for cat in dict.fromkeys(req.category_ids):
        for piece in partitions.get(cat, ()):
            scanned += 1
            subs = split_partition(piece, workers) if workers > 1 else [piece]
            jobs.extend((cat, s) for s in subs if len(s))
    if executor is not None and workers > 1 and len(jobs) > 1:
        futures = [(cat, executor.submit(scan_partition, s, req.signature, n)) for cat, s in jobs]
        results = [(cat, f.result()) for cat, f in futures]
    else:
        results = [(cat, scan_partition(s, req.signature, n)) for cat, s in jobs]
    grouped: dict[int, list[Hits]] = {}
    for cat, hits in results:
        grouped.setdefault(cat, []).append(hits)
    per_cat = {cat: merge_hits(hs, n) for cat, hs in grouped.items()}
    for cat in req.category_ids:
        if cat in partitions and cat not in per_cat:
            per_cat[cat] = EMPTY_HITS
    return PartialResult(node, per_cat, scanned, 0)


class SearchNode:
    """A node's query-side state: held partitions plus a scan worker pool.

    ``install`` swaps the whole holdings map at once; in-flight searches keep
    the map they started with.
    """

    def __init__(self, node_id: NodeId, holdings: Mapping[int, Sequence[CategoryPartition]] | None = None, workers: int = 1):
        self.node_id = node_id
        self.workers = max(1, workers)
        self._holdings: Mapping[int, tuple[CategoryPartition, ...]] = {}
        self._executor = cf.ThreadPoolExecutor(self.workers, thread_name_prefix=f"scan-{node_id}") if self.workers > 1 else None
        if holdings:
            self.install(holdings)

    def install(self, holdings: Mapping[int, Sequence[CategoryPartition]]) -> None:
        self._holdings = {int(c): tuple(ps) for c, ps in holdings.items()}

    @property
    def holdings(self) -> Mapping[int, tuple[CategoryPartition, ...]]:
        return self._holdings

    def search(self, req: QueryRequest) -> PartialResult:
        return node_search(req, self._holdings, self.workers, self._executor, self.node_id)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=False)


class Transport(Protocol):
    def call(self, node: NodeId, req: QueryRequest) -> PartialResult: ...


class LocalTransport:
    """Direct calls into in-process nodes, with scripted failures and delays."""

    def __init__(self, nodes: Mapping[NodeId, SearchNode]):
        self.nodes = dict(nodes)
        self.down: set[NodeId] = set()
        self.delay: dict[NodeId, float] = {}

    def kill(self, node: NodeId):
        self.down.add(node)

    def call(self, node: NodeId, req: QueryRequest) -> PartialResult:
        if node in self.delay:
            time.sleep(self.delay[node])
        if node in self.down or node not in self.nodes:
            raise ConnectionError(f"node {node} unreachable")
        return self.nodes[node].search(req)


@dataclass
class FanoutResponse:
    results: list[RankedResult]
    per_category: dict[int, Hits]
    degraded: bool = False
    missing_nodes: tuple[NodeId, ...] = ()
    partitions_missing: int = 0
    timings: dict[str, float] = field(default_factory=dict)


_shared_pool: cf.ThreadPoolExecutor | None = None
_pool_lock = threading.Lock()


def _fanout_pool() -> cf.ThreadPoolExecutor:
    global _shared_pool
    with _pool_lock:
        if _shared_pool is None:
            _shared_pool = cf.ThreadPoolExecutor(64, thread_name_prefix="fanout")
        return _shared_pool


def merge_across_categories(per_category: Mapping[int, Hits], n: int, nbits: int) -> list[RankedResult]:
    """Global order by (hamming, listing id); a listing seen under several
    categories keeps its best entry."""
    cats = [c for c, h in per_category.items() if len(h)]
    if not cats:
        return []
    ids = np.concatenate([per_category[c].listing_ids for c in cats])
    d = np.concatenate([per_category[c].hamming for c in cats])
    cat_col = np.concatenate([np.full(len(per_category[c]), c, dtype=np.int64) for c in cats])
    order = np.lexsort((cat_col, ids, d))
    _, first = np.unique(ids[order], return_index=True)
    keep = order[np.sort(first)][:n]
    return [
        RankedResult(int(ids[i]), int(cat_col[i]), int(d[i]), appearance_score(int(d[i]), nbits), 0.0, appearance_score(int(d[i]), nbits))
        for i in keep
    ]


def fanout_search(
    req: QueryRequest,
    view: ClusterView,
    transport: Transport,
    timeout: float = DEFAULT_TIMEOUT,
    executor: cf.Executor | None = None,
) -> FanoutResponse:
    """Send ``req`` to every member (self included) and merge what returns in time."""
    if not view.members:
        raise ClusterUnavailable("cluster view is empty")
    executor = executor or _fanout_pool()
    local = replace(req, local=True, fetch=req.per_category)
    t0 = time.perf_counter()
    futures = {executor.submit(transport.call, m, local): m for m in view.members}
    done, late = cf.wait(futures, timeout=timeout)
    partials: list[PartialResult] = []
    missing = [futures[f] for f in late]
    for f in done:
        try:
            partials.append(f.result())
        except (OSError, ConnectionError, CorruptionError, ClusterUnavailable):
            missing.append(futures[f])
    t1 = time.perf_counter()
    if not partials:
        raise ClusterUnavailable(f"no node answered ({len(view.members)} tried)")
    lost = 0
    if missing:
        assignment = compute_assignment(view, req.category_ids)
        gone = set(missing)
        lost = sum(1 for n in assignment.owners.values() if n in gone)
    per_cat = {}
    for cat in dict.fromkeys(req.category_ids):
        per_cat[cat] = merge_hits((p.per_category.get(cat, EMPTY_HITS) for p in partials), req.per_category)
    results = merge_across_categories(per_cat, req.n, req.signature.nbits)
    t2 = time.perf_counter()
    return FanoutResponse(
        results,
        per_cat,
        degraded=bool(missing),
        missing_nodes=tuple(sorted(missing)),
        partitions_missing=lost,
        timings={"fanout": t1 - t0, "merge": t2 - t1},
    )


AspectLookup = Callable[[int], AspectSet | None]


def _lookup_fn(lookup) -> AspectLookup:
    if callable(lookup):
        return lookup
    return lambda lid: lookup.get(lid)


def rerank(
    initial: Sequence[RankedResult],
    predicted_aspects: PredictedAspects,
    lookup: AspectLookup | Mapping[int, AspectSet],
    cfg: ScoringConfig = ScoringConfig(),
) -> list[RankedResult]:
    if len(initial) > RERANK_CAP:
        raise RejectedInput(f"re-ranking is capped at {RERANK_CAP} results, got {len(initial)}")
    if any(b.s_appearance > a.s_appearance for a, b in zip(initial, initial[1:])):
        raise RejectedInput("initial list must be sorted by descending appearance score")
    get = _lookup_fn(lookup)
    rescored = []
    for r in initial:
        truth = get(r.listing_id)
        s_asp = aspect_score(predicted_aspects, truth) if truth is not None else 0.0
        rescored.append(replace(r, s_aspect=s_asp, s_final=blended_score(r.s_appearance, s_asp, cfg)))
    rescored.sort(key=lambda r: (-r.s_final, -r.s_appearance, r.listing_id))
    return rescored


@dataclass
class QueryOutcome:
    results: list[RankedResult]
    categories: tuple[tuple[int, float], ...]
    degraded: bool
    timings: dict[str, float]


class SearchService:
    """End-to-end query: predict, hash, fan out, merge, re-rank."""

    def __init__(
        self,
        transport: Transport,
        view: ClusterView | Callable[[], ClusterView],
        model: SurrogateModel | None = None,
        aspects: AspectLookup | Mapping[int, AspectSet] | None = None,
        scoring: ScoringConfig = ScoringConfig(),
        fetch: int = DEFAULT_FETCH,
        n: int = DEFAULT_N,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        self.transport = transport
        self._view = view if callable(view) else (lambda: view)
        self.model = model
        self.aspects = _lookup_fn(aspects) if aspects is not None else (lambda lid: None)
        self.scoring = scoring
        self.fetch = fetch
        self.n = n
        self.timeout = timeout

    def query(
        self,
        x=None,
        *,
        signature: BinarySignature | None = None,
        categories: Sequence[tuple[int, float]] | None = None,
        mode: PredictionMode = AbsoluteTopN(5),
        n: int | None = None,
        fetch: int | None = None,
        predicted_aspects: PredictedAspects = (),
        rerank_results: bool = True,
        request_id: int = 0,
    ) -> QueryOutcome:
        t_start = time.perf_counter()
        if x is not None:
            if self.model is None:
                raise RejectedInput("feature queries need a model")
            sig, pred = self.model.forward(x, mode)
            signature = signature or sig
            categories = categories or pred.ranked
        if signature is None or not categories:
            raise RejectedInput("query needs a signature and categories (or a feature vector)")
        view = self._view()
        req = QueryRequest(
            signature,
            tuple(categories),
            n=n or self.n,
            predicted_aspects=tuple(predicted_aspects),
            rerank=rerank_results,
            request_id=request_id,
            fetch=fetch or self.fetch,
        )
        t_hash = time.perf_counter()
        resp = fanout_search(req, view, self.transport, self.timeout)
        t_merged = time.perf_counter()
        results = resp.results
        if rerank_results and predicted_aspects:
            # re-rank the whole recall set, then cut to N
            pool = merge_across_categories(resp.per_category, min(RERANK_CAP, req.per_category * len(req.categories)), signature.nbits)
            results = rerank(pool, predicted_aspects, self.aspects, self.scoring)[: req.n]
        t_end = time.perf_counter()
        timings = {
            "hash_predict": t_hash - t_start,
            "fanout": resp.timings["fanout"],
            "merge": (t_merged - t_hash) - resp.timings["fanout"],
            "rerank": t_end - t_merged,
            "total": t_end - t_start,
        }
        return QueryOutcome(results, req.categories, resp.degraded, timings)


# wire protocol
REQUEST_MAGIC = b"EBVSQRY1"
RESPONSE_MAGIC = b"EBVSRSP1"
FLAG_RERANK, FLAG_ASPECTS, FLAG_LOCAL = 1, 2, 4


def encode_request(req: QueryRequest) -> bytes:
    flags = (FLAG_RERANK if req.rerank else 0) | (FLAG_ASPECTS if req.predicted_aspects else 0) | (
        FLAG_LOCAL if req.local else 0
    )
    cats = req.category_ids
    out = bytearray(REQUEST_MAGIC)
    out += struct.pack("<QI", req.request_id, req.signature.nbytes) + req.signature.data
    out += struct.pack("<H", len(cats)) + struct.pack(f"<{len(cats)}I", *cats)
    out += struct.pack("<IB", req.per_category if req.local else req.n, flags)
    if req.predicted_aspects:
        out += struct.pack("<H", len(req.predicted_aspects))
        for (name, value), w in req.predicted_aspects:
            out += pack_text(name) + pack_text(value) + struct.pack("<f", w)
    return bytes(out)


def decode_request(raw: bytes) -> QueryRequest:
    r = Reader(raw)
    if r.bytes(8) != REQUEST_MAGIC:
        raise CorruptionError("bad request magic")
    request_id, hash_bytes = r.take("QI")
    sig = BinarySignature(r.bytes(hash_bytes), hash_bytes * 8)
    count = r.take("H")
    cats = r.take(f"{count}I") if count else ()
    cats = (cats,) if isinstance(cats, int) else tuple(cats)
    n, flags = r.take("IB")
    aspects = []
    if flags & FLAG_ASPECTS:
        for _ in range(r.take("H")):
            name, value = r.text(), r.text()
            aspects.append(((name, value), r.take("f")))
    r.done()
    local = bool(flags & FLAG_LOCAL)
    return QueryRequest(
        sig,
        tuple((c, 0.0) for c in cats),
        n=n,
        predicted_aspects=tuple(aspects),
        rerank=bool(flags & FLAG_RERANK),
        request_id=request_id,
        fetch=n if local else None,
        local=local,
    )


_RESULT = struct.Struct("<QIHfff")


def encode_response(request_id: int, degraded: bool, results: Sequence[RankedResult]) -> bytes:
    out = bytearray(RESPONSE_MAGIC)
    out += struct.pack("<QBI", request_id, int(degraded), len(results))
    for r in results:
        out += _RESULT.pack(r.listing_id, r.category_id, r.hamming, r.s_appearance, r.s_aspect, r.s_final)
    return bytes(out)


def decode_response(raw: bytes) -> tuple[int, bool, list[RankedResult]]:
    r = Reader(raw)
    if r.bytes(8) != RESPONSE_MAGIC:
        raise CorruptionError("bad response magic")
    request_id, degraded, count = r.take("QBI")
    body = r.bytes(count * _RESULT.size)
    r.done()
    results = [RankedResult(*t) for t in _RESULT.iter_unpack(body)]
    return request_id, bool(degraded), results


def partial_to_results(partial: PartialResult, nbits: int) -> list[RankedResult]:
    out = []
    for cat in sorted(partial.per_category):
        h = partial.per_category[cat]
        for lid, d in h.pairs():
            s = appearance_score(d, nbits)
            out.append(RankedResult(lid, cat, d, s, 0.0, s))
    return out


def results_to_partial(node: NodeId, results: Sequence[RankedResult]) -> PartialResult:
    grouped: dict[int, list[RankedResult]] = {}
    for r in results:
        grouped.setdefault(r.category_id, []).append(r)
    per_cat = {
        c: Hits(np.array([r.listing_id for r in rs], dtype=np.uint64), np.array([r.hamming for r in rs], dtype=np.int64))
        for c, rs in grouped.items()
    }
    return PartialResult(node, per_cat)


class TcpTransport:
    def __init__(self, addresses: Mapping[NodeId, tuple[str, int]] | Callable[[], Mapping], timeout: float = DEFAULT_TIMEOUT, local: Mapping[NodeId, SearchNode] | None = None):
        self._addresses = addresses if callable(addresses) else (lambda: addresses)
        self.timeout = timeout
        self.local = dict(local or {})

    def call(self, node: NodeId, req: QueryRequest) -> PartialResult:
        if node in self.local:
            return self.local[node].search(req)
        addr = self._addresses().get(node)
        if addr is None:
            raise ConnectionError(f"no address for node {node}")
        _, _, results = decode_response(wire.request(addr, encode_request(req), self.timeout))
        return results_to_partial(node, results)


def query_remote(address: tuple[str, int], req: QueryRequest, timeout: float = 5.0) -> tuple[bool, list[RankedResult]]:
    """Client call to a serving node."""
    _, degraded, results = decode_response(wire.request(address, encode_request(req), timeout))
    return degraded, results
