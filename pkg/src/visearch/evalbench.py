"""Synthetic corpora, baselines and the retrieval measurement protocol.

Feature files (little-endian)::

    b"EBVSFEA1"  u32 dim  u64 count  count * dim * f32

The companion ``manifest.tsv`` has one row per item:
``listing_id  category_id  split  image_index  aspects``; ``image_index``
names the feature row that supplies the item's image (rows equal to their own
index are originals, others are exact duplicates).
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .errors import CorruptionError, RejectedInput
from .hashmodel import (
    AbsoluteTopN,
    CategoryModel,
    Cumulative,
    HashProjector,
    PredictionMode,
    extract_hashes,
    truncate,
)
from .index import CategoryPartition
from .ingest import ListingUpdate, synthetic_image_bytes
from .ranker import EMPTY_HITS, Hits, QueryRequest, SearchNode, merge_hits, scan_partition
from .sigcore import AspectSet, AspectWeights, BinarySignature, as_words, hamming_words

FEATURE_MAGIC = b"EBVSFEA1"
_FEATURE_HEADER = struct.Struct("<8sIQ")

ASPECT_NAMES = ("color", "brand", "size", "price", "material", "style")


@dataclass(frozen=True)
class SyntheticParams:
    classes: int = 10
    per_class: int = 100
    val_per_class: int = 10
    dim: int = 128
    sigma: float = 0.3
    separation: float = 1.0
    group_size: int = 1
    sibling_spread: float = 0.0
    duplicate_rate: float = 0.0
    aspect_values: int = 5
    aspect_concentration: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2 or self.per_class < 2 or self.val_per_class < 1:
            raise RejectedInput("need at least 2 classes, 2 train items and 1 validation item per class")
        if self.dim < 1 or self.sigma < 0 or self.separation < 0:
            raise RejectedInput("dimension must be positive and scales non-negative")
        if not 0.0 <= self.duplicate_rate < 1.0:
            raise RejectedInput("duplicate_rate must lie in [0, 1)")
        if self.aspect_values < 1:
            raise RejectedInput("each aspect needs at least one value")
        if self.group_size < 1 or self.classes % self.group_size:
            raise RejectedInput("group_size must divide the class count")


@dataclass
class SyntheticDataset:
    """Class-clustered features plus per-item aspects.

    Train listings get ids ``1..n_train``; validation listings follow.  With a
    nonzero duplicate rate some train items reuse an earlier item's image of
    the same class (``image_index`` points at the source row).
    """

    params: SyntheticParams
    centroids: np.ndarray
    train_X: np.ndarray
    train_y: np.ndarray
    train_ids: np.ndarray
    image_index: np.ndarray
    val_X: np.ndarray
    val_y: np.ndarray
    val_ids: np.ndarray
    aspects: dict[int, AspectSet]
    aspect_vocab: dict[str, tuple[str, ...]]

    @property
    def categories(self) -> list[int]:
        return list(range(self.params.classes))

    def label_of(self, listing_id: int) -> int:
        n = len(self.train_ids)
        if 1 <= listing_id <= n:
            return int(self.train_y[listing_id - 1])
        return int(self.val_y[listing_id - n - 1])

    def category_model(self, temperature: float | None = None) -> CategoryModel:
        """Centroid classifier; the default temperature ``2 sigma^2`` makes the
        softmax the exact posterior under the generating Gaussian."""
        t = temperature or max(2.0 * self.params.sigma**2, 1e-12)
        return CategoryModel({c: self.centroids[c] for c in self.categories}, temperature=t)

    def updates(self) -> list[ListingUpdate]:
        """Train split as an upsert stream, duplicates sharing identical bytes."""
        out = []
        for i, lid in enumerate(self.train_ids):
            src = int(self.image_index[i])
            out.append(
                ListingUpdate(
                    int(lid),
                    int(self.train_y[i]),
                    synthetic_image_bytes(self.train_X[src]),
                    self.aspects[int(lid)],
                    "upsert",
                    i + 1,
                )
            )
        return out

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_features(d / "train.fea", self.train_X)
        write_features(d / "val.fea", self.val_X)
        write_features(d / "centroids.fea", self.centroids)
        (d / "params.json").write_text(json.dumps(asdict(self.params), indent=2, sort_keys=True) + "\n")
        buf = io.StringIO()
        buf.write("listing_id\tcategory_id\tsplit\timage_index\taspects\n")
        for i, lid in enumerate(self.train_ids):
            buf.write(f"{lid}\t{self.train_y[i]}\ttrain\t{self.image_index[i]}\t{self.aspects[int(lid)].encode()}\n")
        for i, lid in enumerate(self.val_ids):
            buf.write(f"{lid}\t{self.val_y[i]}\tval\t{i}\t{self.aspects[int(lid)].encode()}\n")
        (d / "manifest.tsv").write_text(buf.getvalue())

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        """Read a saved dataset; also accepts externally computed features laid
        out the same way (``params.json`` then only needs ``sigma``)."""
        d = Path(directory)
        raw = json.loads((d / "params.json").read_text())
        params = SyntheticParams(**{k: v for k, v in raw.items() if k in SyntheticParams.__dataclass_fields__})
        train_X = read_features(d / "train.fea")
        val_X = read_features(d / "val.fea")
        rows = list(csv.reader((d / "manifest.tsv").read_text().splitlines()[1:], delimiter="\t"))
        train = [r for r in rows if r[2] == "train"]
        val = [r for r in rows if r[2] == "val"]
        aspects = {int(r[0]): AspectSet.decode(r[4]) for r in rows}
        train_y = np.array([int(r[1]) for r in train], dtype=np.int64)
        val_y = np.array([int(r[1]) for r in val], dtype=np.int64)
        if (d / "centroids.fea").exists():
            centroids = read_features(d / "centroids.fea")
        else:
            centroids = np.stack([train_X[train_y == c].mean(axis=0) for c in range(params.classes)])
        vocab: dict[str, set] = {}
        for a in aspects.values():
            for n, v in a:
                vocab.setdefault(n, set()).add(v)
        return cls(
            params,
            centroids,
            train_X,
            train_y,
            np.array([int(r[0]) for r in train], dtype=np.uint64),
            np.array([int(r[3]) for r in train], dtype=np.int64),
            val_X,
            val_y,
            np.array([int(r[0]) for r in val], dtype=np.uint64),
            aspects,
            {n: tuple(sorted(vs)) for n, vs in vocab.items()},
        )


def write_features(path, X) -> None:
    X = np.ascontiguousarray(X, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, X.shape[1], X.shape[0]))
        fh.write(X.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise CorruptionError("truncated feature header", path)
    magic, dim, count = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise CorruptionError("bad feature file magic", path)
    if len(raw) - _FEATURE_HEADER.size != dim * count * 4:
        raise CorruptionError("feature body length does not match header", path)
    return np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(count, dim).astype(np.float64)


def generate(params: SyntheticParams) -> SyntheticDataset:
    rng = np.random.default_rng(params.seed)
    C, D = params.classes, params.dim
    # classes come in groups of confusable siblings around a shared center
    groups = rng.standard_normal((C // params.group_size, D)) * params.separation
    centroids = np.repeat(groups, params.group_size, axis=0)
    centroids += rng.standard_normal((C, D)) * params.sibling_spread

    n_train = C * params.per_class
    train_y = np.repeat(np.arange(C), params.per_class)
    train_X = centroids[train_y] + params.sigma * rng.standard_normal((n_train, D))
    image_index = np.arange(n_train)
    if params.duplicate_rate > 0:
        # each class's first item is always an original
        dup = rng.random(n_train) < params.duplicate_rate
        dup[:: params.per_class] = False
        for i in np.flatnonzero(dup):
            first = i - i % params.per_class
            image_index[i] = image_index[rng.integers(first, i)]
        train_X = train_X[image_index]

    val_y = np.repeat(np.arange(C), params.val_per_class)
    val_X = centroids[val_y] + params.sigma * rng.standard_normal((len(val_y), D))

    vocab = {n: tuple(f"{n}-{k}" for k in range(params.aspect_values)) for n in ASPECT_NAMES}
    alpha = np.full(params.aspect_values, params.aspect_concentration)
    dist = {(c, n): rng.dirichlet(alpha) for c in range(C) for n in ASPECT_NAMES}

    train_ids = np.arange(1, n_train + 1, dtype=np.uint64)
    val_ids = np.arange(n_train + 1, n_train + len(val_y) + 1, dtype=np.uint64)
    aspects = {}
    for ids, ys in ((train_ids, train_y), (val_ids, val_y)):
        for lid, c in zip(ids, ys):
            aspects[int(lid)] = AspectSet(
                (n, vocab[n][rng.choice(params.aspect_values, p=dist[(int(c), n)])]) for n in ASPECT_NAMES
            )
    # duplicate images stand for the same product, so they share aspects
    for i in np.flatnonzero(image_index != np.arange(n_train)):
        aspects[int(train_ids[i])] = aspects[int(train_ids[image_index[i]])]

    return SyntheticDataset(
        params, centroids, train_X, train_y, train_ids, image_index, val_X, val_y, val_ids, aspects, vocab
    )


def isotropic_features(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """Zero-mean, identity-covariance features (the bit-balance workload)."""
    return np.random.default_rng(seed).standard_normal((n, dim))


def predict_aspects_oracle(
    dataset: SyntheticDataset,
    listing_id: int,
    noise_rate: float,
    rng: np.random.Generator,
    weights: AspectWeights = AspectWeights(),
) -> list[tuple[tuple[str, str], float]]:
    """Ground-truth aspects, each swapped for a different value of the same
    name with probability ``noise_rate``."""
    if listing_id not in dataset.aspects:
        raise RejectedInput(f"unknown listing {listing_id}")
    if not 0.0 <= noise_rate <= 1.0:
        raise RejectedInput("noise_rate must lie in [0, 1]")
    out = []
    for name, value in sorted(dataset.aspects[listing_id]):
        others = [v for v in dataset.aspect_vocab.get(name, ()) if v != value]
        if others and rng.random() < noise_rate:
            value = others[rng.integers(len(others))]
        out.append(((name, value), weights.weight(name)))
    return out


@dataclass
class KMeansBaseline:
    centroids: np.ndarray
    assignments: np.ndarray
    clusters: list[CategoryPartition]
    iterations: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _unpack(rows: np.ndarray, nbits: int) -> np.ndarray:
    return np.unpackbits(rows, axis=1, bitorder="little", count=nbits).astype(np.float32)


def _sq_dists(X: np.ndarray, x_sq: np.ndarray, C: np.ndarray) -> np.ndarray:
    return x_sq[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]


def _kmeanspp(words: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seed rows.  Seeds are data points, so the squared Euclidean
    distance between 0/1 vectors is their Hamming distance."""
    n = words.shape[0]
    seeds = [int(rng.integers(n))]
    closest = hamming_words(words, words[seeds[0]]).astype(np.float64)
    for _ in range(1, k):
        total = float(closest.sum())
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        seeds.append(idx)
        np.minimum(closest, hamming_words(words, words[idx]), out=closest)
    return np.array(seeds, dtype=np.int64)


def train_kmeans(
    listing_ids: np.ndarray,
    codes: np.ndarray,
    k: int,
    nbits: int,
    seed: int = 0,
    max_iter: int = 50,
    unpacked: np.ndarray | None = None,
) -> KMeansBaseline:
    """Lloyd's algorithm on hashes read as 0/1 vectors, k-means++ seeding.

    ``unpacked`` may pass in the float32 0/1 matrix when several baselines
    share one corpus.
    """
    n = codes.shape[0]
    if not 1 <= k <= n:
        raise RejectedInput(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    X = unpacked if unpacked is not None else _unpack(codes, nbits)
    x_sq = X.sum(axis=1)
    centers = X[_kmeanspp(as_words(codes), k, rng)].copy()

    assign = np.full(n, -1, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        new = np.empty(n, dtype=np.int64)
        for lo in range(0, n, 4096):
            new[lo : lo + 4096] = np.argmin(_sq_dists(X[lo : lo + 4096], x_sq[lo : lo + 4096], centers), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
        onehot = sparse.csr_matrix((np.ones(n, dtype=np.float32), (assign, np.arange(n))), shape=(k, n))
        sums = np.asarray(onehot @ X)
        counts = np.bincount(assign, minlength=k)
        present = counts > 0
        # empty clusters keep their previous center
        centers[present] = sums[present] / counts[present, None]

    clusters = []
    for j in range(k):
        members = np.flatnonzero(assign == j)
        ids = listing_ids[members]
        o = np.argsort(ids)
        clusters.append(CategoryPartition(j, ids[o], codes[members][o], 0, nbits))
    return KMeansBaseline(centers, assign, clusters, it)


def kmeans_search(q: BinarySignature, baseline: KMeansBaseline, n: int, m: int, k: int) -> Hits:
    """Nearest ``n`` centers by Euclidean distance, top ``m`` by Hamming inside
    each, then the best ``k`` of the pooled candidates."""
    x = q.bits().astype(np.float32)
    d = _sq_dists(x[None, :], np.array([x.sum()]), baseline.centroids)[0]
    # exact ties must not hinge on float32 rounding
    d = np.round(d, 3)
    near = np.lexsort((np.arange(baseline.k), d))[:n]
    return merge_hits((scan_partition(baseline.clusters[j], q, m) for j in near), k)


@dataclass(frozen=True)
class Ours:
    n: int
    cumulative: bool = False
    threshold: float = 0.95

    @property
    def mode(self) -> PredictionMode:
        return Cumulative(self.n, self.threshold) if self.cumulative else AbsoluteTopN(self.n)

    @property
    def label(self) -> str:
        return f"ours-{'cum' if self.cumulative else 'abs'}-N{self.n}"


@dataclass(frozen=True)
class KMeans:
    k: int
    n: int

    @property
    def label(self) -> str:
        return f"kmeans-k{self.k}-N{self.n}"


@dataclass(frozen=True)
class Exhaustive:
    @property
    def label(self) -> str:
        return "exhaustive"


Method = Ours | KMeans | Exhaustive


@dataclass
class MetricReport:
    method: str
    k_grid: tuple[int, ...]
    precision: dict[int, float]
    accuracy: dict[int, float]
    ndcg_knn: dict[int, float]
    ndcg_category: dict[int, float]
    params: dict = field(default_factory=dict)
    ms_per_query: float | None = None

    def rows(self) -> list[dict]:
        return [
            {
                "method": self.method,
                "K": K,
                "precision": self.precision[K],
                "accuracy": self.accuracy[K],
                "ndcg_knn": self.ndcg_knn[K],
                "ndcg_category": self.ndcg_category[K],
            }
            for K in self.k_grid
        ]


def _dcg_weights(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


class Bench:
    """Fixed evaluation context: hashed train index, hashed queries and
    category predictions, shared by every method under test."""

    def __init__(
        self,
        dataset: SyntheticDataset,
        projector: HashProjector,
        category_model: CategoryModel | None = None,
        fetch: int = 50,
        kmeans_seed: int = 0,
        kmeans_iter: int = 50,
    ):
        self.dataset = dataset
        self.projector = projector
        self.nbits = projector.nbits
        self.fetch = fetch
        self.kmeans_seed = kmeans_seed
        self.kmeans_iter = kmeans_iter
        self.model = category_model or dataset.category_model()

        self.train_codes = extract_hashes(dataset.train_X, projector)
        self.val_codes = extract_hashes(dataset.val_X, projector)
        self.train_words = as_words(self.train_codes)
        self.all_part = CategoryPartition(-1, dataset.train_ids, self.train_codes, 0, self.nbits)
        parts = {}
        for c in dataset.categories:
            rows = np.flatnonzero(dataset.train_y == c)
            parts[c] = (CategoryPartition(c, dataset.train_ids[rows], self.train_codes[rows], 0, self.nbits),)
        self.node = SearchNode("bench", parts, workers=1)
        self.label_of_id = np.zeros(int(dataset.train_ids.max()) + 1, dtype=np.int64)
        self.label_of_id[dataset.train_ids.astype(np.int64)] = dataset.train_y
        self.class_sizes = np.bincount(dataset.train_y, minlength=dataset.params.classes)

        probs = self.model.probabilities(dataset.val_X)
        order = self.model.rank(probs)
        self.ranked_categories = [
            [(int(self.model.category_ids[j]), float(probs[i, j])) for j in order[i]] for i in range(len(probs))
        ]
        self._kmeans: dict[int, KMeansBaseline] = {}
        self._unpacked: np.ndarray | None = None
        self._truth: dict[int, np.ndarray] = {}

    def query_signature(self, i: int) -> BinarySignature:
        return BinarySignature(self.val_codes[i].tobytes(), self.nbits)

    def kmeans(self, k: int) -> KMeansBaseline:
        if k not in self._kmeans:
            if self._unpacked is None:
                self._unpacked = _unpack(self.train_codes, self.nbits)
            self._kmeans[k] = train_kmeans(
                self.dataset.train_ids,
                self.train_codes,
                k,
                self.nbits,
                self.kmeans_seed,
                self.kmeans_iter,
                self._unpacked,
            )
        return self._kmeans[k]

    def categories_for(self, i: int, method: Ours) -> list[tuple[int, float]]:
        return truncate(self.ranked_categories[i], method.mode)

    def search(self, method: Method, i: int, k: int) -> Hits:
        q = self.query_signature(i)
        if isinstance(method, Ours):
            req = QueryRequest(q, tuple(self.categories_for(i, method)), n=k, fetch=self.fetch)
            partial = self.node.search(req)
            return merge_hits(partial.per_category.values(), k)
        if isinstance(method, KMeans):
            return kmeans_search(q, self.kmeans(method.k), method.n, self.fetch, k)
        return scan_partition(self.all_part, q, k)

    def exact_knn(self, k: int) -> np.ndarray:
        """Ground-truth top-``k`` train ids per query over the whole train split."""
        if k not in self._truth:
            out = np.zeros((len(self.val_codes), k), dtype=np.uint64)
            for i in range(len(self.val_codes)):
                out[i] = scan_partition(self.all_part, self.query_signature(i), k).listing_ids
            self._truth[k] = out
        return self._truth[k]

    def evaluate(self, method: Method, k_grid: Sequence[int] = (1, 10, 20, 50, 100)) -> MetricReport:
        if len(self.train_codes) == 0:
            raise RejectedInput("empty index")
        k_grid = tuple(sorted(set(int(k) for k in k_grid)))
        kmax = k_grid[-1]
        truth = self.exact_knn(kmax)
        nq = len(self.val_codes)
        prec = {K: np.zeros(nq) for K in k_grid}
        acc = {K: np.zeros(nq) for K in k_grid}
        nd_knn = {K: np.zeros(nq) for K in k_grid}
        nd_cat = {K: np.zeros(nq) for K in k_grid}
        w = _dcg_weights(kmax)
        for i in range(nq):
            hits = self.search(method, i, kmax)
            ids = hits.listing_ids.astype(np.int64)
            same = (self.label_of_id[ids] == self.dataset.val_y[i]).astype(np.float64)
            for K in k_grid:
                top = same[:K]
                if top.size:
                    prec[K][i] = top.mean()
                    acc[K][i] = float(top.any())
                gt = set(truth[i, :K].tolist())
                rel = np.array([lid in gt for lid in ids[:K].tolist()], dtype=np.float64)
                ideal = w[: min(K, len(gt))].sum()
                nd_knn[K][i] = (rel * w[: rel.size]).sum() / ideal if ideal else 0.0
                ideal_cat = w[: min(K, int(self.class_sizes[self.dataset.val_y[i]]))].sum()
                nd_cat[K][i] = (top * w[: top.size]).sum() / ideal_cat if ideal_cat else 0.0
        mean = lambda d: {K: float(v.mean()) for K, v in d.items()}
        params = {"M": self.fetch, "nbits": self.nbits, **{k: v for k, v in asdict(method).items()}}
        return MetricReport(method.label, k_grid, mean(prec), mean(acc), mean(nd_knn), mean(nd_cat), params)

    def time_method(self, method: Method, k: int = 50, queries: Sequence[int] | None = None) -> float:
        """Mean ms per query for ranking only; hashing and prediction are precomputed."""
        qs = list(queries) if queries is not None else list(range(len(self.val_codes)))
        if isinstance(method, KMeans):
            self.kmeans(method.k)
        t0 = time.perf_counter()
        for i in qs:
            self.search(method, i, k)
        return (time.perf_counter() - t0) * 1000.0 / max(1, len(qs))


@dataclass
class TimingTable:
    methods: list[str]
    runs: dict[str, list[float]]

    def median(self, label: str) -> float:
        return float(np.median(self.runs[label]))

    def spread(self, label: str) -> float:
        r = self.runs[label]
        return float(np.std(r) / np.mean(r)) if len(r) > 1 else 0.0

    def speedup(self, baseline: str, label: str) -> float:
        return self.median(baseline) / self.median(label)


def bench_timing(
    bench: Bench,
    methods: Sequence[Method],
    repetitions: int = 3,
    k: int = 50,
    queries: Sequence[int] | None = None,
) -> TimingTable:
    runs = {m.label: [] for m in methods}
    for m in methods:
        bench.time_method(m, k, list(queries or range(len(bench.val_codes)))[:5])
    for _ in range(repetitions):
        for m in methods:
            runs[m.label].append(bench.time_method(m, k, queries))
    return TimingTable([m.label for m in methods], runs)


def format_reports(reports: Sequence[MetricReport]) -> str:
    """Aligned text table, one row per (method, K)."""
    head = f"{'method':<22}{'K':>6}{'prec':>9}{'acc':>9}{'ndcg_nn':>9}{'ndcg_cat':>9}"
    lines = [head, "-" * len(head)]
    for rep in reports:
        for row in rep.rows():
            lines.append(
                f"{row['method']:<22}{row['K']:>6}{row['precision']:>9.4f}{row['accuracy']:>9.4f}"
                f"{row['ndcg_knn']:>9.4f}{row['ndcg_category']:>9.4f}"
            )
    return "\n".join(lines) + "\n"


def reports_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, ["method", "K", "precision", "accuracy", "ndcg_knn", "ndcg_category"], lineterminator="\n"
    )
    writer.writeheader()
    for rep in reports:
        for row in rep.rows():
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def format_timing(table: TimingTable, baseline: str | None = None) -> str:
    lines = [f"{'method':<22}{'median ms':>11}{'spread':>9}{'speedup':>10}"]
    for label in table.methods:
        sp = f"{table.speedup(baseline, label):>9.1f}x" if baseline else ""
        lines.append(f"{label:<22}{table.median(label):>11.3f}{table.spread(label):>9.3f}{sp}")
    return "\n".join(lines) + "\n"


def storage_report(n_records: int = 200_000_000, nbits: int = 4096, float_dim: int = 8192) -> str:
    from .index import float_vector_bytes, record_stride, storage_bytes, storage_reduction

    stride = record_stride((nbits + 7) // 8)
    total = storage_bytes(n_records, nbits)
    floats = n_records * float_vector_bytes(float_dim)
    return (
        f"record stride          {stride} B (8 B id + {(nbits + 7) // 8} B hash)\n"
        f"index for {n_records:,} items  {total / 2**30:.1f} GiB ({total / 1e9:.1f} GB)\n"
        f"float32 x {float_dim} vectors  {floats / 2**40:.2f} TiB ({float_vector_bytes(float_dim)} B each)\n"
        f"hash storage reduction {100 * storage_reduction(nbits, float_dim):.2f}%\n"
    )
