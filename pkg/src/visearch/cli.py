"""Operator command line: ``visearch <command> [options]``.

Settings come from a JSON config file (``--config``), then the environment
(``VISEARCH_DATA_ROOT``, ``VISEARCH_PORT``), then flags.  Exit codes: 0 ok,
1 rejected input, 2 usage, 3 config, 4 data corruption, 5 cluster
unavailable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ClusterUnavailable, ConfigError, RejectedInput, VisearchError

log = logging.getLogger("visearch")


@dataclass
class Config:
    data_root: str = "visearch-data"
    bits: int = 4096
    dim: int = 128
    seed: int = 1
    model_version: int = 1
    lam: float = 0.75
    aspect_weights: dict = field(default_factory=lambda: {"size": 3.0, "brand": 3.0, "price": 3.0})
    default_aspect_weight: float = 1.0
    fetch: int = 50
    n: int = 50
    top_n: int = 5
    members: str | None = None
    heartbeat: float = 1.0
    timeout: float = 0.5
    workers: int = 1
    port: int | None = None

    def validate(self) -> "Config":
        checks = [
            (self.bits >= 1, "bits must be positive"),
            (self.dim >= 1, "dim must be positive"),
            (0 <= self.seed < 2**64, "seed must fit in 64 bits"),
            (0 <= self.model_version < 2**16, "model_version must fit in 16 bits"),
            (0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]"),
            (all(w > 0 for w in self.aspect_weights.values()) and self.default_aspect_weight > 0,
             "aspect weights must be positive"),
            (self.fetch >= 1 and self.n >= 1 and self.top_n >= 1, "fetch, n and top_n must be positive"),
            (self.heartbeat > 0 and self.timeout > 0, "heartbeat and timeout must be positive"),
            (self.workers >= 1, "workers must be at least 1"),
            (self.port is None or 0 < self.port < 65536, "port out of range"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"config: {msg}")
        if self.members is not None and not Path(self.members).is_file():
            raise ConfigError(f"config: member file {self.members} not found")
        return self

    @property
    def root(self) -> Path:
        return Path(self.data_root)

    def projector(self):
        from .hashmodel import HashProjector

        return HashProjector(self.seed, self.bits, self.dim, self.model_version)

    def scoring(self):
        from .sigcore import ScoringConfig

        return ScoringConfig(self.lam, self.bits)

    def weights(self):
        from .sigcore import AspectWeights

        return AspectWeights(dict(self.aspect_weights), self.default_aspect_weight)


_OVERRIDES = ("data_root", "bits", "dim", "seed", "model_version", "lam", "fetch", "n", "top_n",
              "members", "heartbeat", "timeout", "workers", "port")


def load_config(args: argparse.Namespace) -> Config:
    values: dict = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(values) - {f.name for f in fields(Config)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "VISEARCH_DATA_ROOT" in os.environ:
        values["data_root"] = os.environ["VISEARCH_DATA_ROOT"]
    if "VISEARCH_PORT" in os.environ:
        try:
            values["port"] = int(os.environ["VISEARCH_PORT"])
        except ValueError as exc:
            raise ConfigError("VISEARCH_PORT must be an integer") from exc
    for name in _OVERRIDES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = Config(**values)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    return cfg.validate()


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise RejectedInput(f"expected comma-separated integers, got {text!r}") from exc


def _dataset_dir(cfg: Config, arg) -> Path:
    return Path(arg) if arg else cfg.root / "dataset"


# commands


def cmd_gen(args, cfg: Config) -> int:
    from .evalbench import SyntheticParams, generate

    params = SyntheticParams(
        classes=args.classes,
        per_class=args.per_class,
        val_per_class=args.val_per_class,
        dim=cfg.dim,
        sigma=args.sigma,
        separation=args.separation,
        group_size=args.group_size,
        sibling_spread=args.sibling_spread,
        duplicate_rate=args.duplicate_rate,
        seed=args.data_seed,
    )
    ds = generate(params)
    out = _dataset_dir(cfg, args.out)
    ds.save(out)
    with open(out / "updates.tsv", "w") as fh:
        for u in ds.updates():
            fh.write(u.to_line() + "\n")
    print(f"wrote {len(ds.train_ids)} train and {len(ds.val_ids)} validation items over {params.classes} classes to {out}")
    return 0


def cmd_ingest(args, cfg: Config) -> int:
    from .ingest import HashStore, IngestCounts, IngestPipeline, SyntheticFeaturizer, read_updates

    path = Path(args.updates) if args.updates else cfg.root / "dataset" / "updates.tsv"
    try:
        with open(path) as fh:
            updates = read_updates(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read updates {path}: {exc}") from exc
    store = HashStore(args.store or cfg.root / "store")
    try:
        projector = cfg.projector()
        if store.projectors and projector.version not in store.versions:
            raise ConfigError(f"store holds model versions {list(store.versions)}, config asks for {projector.version}")
        pipe = IngestPipeline(store, SyntheticFeaturizer(cfg.dim, cfg.seed), projector)
        total = IngestCounts()
        for lo in range(0, len(updates), args.batch):
            total += pipe.ingest_batch(updates[lo : lo + args.batch])
        live = sum(1 for s in store.listings.values() if s.live)
    finally:
        store.close()
    print(
        f"updates {len(updates)}  hashed {total.hashed}  duplicates {total.duplicates}  "
        f"deletions {total.deletions}  unknown_deletes {total.unknown_deletes}  unchanged {total.unchanged}"
    )
    print(f"hash computations {pipe.hash_computations}  live listings {live}  images {len(store.images)}")
    return 0


def cmd_extract(args, cfg: Config) -> int:
    from .ingest import HashStore, IngestPipeline, SyntheticFeaturizer

    store = HashStore(args.store or cfg.root / "store")
    try:
        if not store.projectors:
            raise ConfigError("hash store is empty; run ingest first")
        live_cats = sorted({s.category_id for s in store.listings.values() if s.live})
        supported = _int_list(args.categories) if args.categories else live_cats
        skipped = {}
        for s in store.listings.values():
            if s.live and s.category_id not in set(supported):
                skipped[s.category_id] = skipped.get(s.category_id, 0) + 1
        for cat in sorted(skipped):
            print(f"warning: category {cat} is not supported; {skipped[cat]} listings omitted", file=sys.stderr)
        pipe = IngestPipeline(store, SyntheticFeaturizer(cfg.dim, cfg.seed))
        manifest = pipe.run_extract(cfg.model_version, supported, args.out or cfg.root / "index", args.job_partitions)
    finally:
        store.close()
    print(manifest.to_text(), end="")
    return 0


def _aspect_lookup(store_dir) -> dict:
    from .ingest import HashStore

    if store_dir is None or not Path(store_dir).exists():
        return {}
    store = HashStore(store_dir)
    try:
        return {lid: s.aspects for lid, s in store.listings.items() if s.live}
    finally:
        store.close()


def cmd_serve(args, cfg: Config) -> int:
    from .server import NodeServer

    if cfg.members is None:
        raise ConfigError("serve needs a member file (--members or config 'members')")
    store_dir = args.store if args.store else cfg.root / "store"
    node = NodeServer(
        args.node_id,
        cfg.members,
        args.index_root or cfg.root / "index",
        model_version=cfg.model_version,
        workers=cfg.workers,
        heartbeat=cfg.heartbeat,
        timeout=cfg.timeout,
        aspects=_aspect_lookup(store_dir),
        scoring=cfg.scoring(),
    )
    if cfg.port is not None:
        host, _ = node.addresses[args.node_id]
        node.addresses[args.node_id] = (host, cfg.port)
    stop = {"flag": False}

    def _term(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGTERM, _term)
    signal.signal(signal.SIGINT, _term)
    node.serve_forever(lambda: stop["flag"])
    return 0


def _parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as exc:
        raise RejectedInput(f"address must look like host:port, got {text!r}") from exc


def cmd_query(args, cfg: Config) -> int:
    from .evalbench import SyntheticDataset, read_features
    from .hashmodel import AbsoluteTopN, Cumulative, extract_hash, predict_categories
    from .sigcore import AspectSet, BinarySignature

    t0 = time.perf_counter()
    model = None
    if args.dataset or not args.categories:
        model = SyntheticDataset.load(_dataset_dir(cfg, args.dataset)).category_model()
    if args.hex:
        if args.features:
            raise RejectedInput("give either --hex or --features, not both")
        sig = BinarySignature.from_hex(args.hex, cfg.bits)
        x = None
    elif args.features:
        X = read_features(args.features)
        if not 0 <= args.row < len(X):
            raise RejectedInput(f"row {args.row} outside feature file of {len(X)} rows")
        x = X[args.row]
        sig = extract_hash(x, cfg.projector())
    else:
        raise RejectedInput("query needs --hex or --features")
    if args.categories:
        categories = [(c, 1.0) for c in _int_list(args.categories)]
    else:
        if x is None:
            raise RejectedInput("a raw hash query needs --categories")
        mode = Cumulative(cfg.top_n) if args.cumulative else AbsoluteTopN(cfg.top_n)
        categories = list(predict_categories(x, model, mode).ranked)
    predicted = cfg.weights().attach(AspectSet.decode(args.aspects)) if args.aspects else []
    t_predict = time.perf_counter()

    results, degraded, remote = _run_query(args, cfg, sig, categories, predicted)
    t_end = time.perf_counter()

    print(f"{'rank':>4}  {'listing_id':>12}  {'category':>8}  {'hamming':>7}  {'s_app':>7}  {'s_asp':>7}  {'s_final':>7}")
    for i, r in enumerate(results, 1):
        print(
            f"{i:>4}  {r.listing_id:>12}  {r.category_id:>8}  {r.hamming:>7}  "
            f"{r.s_appearance:>7.4f}  {r.s_aspect:>7.4f}  {r.s_final:>7.4f}"
        )
    print(f"categories {' '.join(f'{c}:{w:.3f}' for c, w in categories)}")
    print(f"degraded {str(degraded).lower()}")
    stages = {"hash_predict": t_predict - t0, **remote, "total": t_end - t0}
    print("latency_ms " + " ".join(f"{k}={v * 1000:.2f}" for k, v in stages.items()))
    return 0


def _run_query(args, cfg: Config, sig, categories, predicted):
    from .cluster import ClusterView, read_member_file
    from .index import load_category_root
    from .ranker import LocalTransport, QueryRequest, SearchNode, SearchService, query_remote

    rerank_on = not args.no_rerank
    if args.local:
        catalog = load_category_root(args.index_root or cfg.root / "index", cfg.model_version)
        if not catalog:
            raise ConfigError("no index files to query")
        node = SearchNode("local", {c: [p] for c, p in catalog.items()}, cfg.workers)
        service = SearchService(
            LocalTransport({"local": node}),
            ClusterView.of(["local"]),
            aspects=_aspect_lookup(args.store or cfg.root / "store") if predicted else None,
            scoring=cfg.scoring(),
            fetch=cfg.n,
            n=cfg.n,
            timeout=max(cfg.timeout, 30.0),
        )
        out = service.query(signature=sig, categories=categories, predicted_aspects=predicted, rerank_results=rerank_on)
        node.close()
        t = out.timings
        return out.results, out.degraded, {k: t[k] for k in ("fanout", "merge", "rerank")}
    if args.address:
        addr = _parse_address(args.address)
    elif cfg.members and args.node:
        members = read_member_file(cfg.members)
        if args.node not in members:
            raise ConfigError(f"node {args.node} not in member file")
        addr = members[args.node]
    else:
        raise RejectedInput("query needs --address, --members with --node, or --local")
    req = QueryRequest(sig, tuple(categories), n=cfg.n, predicted_aspects=tuple(predicted), rerank=rerank_on)
    t = time.perf_counter()
    try:
        degraded, results = query_remote(addr, req, timeout=args.wait)
    except (OSError, ConnectionError) as exc:
        raise ClusterUnavailable(f"cannot reach {addr[0]}:{addr[1]}: {exc}") from exc
    return results, degraded, {"remote": time.perf_counter() - t}


def _bench(args, cfg: Config):
    from .evalbench import Bench, SyntheticDataset

    ds = SyntheticDataset.load(_dataset_dir(cfg, args.dataset))
    if ds.train_X.shape[1] != cfg.dim:
        raise ConfigError(f"dataset dimension {ds.train_X.shape[1]} != configured dim {cfg.dim}")
    return Bench(ds, cfg.projector(), fetch=cfg.fetch, kmeans_seed=args.kmeans_seed)


def _reports_dir(cfg: Config, arg) -> Path:
    d = Path(arg) if arg else cfg.root / "reports"
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_eval(args, cfg: Config) -> int:
    from .evalbench import KMeans, Ours, format_reports, reports_csv, storage_report

    bench = _bench(args, cfg)
    methods = [Ours(n) for n in _int_list(args.n_grid)]
    methods += [Ours(n, cumulative=True) for n in _int_list(args.cumulative_grid)]
    methods += [KMeans(k, args.kmeans_probe) for k in _int_list(args.kmeans)]
    k_grid = _int_list(args.k_grid)
    reports = []
    for m in methods:
        reports.append(bench.evaluate(m, k_grid))
        log.info("evaluated %s", m.label)
    out = _reports_dir(cfg, args.out)
    text = format_reports(reports) + "\nstorage\n" + storage_report(nbits=cfg.bits)
    (out / "metrics.txt").write_text(text)
    (out / "metrics.csv").write_text(reports_csv(reports))
    print(text, end="")
    print(f"reports written to {out}")
    return 0


def cmd_bench(args, cfg: Config) -> int:
    from .evalbench import Exhaustive, KMeans, Ours, bench_timing, format_timing

    bench = _bench(args, cfg)
    methods = [Exhaustive()] + [Ours(n) for n in _int_list(args.n_grid)]
    methods += [KMeans(k, args.kmeans_probe) for k in _int_list(args.kmeans)]
    nq = len(bench.val_codes)
    queries = list(range(min(nq, args.queries))) if args.queries else None
    table = bench_timing(bench, methods, args.repetitions, k=cfg.fetch, queries=queries)
    text = format_timing(table, baseline="exhaustive")
    out = _reports_dir(cfg, args.out)
    (out / "timing.txt").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visearch", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--bits", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--seed", type=int, help="projector seed")
    common.add_argument("--model-version", dest="model_version", type=int)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--val-per-class", type=int, default=10)
    g.add_argument("--sigma", type=float, default=0.3)
    g.add_argument("--separation", type=float, default=1.0)
    g.add_argument("--group-size", type=int, default=1)
    g.add_argument("--sibling-spread", type=float, default=0.0)
    g.add_argument("--duplicate-rate", type=float, default=0.0)
    g.add_argument("--data-seed", type=int, default=0, help="dataset seed")
    g.set_defaults(fn=cmd_gen)

    i = sub.add_parser("ingest", parents=[common], help="ingest an update stream into the hash store")
    i.add_argument("--updates")
    i.add_argument("--store")
    i.add_argument("--batch", type=int, default=1024)
    i.set_defaults(fn=cmd_ingest)

    e = sub.add_parser("extract", parents=[common], help="write per-category index files")
    e.add_argument("--store")
    e.add_argument("--out")
    e.add_argument("--categories", help="supported category ids, comma separated (default: all)")
    e.add_argument("--job-partitions", type=int, default=4)
    e.set_defaults(fn=cmd_extract)

    s = sub.add_parser("serve", parents=[common], help="run a search node")
    s.add_argument("--node-id", required=True)
    s.add_argument("--members")
    s.add_argument("--index-root")
    s.add_argument("--store")
    s.add_argument("--workers", type=int)
    s.add_argument("--heartbeat", type=float)
    s.add_argument("--timeout", type=float)
    s.add_argument("--port", type=int)
    s.set_defaults(fn=cmd_serve)

    q = sub.add_parser("query", parents=[common], help="issue one query")
    q.add_argument("--hex", help="query hash as hex")
    q.add_argument("--features", help="feature file holding the query vector")
    q.add_argument("--row", type=int, default=0)
    q.add_argument("--dataset", help="dataset whose category model predicts categories")
    q.add_argument("--categories")
    q.add_argument("--cumulative", action="store_true", help="cumulative-confidence category mode")
    q.add_argument("--top-n", dest="top_n", type=int)
    q.add_argument("-n", dest="n", type=int)
    q.add_argument("--aspects", help="predicted aspects as name=value;...")
    q.add_argument("--no-rerank", action="store_true")
    q.add_argument("--address")
    q.add_argument("--members")
    q.add_argument("--node")
    q.add_argument("--local", action="store_true", help="search index files in-process")
    q.add_argument("--index-root")
    q.add_argument("--store")
    q.add_argument("--workers", type=int)
    q.add_argument("--wait", type=float, default=10.0, help="client timeout in seconds")
    q.set_defaults(fn=cmd_query)

    for name, fn, help_ in (("eval", cmd_eval, "retrieval metrics"), ("bench", cmd_bench, "ranking latency")):
        b = sub.add_parser(name, parents=[common], help=help_)
        b.add_argument("--dataset")
        b.add_argument("--out")
        b.add_argument("--fetch", type=int, help="per-category fetch M")
        b.add_argument("--n-grid", default="1,3,5,10")
        b.add_argument("--kmeans", default="16,64,256")
        b.add_argument("--kmeans-probe", type=int, default=5)
        b.add_argument("--kmeans-seed", type=int, default=0)
        if name == "eval":
            b.add_argument("--cumulative-grid", default="5,10")
            b.add_argument("--k-grid", default="1,10,20,50,100")
        else:
            b.add_argument("--repetitions", type=int, default=3)
            b.add_argument("--queries", type=int, default=200)
        b.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args)
        return args.fn(args, cfg)
    except VisearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
