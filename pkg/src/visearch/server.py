"""TCP node runtime for ``visearch serve``.

A node answers two message families on one port, told apart by magic:
queries (``EBVSQRY1``) and membership pings (``EBVSMBR1``).  Discovery
re-reads a static member file each heartbeat; liveness is a ping that must
come back within the heartbeat interval.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from pathlib import Path
from typing import Callable, Mapping

from .cluster import (
    MEMBER_MAGIC,
    PING,
    PONG,
    ClusterView,
    MemberMessage,
    Membership,
    NodeId,
    compute_assignment,
    on_membership_change,
    read_member_file,
)
from .errors import ClusterUnavailable, ConfigError, CorruptionError, RejectedInput
from .index import CategoryPartition, load_category_root, split_partition
from .ranker import (
    REQUEST_MAGIC,
    RERANK_CAP,
    SearchNode,
    TcpTransport,
    decode_request,
    encode_response,
    fanout_search,
    merge_across_categories,
    partial_to_results,
    rerank,
)
from .sigcore import AspectSet, ScoringConfig
from . import wire

log = logging.getLogger(__name__)


def holdings_for(
    view: ClusterView, node: NodeId, catalog: Mapping[int, CategoryPartition]
) -> dict[int, list[CategoryPartition]]:
    """The pieces of each category that ``node`` owns under ``view``."""
    out: dict[int, list[CategoryPartition]] = {}
    if node not in view.members:
        return out
    assignment = compute_assignment(view, list(catalog))
    for key in assignment.held_by(node):
        out.setdefault(key.category_id, []).append(split_partition(catalog[key.category_id], key.count)[key.index])
    return out


def ping(address: tuple[str, int], sender: NodeId, timeout: float) -> MemberMessage | None:
    try:
        raw = wire.request(address, MemberMessage(PING, sender).encode(), timeout)
        reply = MemberMessage.decode(raw)
    except (OSError, ConnectionError, CorruptionError):
        return None
    return reply if reply.kind == PONG else None


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        node: "NodeServer" = self.server.node  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        try:
            while True:
                raw = wire.recv_frame(sock)
                if raw is None:
                    return
                wire.send_frame(sock, node.dispatch(raw))
        except (OSError, ConnectionError, CorruptionError) as exc:
            log.debug("%s: connection dropped: %s", node.node_id, exc)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class NodeServer:
    """One serving node: index holdings, membership loop and the TCP listener."""

    def __init__(
        self,
        node_id: NodeId,
        members_file,
        index_root,
        model_version: int = 1,
        workers: int = 1,
        heartbeat: float = 1.0,
        timeout: float = 0.5,
        aspects: Mapping[int, AspectSet] | None = None,
        scoring: ScoringConfig = ScoringConfig(),
        fetch: int = 50,
    ):
        self.node_id = node_id
        self.members_file = Path(members_file)
        self.addresses = read_member_file(self.members_file)
        if node_id not in self.addresses:
            raise ConfigError(f"node {node_id} is not listed in {members_file}")
        self.catalog = load_category_root(index_root, model_version)
        if not self.catalog:
            raise ConfigError(f"no index files under {Path(index_root) / str(model_version)}")
        self.heartbeat = heartbeat
        self.timeout = timeout
        self.aspects = dict(aspects or {})
        self.scoring = scoring
        self.fetch = fetch
        self.search_node = SearchNode(node_id, workers=workers)
        self.membership = Membership(node_id)
        self.membership.subscribe(self._on_change)
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._server: _Server | None = None
        self._loop: threading.Thread | None = None
        self._install(None, self.membership.view)

    @property
    def view(self) -> ClusterView:
        return self.membership.view

    @property
    def address(self) -> tuple[str, int]:
        return self.addresses[self.node_id]

    def _install(self, old: ClusterView | None, new: ClusterView) -> None:
        plan = on_membership_change(old, new, list(self.catalog), self.node_id)
        self.search_node.install(holdings_for(new, self.node_id, self.catalog))
        log.info(
            "%s: redistribution epoch=%d members=%s load=%d drop=%d",
            self.node_id, new.epoch, ",".join(new.members), len(plan.load), len(plan.drop),
        )
        # the held set as a whole, so restarts can be compared line by line
        held = compute_assignment(new, list(self.catalog)).held_by(self.node_id)
        log.info("%s: holds %s", self.node_id, " ".join(f"{k.category_id}/{k.index}of{k.count}" for k in held))

    def _on_change(self, old: ClusterView, new: ClusterView) -> None:
        self._install(old, new)

    def _discover(self) -> list[NodeId]:
        self.addresses = read_member_file(self.members_file)
        return list(self.addresses)

    def _probe(self, node: NodeId) -> bool:
        addr = self.addresses.get(node)
        return addr is not None and ping(addr, self.node_id, self.heartbeat) is not None

    def tick(self) -> ClusterView:
        with self._lock:
            return self.membership.resolve_members(self._discover, self._probe)

    def dispatch(self, raw: bytes) -> bytes:
        magic = raw[:8]
        if magic == MEMBER_MAGIC:
            msg = MemberMessage.decode(raw)
            if msg.kind != PING:
                raise CorruptionError(f"unexpected membership message kind {msg.kind}")
            view = self.view
            return MemberMessage(PONG, self.node_id, view.epoch, view.members).encode()
        if magic != REQUEST_MAGIC:
            raise CorruptionError("unknown message magic")
        req = decode_request(raw)
        nbits = req.signature.nbits
        if req.local:
            partial = self.search_node.search(req)
            return encode_response(req.request_id, False, partial_to_results(partial, nbits))
        transport = TcpTransport(lambda: self.addresses, self.timeout, local={self.node_id: self.search_node})
        try:
            resp = fanout_search(req, self.view, transport, self.timeout)
        except ClusterUnavailable as exc:
            log.warning("%s: query %d failed: %s", self.node_id, req.request_id, exc)
            return encode_response(req.request_id, True, [])
        results = resp.results
        if req.rerank and req.predicted_aspects:
            pool_size = min(RERANK_CAP, req.per_category * len(req.categories))
            pool = merge_across_categories(resp.per_category, pool_size, nbits)
            results = rerank(pool, req.predicted_aspects, self.aspects, self.scoring)[: req.n]
        return encode_response(req.request_id, resp.degraded, results)

    def start(self) -> None:
        host, port = self.address
        try:
            self._server = _Server((host, port), _Handler)
        except OSError as exc:
            raise ConfigError(f"cannot listen on {host}:{port}: {exc}") from exc
        self._server.node = self  # type: ignore[attr-defined]
        threading.Thread(target=self._server.serve_forever, name=f"listen-{self.node_id}", daemon=True).start()
        self._loop = threading.Thread(target=self._run_loop, name=f"members-{self.node_id}", daemon=True)
        self._loop.start()
        log.info("%s: listening on %s:%d", self.node_id, host, port)

    def _run_loop(self) -> None:
        while not self._stop.is_set():
            try:
                self.tick()
            except (RejectedInput, ConfigError, CorruptionError) as exc:
                log.warning("%s: membership tick failed: %s", self.node_id, exc)
            self._stop.wait(self.heartbeat)

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        self.search_node.close()

    def serve_forever(self, should_stop: Callable[[], bool] | None = None) -> None:
        self.start()
        try:
            while not self._stop.wait(0.2):
                if should_stop is not None and should_stop():
                    break
        finally:
            self.stop()
