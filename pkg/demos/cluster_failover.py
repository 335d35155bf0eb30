"""
Four nodes, one failure
=======================

Partitions are placed on a consistent-hash ring. When a node stops answering,
queries are flagged degraded until the survivors drop it and take over its
slices.
"""

import numpy as np

from visearch.cluster import ClusterView, Membership, SimulatedBus, compute_assignment
from visearch.index import CategoryPartition
from visearch.ranker import LocalTransport, QueryRequest, SearchNode, fanout_search
from visearch.server import holdings_for
from visearch.sigcore import BinarySignature

rng = np.random.default_rng(0)
catalog = {
    c: CategoryPartition(c, np.arange(c * 10_000, c * 10_000 + 3000, dtype=np.uint64),
                         rng.integers(0, 256, size=(3000, 512), dtype=np.uint8))
    for c in range(6)
}

# %%
# Each category is cut into one slice per member; the ring picks who takes slice 0.
members = ["n1", "n2", "n3", "n4"]
view = ClusterView.of(members, epoch=1)
assignment = compute_assignment(view, list(catalog))
for c in catalog:
    print(f"category {c}:", [assignment.owner(c, i) for i in range(4)])

nodes = {m: SearchNode(m, holdings_for(view, m, catalog)) for m in members}
transport = LocalTransport(nodes)
query = QueryRequest(BinarySignature.random(rng, 4096), tuple((c, 1.0) for c in catalog), n=10)
healthy = fanout_search(query, view, transport)
print("healthy:", "degraded" if healthy.degraded else "complete", [r.listing_id for r in healthy.results[:5]])

# %%
# n3 crashes. The next answer still arrives, built from the three live nodes.
bus = SimulatedBus(members)
transport.kill("n3")
bus.kill("n3")
hurt = fanout_search(query, view, transport)
print("after crash:", "degraded" if hurt.degraded else "complete", "missing", hurt.missing_nodes,
      "lost slices", hurt.partitions_missing)

# %%
# Three missed heartbeats later every survivor agrees on a new view and reloads.
survivors = {m: Membership(m, members) for m in ("n1", "n2", "n4")}
for m, ms in survivors.items():
    ms.view = view
    ms.subscribe(lambda old, new, m=m: nodes[m].install(holdings_for(new, m, catalog)))
for beat in range(1, 4):
    for ms in survivors.values():
        ms.heartbeat(bus.probe)
    print(f"heartbeat {beat}: view", survivors["n1"].view.members, "epoch", survivors["n1"].view.epoch)

healed = fanout_search(query, survivors["n1"].view, transport)
print("after redistribution:", "degraded" if healed.degraded else "complete",
      "same as before crash:", [r.listing_id for r in healed.results] == [r.listing_id for r in healthy.results])
