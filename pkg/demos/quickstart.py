"""
Visual search in one file
=========================

Hash a synthetic catalog, index it per category, answer a query restricted to
the predicted categories, then re-rank the answer with product aspects.
"""

import numpy as np

from visearch import HashProjector, extract_hash
from visearch.cluster import ClusterView
from visearch.evalbench import Bench, Ours, SyntheticParams, generate, predict_aspects_oracle
from visearch.ranker import LocalTransport, SearchService

# %%
# A catalog of 20 categories, each a Gaussian blob of 128-d "image features".
ds = generate(SyntheticParams(classes=20, per_class=200, val_per_class=2, dim=128, sigma=1.0, seed=4))
print("train items:", len(ds.train_ids), " queries:", len(ds.val_ids))

# %%
# Every item becomes a 4096-bit signature: one bit per random hyperplane.
projector = HashProjector(seed=1)
sig = extract_hash(ds.train_X[0], projector)
print("signature bytes:", len(sig.data), " first bits:", sig.bits()[:16])

# %%
# The bench hashes the whole catalog and holds one partition per category.
bench = Bench(ds, projector, fetch=50)
service = SearchService(
    LocalTransport({"local": bench.node}), ClusterView.of(["local"]), aspects=ds.aspects, n=10
)

# %%
# The category model picks the five most likely categories; only those are scanned.
i = 0
categories = bench.categories_for(i, Ours(5))
print("true category:", ds.val_y[i], " predicted:", [c for c, _ in categories])

plain = service.query(signature=bench.query_signature(i), categories=categories, rerank_results=False)
for r in plain.results[:5]:
    print(f"  listing {r.listing_id:>5}  category {r.category_id:>2}  hamming {r.hamming:>4}  score {r.s_appearance:.3f}")

# %%
# Re-ranking blends appearance with agreement on predicted aspects (color, brand, ...).
predicted = predict_aspects_oracle(ds, int(ds.val_ids[i]), 0.2, np.random.default_rng(0))
print("predicted aspects:", [pair for pair, _ in predicted])
ranked = service.query(signature=bench.query_signature(i), categories=categories, predicted_aspects=predicted)
for r in ranked.results[:5]:
    print(f"  listing {r.listing_id:>5}  s_app {r.s_appearance:.3f}  s_asp {r.s_aspect:.3f}  s_final {r.s_final:.3f}")
print("stage timings (ms):", {k: round(v * 1000, 2) for k, v in ranked.timings.items()})
