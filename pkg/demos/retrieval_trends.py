"""
Category restriction versus k-means
===================================

Scanning only the predicted categories trades a little neighbor recall for a
large cut in work. A k-means index over the same hashes is the baseline.
Smaller than the acceptance dataset so it runs in under a minute.
"""

from visearch.evalbench import (
    Bench,
    Exhaustive,
    KMeans,
    Ours,
    SyntheticParams,
    bench_timing,
    format_reports,
    format_timing,
    generate,
)
from visearch.hashmodel import HashProjector

ds = generate(SyntheticParams(classes=100, per_class=60, val_per_class=2, dim=128, sigma=1.0, separation=0.6, seed=0))
bench = Bench(ds, HashProjector(1), fetch=50)

# %%
# Quality on the K grid: precision, accuracy and the two NDCG flavors.
methods = [Ours(1), Ours(5), Ours(10), Ours(5, cumulative=True), KMeans(16, 5), KMeans(64, 5)]
print(format_reports([bench.evaluate(m, (10, 50)) for m in methods]))

# %%
# Ranking time per query, hashing excluded.
table = bench_timing(bench, [Exhaustive(), Ours(1), Ours(5), Ours(10)], repetitions=3, queries=range(100))
print(format_timing(table, baseline="exhaustive"))
