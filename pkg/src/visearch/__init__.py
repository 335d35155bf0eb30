"""Visual search over binary semantic hashes.

Category-restricted Hamming ranking on a partitioned cluster, with aspect
re-ranking, a listing ingestion pipeline and a retrieval benchmark.
"""

from .errors import ClusterUnavailable, ConfigError, CorruptionError, RejectedInput, VisearchError
from .sigcore import AspectSet, AspectWeights, BinarySignature, ScoringConfig, hamming
from .hashmodel import AbsoluteTopN, CategoryModel, Cumulative, HashProjector, extract_hash, extract_hashes
from .index import CategoryPartition, read_index, write_index
from .cluster import ClusterView, compute_assignment
from .ranker import QueryRequest, SearchNode, fanout_search, rerank

__version__ = "0.1.0"

__all__ = [
    "AbsoluteTopN",
    "AspectSet",
    "AspectWeights",
    "BinarySignature",
    "CategoryModel",
    "CategoryPartition",
    "ClusterUnavailable",
    "ClusterView",
    "ConfigError",
    "CorruptionError",
    "Cumulative",
    "HashProjector",
    "QueryRequest",
    "RejectedInput",
    "ScoringConfig",
    "SearchNode",
    "VisearchError",
    "compute_assignment",
    "extract_hash",
    "extract_hashes",
    "fanout_search",
    "hamming",
    "read_index",
    "rerank",
    "write_index",
]
