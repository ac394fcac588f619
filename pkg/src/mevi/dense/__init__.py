from .exact import (
    METRICS,
    EmbeddingStore,
    ScoredDocs,
    exact_search,
    rank_scores,
    row_scores,
    score_candidates,
)
from .hnsw import HNSWIndex

__all__ = [
    "METRICS",
    "EmbeddingStore",
    "HNSWIndex",
    "ScoredDocs",
    "exact_search",
    "rank_scores",
    "row_scores",
    "score_candidates",
]
