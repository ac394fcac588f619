"""Model-enhanced vector index: cluster codes fused with dense retrieval."""

from .cluster_index import ClusterIndex, build_index
from .cluster_search import RankedClusters, beam_search_clusters
from .dense import EmbeddingStore, HNSWIndex, ScoredDocs, exact_search
from .ensemble import EnsembleParams, cluster_score, fuse
from .errors import DataError, MeviError, StoreError
from .model import MEVI
from .quantizer import (
    EmbeddingSet,
    HierarchicalKMeans,
    ResidualQuantizer,
    RqCodebook,
    TreeCodebook,
    build_hierarchical_kmeans,
    build_rq,
    encode,
    kmeans,
    reconstruct,
)
from .store import load_all, load_model, save_all, save_model

__version__ = "0.1.0"

__all__ = [
    "MEVI",
    "ClusterIndex",
    "DataError",
    "EmbeddingSet",
    "EmbeddingStore",
    "EnsembleParams",
    "HNSWIndex",
    "HierarchicalKMeans",
    "MeviError",
    "RankedClusters",
    "ResidualQuantizer",
    "RqCodebook",
    "ScoredDocs",
    "StoreError",
    "TreeCodebook",
    "beam_search_clusters",
    "build_hierarchical_kmeans",
    "build_index",
    "build_rq",
    "cluster_score",
    "encode",
    "exact_search",
    "fuse",
    "kmeans",
    "load_all",
    "load_model",
    "reconstruct",
    "save_all",
    "save_model",
]
