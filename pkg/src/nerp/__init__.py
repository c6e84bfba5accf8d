"""Neutral-reference prior probing and gated local flipping.

Inference-time correction of prior-dominated mispredictions for
cosine-similarity classifiers operating on precomputed embedding bundles,
plus a synthetic generative oracle and a gate-calibration harness.
"""

from nerp.embedding_store import DatasetSplit, DomainBundle, NeutralAnchors, load_bundle, save_bundle
from nerp.graph import ConfusionGraph, build_knn_graph, load_edge_list
from nerp.priors import PairGapTable, PriorTable, composite_gap
from nerp.corrector import GateConfig, apply_correction, batch_correct

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit",
    "DomainBundle",
    "NeutralAnchors",
    "load_bundle",
    "save_bundle",
    "ConfusionGraph",
    "build_knn_graph",
    "load_edge_list",
    "PriorTable",
    "PairGapTable",
    "composite_gap",
    "GateConfig",
    "apply_correction",
    "batch_correct",
    "__version__",
]
