"""EUPAS: robust urban region embeddings.

Builds multi-relational region graphs from trips / POI counts / geographic
adjacency, trains relation-aware embeddings with a joint attentive-supervised
and adversarial-contrastive objective, and evaluates them on regression,
clustering, and adversarial-robustness tasks.
"""

__version__ = "0.1.0"

from eupas.data import (
    GeoNeighbors,
    MobilityRecord,
    POITable,
    RegionGraph,
    build_relation_graphs,
    generate_synthetic_city,
)
from eupas.training import TrainingConfig, train

__all__ = [
    "GeoNeighbors",
    "MobilityRecord",
    "POITable",
    "RegionGraph",
    "TrainingConfig",
    "build_relation_graphs",
    "generate_synthetic_city",
    "train",
]
