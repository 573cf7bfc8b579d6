import numpy as np
import pytest
import torch
from hypothesis import settings
from scipy import sparse

from eupas.data import RegionGraph, build_relation_graphs, generate_synthetic_city

torch.set_num_threads(1)

settings.register_profile("ci", max_examples=30, derandomize=True, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def small_city():
    return generate_synthetic_city(20, 4, 3, seed=11)


@pytest.fixture(scope="session")
def small_graph(small_city):
    records, poi, geo, _, _ = small_city
    return build_relation_graphs(records, poi, geo, top_k=5)


def make_graph(adjacencies: dict[str, np.ndarray], similarities: dict[str, np.ndarray] | None = None):
    """Hand-build a RegionGraph for unit tests; adjacencies must already carry
    self-loops, similarities default to row-normalized adjacency."""
    names = tuple(adjacencies)
    n = next(iter(adjacencies.values())).shape[0]
    if similarities is None:
        similarities = {
            k: a / a.sum(axis=1, keepdims=True) for k, a in adjacencies.items()
        }
    adjacency = {k: sparse.csr_array(np.asarray(a, dtype=float)) for k, a in adjacencies.items()}
    uniform = np.full((n, n), 1.0 / n)
    return RegionGraph(
        n_regions=n,
        relations=names,
        adjacency=adjacency,
        degrees={k: np.asarray(a.sum(axis=1)).ravel() for k, a in adjacency.items()},
        similarity={k: np.asarray(s, dtype=float).copy() for k, s in similarities.items()},
        p_origin=uniform.copy(),
        p_destination=uniform.copy(),
        trip_counts=sparse.csr_array(np.ones((n, n))),
        top_k=n,
    )
