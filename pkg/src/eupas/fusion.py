"""Attentive relation fusion and the supervised loss terms.

A shared attention head scores each relation's embedding matrix, and the
softmax of those scores blends the relation streams (each gated elementwise
by its relation vector) into the final region embedding. The supervised loss
sums a geographic triplet hinge, a trip-likelihood reconstruction term over
the observed origin-destination pairs, and a squared-error reconstruction of
the POI similarity matrix.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from eupas.data import MobilityRecord, RegionGraph
from eupas.encoder import LEAKY_SLOPE, EmbeddingState

RELATION_INDEX = {"origin": 0, "destination": 1, "poi": 2, "geo": 3}


@dataclasses.dataclass
class FusionParams:
    """Attention head plus per-relation alignment of the relation vectors."""

    attention: torch.Tensor  # (d,)
    weight: torch.Tensor  # (d, d)
    bias: torch.Tensor  # (d,)
    align_weights: list[torch.Tensor]  # K x (d, d)
    align_biases: list[torch.Tensor]  # K x (d,)

    def named_tensors(self):
        yield "fusion.attention", self.attention
        yield "fusion.weight", self.weight
        yield "fusion.bias", self.bias
        for k, w in enumerate(self.align_weights):
            yield f"fusion.align_weight.{k}", w
        for k, b in enumerate(self.align_biases):
            yield f"fusion.align_bias.{k}", b


@dataclasses.dataclass
class FusedEmbedding:
    """Final task-facing region embeddings with the relation mix that built them."""

    embeddings: torch.Tensor  # (N, d)
    weights: torch.Tensor  # (K,), softmax of the fusion coefficients


def init_fusion_params(dim: int, n_relations: int, seed: int) -> FusionParams:
    gen = torch.Generator().manual_seed(seed)
    bound = (1.0 / dim) ** 0.5

    def u(*shape):
        t = torch.empty(*shape, dtype=torch.float64)
        t.uniform_(-bound, bound, generator=gen)
        return t

    return FusionParams(
        attention=u(dim),
        weight=u(dim, dim),
        bias=u(dim),
        align_weights=[u(dim, dim) for _ in range(n_relations)],
        align_biases=[u(dim) for _ in range(n_relations)],
    )


def fusion_coefficients(anchors: list[torch.Tensor], params: FusionParams) -> torch.Tensor:
    """Mean attention score per relation stream, shape (K,)."""
    scores = []
    for e_k in anchors:
        hidden = torch.nn.functional.leaky_relu(
            e_k @ params.weight.T + params.bias, negative_slope=LEAKY_SLOPE
        )
        scores.append((hidden @ params.attention).mean())
    return torch.stack(scores)


def fuse(
    anchors: list[torch.Tensor],
    relation_vectors: list[torch.Tensor],
    coefficients: torch.Tensor,
) -> FusedEmbedding:
    """Softmax-weighted sum of the relation streams, each gated by its vector."""
    weights = torch.softmax(coefficients, dim=0)
    fused = sum(
        w * (e_k * h_k.unsqueeze(0))
        for w, e_k, h_k in zip(weights, anchors, relation_vectors)
    )
    return FusedEmbedding(embeddings=fused, weights=weights)


def fused_embedding(state: EmbeddingState, params: FusionParams) -> FusedEmbedding:
    """Score, align, and blend the encoder output into the final embeddings."""
    alpha = fusion_coefficients(state.anchors, params)
    aligned = [
        w @ h + b
        for w, b, h in zip(params.align_weights, params.align_biases, state.relation_vectors)
    ]
    return fuse(state.anchors, aligned, alpha)


def sample_geo_triplets(
    graph: RegionGraph, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one (region, geo-neighbor, non-neighbor) triplet per eligible region.

    Regions without geographic neighbors, or adjacent to every other region,
    are skipped.
    """
    anchors, positives, negatives = [], [], []
    neighbor_sets = graph.geo_neighbor_sets()
    all_ids = set(range(graph.n_regions))
    for i, nbrs in enumerate(neighbor_sets):
        non_nbrs = sorted(all_ids - nbrs - {i})
        if not nbrs or not non_nbrs:
            continue
        anchors.append(i)
        positives.append(int(rng.choice(sorted(nbrs))))
        negatives.append(int(rng.choice(non_nbrs)))
    return (
        np.array(anchors, dtype=np.int64),
        np.array(positives, dtype=np.int64),
        np.array(negatives, dtype=np.int64),
    )


def triplet_hinge(
    embeddings: torch.Tensor,
    anchor_idx: np.ndarray,
    pos_idx: np.ndarray,
    neg_idx: np.ndarray,
) -> torch.Tensor:
    """Sum of hinges pulling geo neighbors closer than non-neighbors."""
    if len(anchor_idx) == 0:
        return torch.zeros((), dtype=embeddings.dtype)
    e_a = embeddings[anchor_idx]
    d_pos = torch.linalg.norm(e_a - embeddings[pos_idx], dim=1)
    d_neg = torch.linalg.norm(e_a - embeddings[neg_idx], dim=1)
    return torch.clamp(d_pos - d_neg, min=0.0).sum()


def geo_triplet_loss(
    embeddings: torch.Tensor, graph: RegionGraph, rng: np.random.Generator
) -> torch.Tensor:
    """Triplet hinge with per-call seeded neighbor / non-neighbor sampling."""
    a, p, n = sample_geo_triplets(graph, rng)
    return triplet_hinge(embeddings, a, p, n)


def mobility_reconstruction_loss(
    e_origin: torch.Tensor,
    e_destination: torch.Tensor,
    records: list[MobilityRecord],
    p_origin: np.ndarray | None = None,
    p_destination: np.ndarray | None = None,
) -> torch.Tensor:
    """Negative log-likelihood of the observed trips under the embedding model.

    Origin-conditioned probabilities are a row softmax of the score matrix
    E_origin @ E_destination^T, destination-conditioned ones a column
    softmax. The reference distributions are accepted for interface parity
    but contribute no parameter-dependent term, so they are not used.
    """
    if not records:
        raise ValueError("need at least one observed trip")
    logits = e_origin @ e_destination.T
    log_o = torch.log_softmax(logits, dim=1)
    log_t = torch.log_softmax(logits, dim=0)
    origins = torch.tensor([r.origin for r in records])
    dests = torch.tensor([r.destination for r in records])
    counts = torch.tensor([float(r.count) for r in records], dtype=torch.float64)
    return -(counts * (log_o[origins, dests] + log_t[origins, dests])).sum()


def poi_reconstruction_loss(e_poi: torch.Tensor, s_poi) -> torch.Tensor:
    """Squared reconstruction error of the POI similarity by inner products."""
    target = torch.as_tensor(np.array(s_poi, dtype=np.float64))
    return ((target - e_poi @ e_poi.T) ** 2).sum()


def attentive_supervised_loss(
    state: EmbeddingState,
    graph: RegionGraph,
    params: FusionParams,
    triplets: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> torch.Tensor:
    """Unit-weight sum of the triplet, mobility, and POI terms."""
    fused = fused_embedding(state, params)
    records = _records_from_graph(graph)
    loss = triplet_hinge(fused.embeddings, *triplets)
    loss = loss + mobility_reconstruction_loss(
        state.anchors[RELATION_INDEX["origin"]],
        state.anchors[RELATION_INDEX["destination"]],
        records,
        graph.p_origin,
        graph.p_destination,
    )
    loss = loss + poi_reconstruction_loss(
        state.anchors[RELATION_INDEX["poi"]], graph.similarity["poi"]
    )
    return loss


def _records_from_graph(graph: RegionGraph) -> list[MobilityRecord]:
    coo = graph.trip_counts.tocoo()
    return [
        MobilityRecord(int(i), int(j), int(c))
        for i, j, c in zip(coo.row, coo.col, coo.data)
    ]
