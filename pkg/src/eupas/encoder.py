"""Relation-aware graph convolution over the four region subgraphs.

Each layer sends messages along every relation's edges, gates them with that
relation's embedding vector, and applies a shared linear map; relation
vectors evolve through per-relation affine updates. Layers are wired
residually, so a zero-initialized encoder is the identity on the node
embeddings. A final degree-normalized residual aggregation per relation
produces the anchor embeddings used by the contrastive machinery.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from eupas.data import RegionGraph

LEAKY_SLOPE = 0.01


class EncodingError(RuntimeError):
    """Non-finite values appeared during the forward pass."""


@dataclasses.dataclass
class EncoderParams:
    """Learnable encoder state for K relations, L layers, width d."""

    layer_weights: list[torch.Tensor]  # L x (d, d), shared across relations
    relation_weights: list[list[torch.Tensor]]  # L x K x (d, d)
    relation_biases: list[list[torch.Tensor]]  # L x K x (d,)
    node_embeddings: list[torch.Tensor]  # K x (N, d)
    relation_vectors: list[torch.Tensor]  # K x (d,)

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)

    @property
    def n_relations(self) -> int:
        return len(self.node_embeddings)

    def named_tensors(self):
        for l, w in enumerate(self.layer_weights):
            yield f"encoder.layer_weight.{l}", w
        for l in range(self.n_layers):
            for k in range(self.n_relations):
                yield f"encoder.relation_weight.{l}.{k}", self.relation_weights[l][k]
                yield f"encoder.relation_bias.{l}.{k}", self.relation_biases[l][k]
        for k in range(self.n_relations):
            yield f"encoder.node_embedding.{k}", self.node_embeddings[k]
        for k in range(self.n_relations):
            yield f"encoder.relation_vector.{k}", self.relation_vectors[k]


@dataclasses.dataclass
class EmbeddingState:
    """Forward-pass output: per-relation region embeddings and relation vectors."""

    relation_embeddings: list[torch.Tensor]  # K x (N, d)
    relation_vectors: list[torch.Tensor]  # K x (d,)

    @property
    def anchors(self) -> list[torch.Tensor]:
        """Clean final-layer embeddings, the reference points for contrastive pairs."""
        return self.relation_embeddings


def init_params(
    n_regions: int, n_relations: int, dim: int, n_layers: int, seed: int
) -> EncoderParams:
    """Uniform fan-in initialization in [-sqrt(1/d), sqrt(1/d)]."""
    if dim < 1 or n_layers < 1:
        raise ValueError("dim and n_layers must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    bound = (1.0 / dim) ** 0.5

    def u(*shape):
        t = torch.empty(*shape, dtype=torch.float64)
        t.uniform_(-bound, bound, generator=gen)
        return t

    return EncoderParams(
        layer_weights=[u(dim, dim) for _ in range(n_layers)],
        relation_weights=[[u(dim, dim) for _ in range(n_relations)] for _ in range(n_layers)],
        relation_biases=[[u(dim) for _ in range(n_relations)] for _ in range(n_layers)],
        node_embeddings=[u(n_regions, dim) for _ in range(n_relations)],
        relation_vectors=[u(dim) for _ in range(n_relations)],
    )


def _neighbor_mean_operators(graph: RegionGraph) -> list[torch.Tensor]:
    """Row-normalized binary support per relation: averaging over neighbor sets."""
    ops = []
    for name in graph.relations:
        support = (graph.adjacency[name].toarray() != 0).astype(np.float64)
        counts = support.sum(axis=1, keepdims=True)
        ops.append(torch.from_numpy(support / np.where(counts > 0, counts, 1.0)))
    return ops


def _sym_normalized_adjacency(graph: RegionGraph, relation: str) -> torch.Tensor:
    a = graph.adjacency[relation].toarray()
    d = graph.degrees[relation]
    inv_sqrt = 1.0 / np.sqrt(d)
    return torch.from_numpy(inv_sqrt[:, None] * a * inv_sqrt[None, :])


def relation_message_pass(
    embeddings: list[torch.Tensor],
    relation_vectors: list[torch.Tensor],
    graph: RegionGraph,
    params: EncoderParams,
    layer: int,
) -> list[torch.Tensor]:
    """One step of gated cross-relation neighborhood averaging.

    For each output stream k: average the previous embeddings over every
    relation's neighbor set, gate elementwise with that relation's vector,
    sum across relations, apply the shared layer weight and a LeakyReLU.
    Relations with an empty neighbor row contribute nothing for that region.
    """
    ops = _neighbor_mean_operators(graph)
    w = params.layer_weights[layer]
    out = []
    for e_k in embeddings:
        acc = torch.zeros_like(e_k)
        for op, h in zip(ops, relation_vectors):
            acc = acc + (op @ e_k) * h.unsqueeze(0)
        out.append(torch.nn.functional.leaky_relu(acc @ w.T, negative_slope=LEAKY_SLOPE))
    return out


def relation_update(
    h: torch.Tensor, params: EncoderParams, layer: int, relation: int
) -> torch.Tensor:
    """Affine per-relation update of the relation vector."""
    return params.relation_weights[layer][relation] @ h + params.relation_biases[layer][relation]


def residual_aggregate(
    embeddings: torch.Tensor,
    graph: RegionGraph,
    params: EncoderParams,
    layer: int,
    relation: int,
) -> torch.Tensor:
    """Residual degree-normalized aggregation over one relation's adjacency."""
    a_hat = _sym_normalized_adjacency(graph, graph.relations[relation])
    w = params.layer_weights[layer]
    return embeddings + torch.nn.functional.leaky_relu(
        a_hat @ embeddings @ w, negative_slope=LEAKY_SLOPE
    )


def encode(graph: RegionGraph, params: EncoderParams) -> EmbeddingState:
    """Full forward pass: L residual message-passing layers, then one
    degree-normalized residual aggregation per relation.

    With all weights zero this is the identity on the initial node
    embeddings. Raises :class:`EncodingError` if any intermediate value
    turns non-finite, naming the layer and relation.
    """
    if params.n_relations != len(graph.relations):
        raise ValueError(
            f"params cover {params.n_relations} relations, graph has {len(graph.relations)}"
        )
    embeddings = list(params.node_embeddings)
    vectors = list(params.relation_vectors)
    for layer in range(params.n_layers):
        messages = relation_message_pass(embeddings, vectors, graph, params, layer)
        embeddings = [e + m for e, m in zip(embeddings, messages)]
        vectors = [relation_update(h, params, layer, k) for k, h in enumerate(vectors)]
        _check_finite(embeddings, graph, f"message-passing layer {layer}")
    embeddings = [
        residual_aggregate(e, graph, params, params.n_layers - 1, k)
        for k, e in enumerate(embeddings)
    ]
    _check_finite(embeddings, graph, "residual aggregation")
    return EmbeddingState(relation_embeddings=embeddings, relation_vectors=vectors)


def _check_finite(embeddings: list[torch.Tensor], graph: RegionGraph, stage: str):
    for k, e in enumerate(embeddings):
        if not torch.isfinite(e).all():
            raise EncodingError(
                f"non-finite embedding values after {stage} for relation "
                f"{graph.relations[k]!r}"
            )
