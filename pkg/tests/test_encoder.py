import math
import time

import numpy as np
import pytest
import torch

from eupas.data import build_relation_graphs, generate_synthetic_city
from eupas.encoder import (
    EncodingError,
    LEAKY_SLOPE,
    encode,
    init_params,
    relation_message_pass,
    relation_update,
    residual_aggregate,
)

from conftest import make_graph


def leaky(v):
    return v if v >= 0 else LEAKY_SLOPE * v


class TestInitParams:
    def test_deterministic(self):
        a = init_params(5, 2, 8, 2, seed=3)
        b = init_params(5, 2, 8, 2, seed=3)
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb and torch.equal(ta, tb)

    def test_bound(self):
        params = init_params(5, 2, 8, 2, seed=3)
        bound = math.sqrt(1 / 8)
        for _, t in params.named_tensors():
            assert t.abs().max() <= bound

    def test_seeds_differ(self):
        a = init_params(5, 2, 8, 2, seed=1)
        b = init_params(5, 2, 8, 2, seed=2)
        assert not torch.equal(a.layer_weights[0], b.layer_weights[0])


def single_region_graph(n_relations=1):
    eye = np.eye(1)
    return make_graph({f"r{k}": eye.copy() for k in range(n_relations)})


class TestMessagePass:
    def test_zero_relation_vectors_annihilate(self, small_graph):
        params = init_params(small_graph.n_regions, 4, 6, 1, seed=0)
        zeros = [torch.zeros(6, dtype=torch.float64) for _ in range(4)]
        out = relation_message_pass(params.node_embeddings, zeros, small_graph, params, 0)
        for e in out:
            assert torch.equal(e, torch.zeros_like(e))

    def test_single_region_identity_path(self):
        graph = single_region_graph()
        params = init_params(1, 1, 3, 1, seed=0)
        params.layer_weights[0] = torch.eye(3, dtype=torch.float64)
        e = torch.tensor([[0.5, -0.2, 1.0]], dtype=torch.float64)
        ones = [torch.ones(3, dtype=torch.float64)]
        (out,) = relation_message_pass([e], ones, graph, params, 0)
        expected = torch.tensor([[leaky(v) for v in [0.5, -0.2, 1.0]]], dtype=torch.float64)
        assert torch.allclose(out, expected)

    def test_line_graph_matches_dense_loop_oracle(self):
        # 3-region line 0-1-2 under two relations with distinct supports
        a0 = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=float)
        a1 = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=float)
        graph = make_graph({"a": a0, "b": a1})
        params = init_params(3, 2, 2, 1, seed=5)
        e = [t.clone() for t in params.node_embeddings]
        h = [t.clone() for t in params.relation_vectors]
        out = relation_message_pass(e, h, graph, params, 0)

        w = params.layer_weights[0].numpy()
        supports = [a0, a1]
        for k in range(2):
            expected = np.zeros((3, 2))
            for u in range(3):
                acc = np.zeros(2)
                for g, support in enumerate(supports):
                    nbrs = [v for v in range(3) if support[u, v] != 0]
                    for v in nbrs:
                        acc += (1 / len(nbrs)) * (
                            w @ (e[k][v].numpy() * h[g].numpy())
                        )
                expected[u] = [leaky(x) for x in acc]
            assert np.allclose(out[k].numpy(), expected, atol=1e-12)


class TestRelationUpdate:
    def test_identity(self):
        params = init_params(2, 1, 3, 1, seed=0)
        params.relation_weights[0][0] = torch.eye(3, dtype=torch.float64)
        params.relation_biases[0][0] = torch.zeros(3, dtype=torch.float64)
        h = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        assert torch.equal(relation_update(h, params, 0, 0), h)

    def test_constant_map(self):
        params = init_params(2, 1, 3, 1, seed=0)
        params.relation_weights[0][0] = torch.zeros(3, 3, dtype=torch.float64)
        params.relation_biases[0][0] = torch.full((3,), 2.5, dtype=torch.float64)
        h = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        assert torch.equal(relation_update(h, params, 0, 0), torch.full((3,), 2.5, dtype=torch.float64))

    def test_random_case_matches_matvec(self):
        params = init_params(2, 1, 2, 1, seed=7)
        h = torch.tensor([0.3, -1.1], dtype=torch.float64)
        got = relation_update(h, params, 0, 0)
        w = params.relation_weights[0][0].numpy()
        b = params.relation_biases[0][0].numpy()
        assert np.allclose(got.numpy(), w @ h.numpy() + b, atol=1e-15)


class TestResidualAggregate:
    def test_zero_weight_is_identity(self, small_graph):
        params = init_params(small_graph.n_regions, 4, 4, 1, seed=0)
        params.layer_weights[0] = torch.zeros(4, 4, dtype=torch.float64)
        e = torch.randn(small_graph.n_regions, 4, dtype=torch.float64)
        assert torch.equal(residual_aggregate(e, small_graph, params, 0, 0), e)

    def test_single_region_self_loop(self):
        graph = single_region_graph()
        params = init_params(1, 1, 2, 1, seed=0)
        params.layer_weights[0] = torch.eye(2, dtype=torch.float64)
        e = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
        out = residual_aggregate(e, graph, params, 0, 0)
        assert torch.allclose(out, torch.tensor([[2.0, 2.0]], dtype=torch.float64))

    def test_update_term_is_leaky_relu_of_preactivation(self, small_graph):
        params = init_params(small_graph.n_regions, 4, 4, 1, seed=1)
        e = torch.randn(small_graph.n_regions, 4, dtype=torch.float64)
        delta = residual_aggregate(e, small_graph, params, 0, 2) - e
        a = small_graph.adjacency["poi"].toarray()
        d = small_graph.degrees["poi"]
        a_hat = a / np.sqrt(np.outer(d, d))
        pre = torch.from_numpy(a_hat) @ e @ params.layer_weights[0]
        assert torch.equal(delta, torch.nn.functional.leaky_relu(pre, negative_slope=LEAKY_SLOPE))


class TestEncode:
    def test_zero_weights_identity(self, small_graph):
        params = init_params(small_graph.n_regions, 4, 6, 1, seed=2)
        for layer in range(params.n_layers):
            params.layer_weights[layer].zero_()
            for k in range(4):
                params.relation_weights[layer][k].zero_()
                params.relation_biases[layer][k].zero_()
        state = encode(small_graph, params)
        for anchor, e0 in zip(state.anchors, params.node_embeddings):
            assert torch.equal(anchor, e0)

    def test_deterministic(self, small_graph):
        params = init_params(small_graph.n_regions, 4, 6, 2, seed=2)
        a = encode(small_graph, params)
        b = encode(small_graph, params)
        for x, y in zip(a.anchors, b.anchors):
            assert torch.equal(x, y)

    def test_gradient_matches_finite_differences(self, small_graph):
        params = init_params(small_graph.n_regions, 4, 4, 2, seed=3)
        w = params.layer_weights[0]
        w.requires_grad_(True)

        def probe():
            state = encode(small_graph, params)
            return sum(e.sum() for e in state.anchors)

        (grad,) = torch.autograd.grad(probe(), w)
        rng = np.random.default_rng(0)
        with torch.no_grad():
            for _ in range(5):
                i, j = rng.integers(0, 4, size=2)
                h = 1e-6
                old = w[i, j].item()
                w[i, j] = old + h
                up = probe().item()
                w[i, j] = old - h
                down = probe().item()
                w[i, j] = old
                fd = (up - down) / (2 * h)
                a = grad[i, j].item()
                assert abs(a - fd) <= 1e-4 * max(abs(a), abs(fd), 1e-6)

    def test_non_finite_abort_names_stage(self, small_graph):
        params = init_params(small_graph.n_regions, 4, 4, 1, seed=3)
        with torch.no_grad():
            params.node_embeddings[2][0, 0] = float("inf")
        with pytest.raises(EncodingError, match="poi"):
            encode(small_graph, params)

    def test_relation_count_mismatch(self, small_graph):
        params = init_params(small_graph.n_regions, 2, 4, 1, seed=3)
        with pytest.raises(ValueError, match="relations"):
            encode(small_graph, params)


@pytest.mark.slow
def test_layer_time_scales_with_top_k():
    records, poi, geo, _, _ = generate_synthetic_city(120, 8, 6, seed=2)
    times = {}
    for top_k in (5, 10):
        graph = build_relation_graphs(records, poi, geo, top_k=top_k)
        params = init_params(graph.n_regions, 4, 16, 1, seed=0)
        e = [t.clone() for t in params.node_embeddings]
        h = [t.clone() for t in params.relation_vectors]
        relation_message_pass(e, h, graph, params, 0)  # warmup
        best = math.inf
        for _ in range(5):
            t0 = time.perf_counter()
            relation_message_pass(e, h, graph, params, 0)
            best = min(best, time.perf_counter() - t0)
        times[top_k] = best
    # doubling top_k should at most ~double the layer time (2x tolerance)
    assert times[10] <= 4.0 * times[5] + 1e-4
