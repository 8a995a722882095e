from __future__ import annotations

import numpy as np
import pytest

from _gradcheck import TOLERANCE
from _gradcheck import max_gradient_error
from scipy.special import softmax

from graph_mil._autodiff import Parameter
from graph_mil._autodiff import constant
from graph_mil._autodiff import mul
from graph_mil._autodiff import sum_all
from graph_mil._errors import GraphMilShapeError
from graph_mil._gnn import GatLayer
from graph_mil._gnn import GcnLayer
from graph_mil._gnn import GnnStack
from graph_mil._gnn import gat_attention
from graph_mil._gnn import gat_forward
from graph_mil._gnn import gcn_forward
from graph_mil._gnn import normalize_adjacency
from graph_mil._gnn import prepare_graph
from graph_mil._gnn import stack_forward
from graph_mil._gnn import symmetric_normalize
from graph_mil._graphs import WsiGraph


def make_graph(features, edges, weights=None) -> WsiGraph:
    features = np.asarray(features, dtype=np.float64)
    return WsiGraph(
        slide_id="g",
        node_features=features,
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        node_to_patches=tuple((i,) for i in range(features.shape[0])),
        edge_weights=weights,
    )


def random_graph(rng: np.random.Generator, n: int, d: int, weighted: bool = False):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    weights = rng.uniform(0.0, 2.0, size=len(pairs)) if weighted and pairs else None
    return make_graph(rng.standard_normal((n, d)), pairs, weights)


def permuted(graph: WsiGraph, perm: np.ndarray) -> WsiGraph:
    """The same graph with node ``new`` standing for old node ``perm[new]``."""
    inverse = np.argsort(perm)
    edges = sorted(
        (min(inverse[i], inverse[j]), max(inverse[i], inverse[j])) for i, j in graph.edges
    )
    return WsiGraph(
        slide_id=graph.slide_id,
        node_features=graph.node_features[perm],
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        node_to_patches=tuple((int(p),) for p in perm),
    )


class TestNormalizedAdjacency:

    def test_isolated_node(self):
        np.testing.assert_allclose(symmetric_normalize(np.zeros((1, 1))), [[1.0]])

    def test_single_edge(self):
        a_hat = normalize_adjacency(make_graph(np.zeros((2, 1)), [[0, 1]]))
        np.testing.assert_allclose(a_hat, [[0.5, 0.5], [0.5, 0.5]])

    def test_regular_graph_rows_sum_to_one(self):
        ring = make_graph(np.zeros((4, 1)), [[0, 1], [1, 2], [2, 3], [0, 3]])
        a_hat = normalize_adjacency(ring)
        np.testing.assert_allclose(a_hat.sum(axis=1), np.ones(4))
        np.testing.assert_allclose(np.diag(a_hat), np.full(4, 1.0 / 3.0))

    def test_symmetric_with_spectrum_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            graph = random_graph(rng, int(rng.integers(1, 9)), 1)
            a_hat = normalize_adjacency(graph)
            np.testing.assert_allclose(a_hat, a_hat.T)
            eigenvalues = np.linalg.eigvalsh(a_hat)
            assert eigenvalues.min() >= -1.0 - 1e-9
            assert eigenvalues.max() <= 1.0 + 1e-9


class TestGcn:

    def test_hand_example(self):
        layer = GcnLayer(Parameter("w", [[1.0]]), activation="identity")
        a_hat = normalize_adjacency(make_graph(np.zeros((2, 1)), [[0, 1]]))
        out = gcn_forward(layer, constant([[1.0], [3.0]]), a_hat)
        np.testing.assert_allclose(out.value, [[2.0], [2.0]])

    def test_edgeless_graph_reduces_to_a_dense_layer(self):
        rng = np.random.default_rng(1)
        h = rng.standard_normal((5, 3))
        w = rng.standard_normal((3, 2))
        layer = GcnLayer(Parameter("w", w))
        out = gcn_forward(layer, constant(h), np.eye(5))
        np.testing.assert_allclose(out.value, np.maximum(h @ w, 0.0))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            graph = random_graph(rng, int(rng.integers(1, 7)), 3)
            inputs = prepare_graph(graph)
            layer = GcnLayer(Parameter("w", rng.standard_normal((3, 4))), "tanh")
            c = rng.standard_normal((graph.n_nodes, 4))
            error = max_gradient_error(
                lambda layer=layer, inputs=inputs, c=c: sum_all(
                    mul(gcn_forward(layer, inputs.features, inputs.a_hat), constant(c))
                ),
                [layer.weight],
            )
            assert error <= TOLERANCE

    def test_adjacency_must_match(self):
        layer = GcnLayer(Parameter("w", [[1.0]]))
        with pytest.raises(GraphMilShapeError):
            gcn_forward(layer, constant([[1.0], [2.0]]), np.eye(3))


def gat_layer(w, a_self, a_neighbor, activation="identity") -> GatLayer:
    return GatLayer(
        weight=Parameter("w", w),
        attn_self=Parameter("a_self", a_self),
        attn_neighbor=Parameter("a_neighbor", a_neighbor),
        activation=activation,
    )


class TestGat:

    def test_hand_example(self):
        layer = gat_layer([[1.0]], [[1.0]], [[2.0]])
        inputs = prepare_graph(make_graph([[1.0], [2.0]], [[0, 1]]))
        alpha = gat_attention(layer, inputs.features, inputs).value
        # z = (1, 2); e_vu = leaky(z_v + 2 z_u), all positive.
        np.testing.assert_allclose(alpha[0], softmax([3.0, 5.0]))
        np.testing.assert_allclose(alpha[1], softmax([4.0, 6.0]))
        out = gat_forward(layer, inputs.features, inputs).value
        np.testing.assert_allclose(out, alpha @ np.array([[1.0], [2.0]]))

    def test_isolated_node_attends_to_itself(self):
        layer = gat_layer([[1.0]], [[0.3]], [[-0.7]])
        inputs = prepare_graph(make_graph([[1.0], [2.0], [5.0]], [[0, 1]]))
        alpha = gat_attention(layer, inputs.features, inputs).value
        np.testing.assert_allclose(alpha[2], [0.0, 0.0, 1.0])

    def test_identical_features_give_uniform_attention(self):
        layer = gat_layer([[1.0, 0.5]], [[0.4], [0.1]], [[0.2], [-0.3]])
        inputs = prepare_graph(make_graph(np.ones((3, 1)), [[0, 1], [0, 2]]))
        alpha = gat_attention(layer, inputs.features, inputs).value
        np.testing.assert_allclose(alpha[0], [1 / 3, 1 / 3, 1 / 3])
        np.testing.assert_allclose(alpha[1], [0.5, 0.5, 0.0])

    def test_attention_rows_sum_to_one_over_neighborhoods(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            graph = random_graph(rng, int(rng.integers(1, 7)), 2)
            inputs = prepare_graph(graph)
            layer = gat_layer(
                rng.standard_normal((2, 3)),
                rng.standard_normal((3, 1)),
                rng.standard_normal((3, 1)),
            )
            alpha = gat_attention(layer, inputs.features, inputs).value
            np.testing.assert_allclose(alpha.sum(axis=1), np.ones(graph.n_nodes))
            assert (alpha[~inputs.mask] == 0.0).all()

    def test_edge_weights_scale_attention(self):
        layer = gat_layer([[1.0]], [[0.0]], [[0.0]])
        inputs = prepare_graph(make_graph([[1.0], [3.0]], [[0, 1]], np.array([0.5])))
        out = gat_forward(layer, inputs.features, inputs).value
        # Uniform alpha = 0.5; the neighbor term is scaled by 0.5, self by 1.
        np.testing.assert_allclose(out, [[0.5 * 1.0 + 0.25 * 3.0], [0.25 * 1.0 + 0.5 * 3.0]])

    @pytest.mark.parametrize("weighted", [False, True], ids=["plain", "weighted"])
    def test_gradients(self, weighted):
        rng = np.random.default_rng(4)
        for _ in range(20):
            graph = random_graph(rng, int(rng.integers(1, 7)), 3, weighted)
            inputs = prepare_graph(graph)
            layer = gat_layer(
                rng.standard_normal((3, 4)),
                rng.standard_normal((4, 1)),
                rng.standard_normal((4, 1)),
                activation="elu",
            )
            c = rng.standard_normal((graph.n_nodes, 4))
            error = max_gradient_error(
                lambda layer=layer, inputs=inputs, c=c: sum_all(
                    mul(gat_forward(layer, inputs.features, inputs), constant(c))
                ),
                layer.parameters(),
            )
            assert error <= TOLERANCE


class TestStack:

    @pytest.mark.parametrize("kind", ["gcn", "gat"])
    def test_permutation_equivariance(self, kind):
        rng = np.random.default_rng(5)
        for _ in range(50):
            graph = random_graph(rng, int(rng.integers(2, 8)), 3)
            stack = GnnStack.initialize(kind, 3, 4, 2, np.random.default_rng(0))
            perm = rng.permutation(graph.n_nodes)
            out = stack_forward(stack, prepare_graph(graph)).value
            out_perm = stack_forward(stack, prepare_graph(permuted(graph, perm))).value
            np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    @pytest.mark.parametrize("readout", ["max", "mean"])
    def test_readout_of_a_single_node(self, readout):
        graph = make_graph([[0.5, -1.0, 2.0]], [])
        stack = GnnStack.initialize("gcn", 3, 4, 2, np.random.default_rng(1))
        nodes = stack_forward(stack, prepare_graph(graph)).value
        stack.readout = readout
        pooled = stack_forward(stack, prepare_graph(graph)).value
        np.testing.assert_allclose(pooled, nodes)

    def test_layer_layout(self):
        stack = GnnStack.initialize("gat", 5, 8, 3, np.random.default_rng(2))
        assert [layer.activation for layer in stack.layers] == ["elu", "elu", "sigmoid"]
        assert stack.input_dim == 5
        assert stack.output_dim == 8
        names = [p.name for p in stack.parameters()]
        assert names[:3] == ["gnn.0.weight", "gnn.0.attn_self", "gnn.0.attn_neighbor"]
        assert len(names) == len(set(names)) == 9

    def test_rejects_wrong_feature_width(self):
        stack = GnnStack.initialize("gcn", 3, 4, 1, np.random.default_rng(0))
        with pytest.raises(GraphMilShapeError):
            stack_forward(stack, prepare_graph(make_graph(np.zeros((2, 5)), [])))
