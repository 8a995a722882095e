"""
Graph convolution and graph attention layers over dense adjacency matrices.

A ``GraphInputs`` bundles everything a stack needs from a ``WsiGraph``: the node
features as a constant, the normalized adjacency used by GCN layers, and the
attention mask plus edge-weight matrix used by GAT layers. Build it once per
graph with :func:`prepare_graph` and reuse it across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field

import numpy as np

from numpy.typing import NDArray

from graph_mil._autodiff import Activation
from graph_mil._autodiff import Matrix
from graph_mil._autodiff import Node
from graph_mil._autodiff import Parameter
from graph_mil._autodiff import add
from graph_mil._autodiff import constant
from graph_mil._autodiff import elementwise
from graph_mil._autodiff import max_rows
from graph_mil._autodiff import mean_rows
from graph_mil._autodiff import mul
from graph_mil._autodiff import softmax_rows
from graph_mil._config import Readout
from graph_mil._errors import GraphMilShapeError
from graph_mil._graphs import WsiGraph


LEAKY_SLOPE = 0.2


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> Matrix:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


def symmetric_normalize(adjacency: Matrix) -> Matrix:
    """D^-1/2 (A + I) D^-1/2 for a symmetric, non-negative A."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphMilShapeError(f"Adjacency must be square, got {a.shape}.")
    a_tilde = a + np.eye(a.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


def normalize_adjacency(graph: WsiGraph) -> Matrix:
    return symmetric_normalize(graph.adjacency())


def attention_mask(graph: WsiGraph) -> NDArray[np.bool_]:
    """True where v may attend to u: graph neighbors and v itself."""
    mask = np.eye(graph.n_nodes, dtype=bool)
    if graph.edges.size:
        mask[graph.edges[:, 0], graph.edges[:, 1]] = True
        mask[graph.edges[:, 1], graph.edges[:, 0]] = True
    return mask


def edge_weight_matrix(graph: WsiGraph) -> Matrix | None:
    if graph.edge_weights is None:
        return None
    weights = graph.adjacency()
    np.fill_diagonal(weights, 1.0)
    return weights


@dataclass(frozen=True, eq=False)
class GraphInputs:
    graph: WsiGraph
    features: Node
    a_hat: Matrix
    mask: NDArray[np.bool_]
    weights: Matrix | None = None

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes


def prepare_graph(graph: WsiGraph) -> GraphInputs:
    return GraphInputs(
        graph=graph,
        features=constant(graph.node_features),
        a_hat=normalize_adjacency(graph),
        mask=attention_mask(graph),
        weights=edge_weight_matrix(graph),
    )


@dataclass(eq=False)
class DenseLayer:
    """Per-instance projection ``act(H W + b)``; the encoder of plain MIL models."""

    weight: Parameter
    bias: Parameter
    activation: Activation = "relu"

    @classmethod
    def initialize(
        cls,
        name: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        activation: Activation = "relu",
    ) -> DenseLayer:
        return cls(
            weight=Parameter(f"{name}.weight", glorot(rng, d_in, d_out)),
            bias=Parameter(f"{name}.bias", np.zeros((1, d_out))),
            activation=activation,
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def dense_forward(layer: DenseLayer, h: Node) -> Node:
    _check_input(h, layer.weight)
    return elementwise(layer.activation, add(h @ layer.weight, layer.bias))


@dataclass(eq=False)
class GcnLayer:
    weight: Parameter
    activation: Activation = "relu"

    @classmethod
    def initialize(
        cls,
        name: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        activation: Activation = "relu",
    ) -> GcnLayer:
        return cls(Parameter(f"{name}.weight", glorot(rng, d_in, d_out)), activation)

    def parameters(self) -> list[Parameter]:
        return [self.weight]


@dataclass(eq=False)
class GatLayer:
    """
    Single-head graph attention. The attention vector ``a`` of width 2 d_out is
    stored as its two halves: ``attn_self`` scores W h_v and ``attn_neighbor``
    scores W h_u.
    """

    weight: Parameter
    attn_self: Parameter
    attn_neighbor: Parameter
    activation: Activation = "elu"
    slope: float = LEAKY_SLOPE

    @classmethod
    def initialize(
        cls,
        name: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        activation: Activation = "elu",
    ) -> GatLayer:
        a = glorot(rng, 2 * d_out, 1)
        return cls(
            weight=Parameter(f"{name}.weight", glorot(rng, d_in, d_out)),
            attn_self=Parameter(f"{name}.attn_self", a[:d_out]),
            attn_neighbor=Parameter(f"{name}.attn_neighbor", a[d_out:]),
            activation=activation,
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.attn_self, self.attn_neighbor]


def _check_input(h: Node, weight: Parameter) -> None:
    if h.shape[1] != weight.shape[0]:
        raise GraphMilShapeError(
            f"Layer '{weight.name}' expects {weight.shape[0]} input features, "
            f"got {h.shape[1]}."
        )


def _check_nodes(h: Node, inputs: GraphInputs) -> None:
    if h.shape[0] != inputs.n_nodes:
        raise GraphMilShapeError(
            f"{h.shape[0]} feature rows for a graph of {inputs.n_nodes} nodes."
        )


def gcn_forward(layer: GcnLayer, h: Node, a_hat: Matrix) -> Node:
    _check_input(h, layer.weight)
    if a_hat.shape != (h.shape[0], h.shape[0]):
        raise GraphMilShapeError(
            f"Adjacency {a_hat.shape} does not match {h.shape[0]} nodes."
        )
    return elementwise(layer.activation, constant(a_hat) @ (h @ layer.weight))


def gat_attention(layer: GatLayer, h: Node, inputs: GraphInputs) -> Node:
    """Row v holds the softmax of e_vu over u in N(v) and v itself."""
    _check_input(h, layer.weight)
    _check_nodes(h, inputs)
    z = h @ layer.weight
    scores = add(z @ layer.attn_self, (z @ layer.attn_neighbor).T)
    e = elementwise("leaky_relu", scores, slope=layer.slope)
    return softmax_rows(e, mask=inputs.mask)


def gat_forward(layer: GatLayer, h: Node, inputs: GraphInputs) -> Node:
    alpha = gat_attention(layer, h, inputs)
    if inputs.weights is not None:
        alpha = mul(alpha, constant(inputs.weights))
    return elementwise(layer.activation, alpha @ (h @ layer.weight))


@dataclass(eq=False)
class GnnStack:
    kind: str
    layers: list[GcnLayer | GatLayer] = field(default_factory=list)
    readout: Readout = "none"

    @classmethod
    def initialize(
        cls,
        kind: str,
        d_in: int,
        hidden: int,
        n_layers: int,
        rng: np.random.Generator,
        readout: Readout = "none",
    ) -> GnnStack:
        """GCN layers use ReLU; GAT layers use ELU, sigmoid on the last."""
        if n_layers < 1:
            raise GraphMilShapeError("A GNN stack needs at least one layer.")
        layers: list[GcnLayer | GatLayer] = []
        for index in range(n_layers):
            name = f"gnn.{index}"
            width_in = d_in if index == 0 else hidden
            if kind == "gcn":
                layers.append(GcnLayer.initialize(name, width_in, hidden, rng))
            elif kind == "gat":
                last = index == n_layers - 1
                act: Activation = "sigmoid" if last else "elu"
                layers.append(GatLayer.initialize(name, width_in, hidden, rng, act))
            else:
                raise GraphMilShapeError(f"Unknown GNN kind '{kind}'.")
        return cls(kind=kind, layers=layers, readout=readout)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def stack_node_features(stack: GnnStack, inputs: GraphInputs, h: Node) -> Node:
    for layer in stack.layers:
        if isinstance(layer, GcnLayer):
            h = gcn_forward(layer, h, inputs.a_hat)
        else:
            h = gat_forward(layer, h, inputs)
    return h


def stack_forward(stack: GnnStack, inputs: GraphInputs, h: Node | None = None) -> Node:
    """
    Run every layer. Returns H^L (N x D) for ``readout="none"`` and a 1 x D graph
    vector for ``max`` or ``mean``.
    """
    features = inputs.features if h is None else h
    if features.shape[1] != stack.input_dim:
        raise GraphMilShapeError(
            f"Graph '{inputs.graph.slide_id}' has {features.shape[1]}-d node "
            f"features, stack expects {stack.input_dim}."
        )
    out = stack_node_features(stack, inputs, features)
    if stack.readout == "max":
        return max_rows(out)
    if stack.readout == "mean":
        return mean_rows(out)
    return out
