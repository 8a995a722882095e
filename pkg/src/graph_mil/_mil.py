"""
MIL pooling: attention-based (ABMIL) and dual-stream (DSMIL) aggregation of
instance or node features into one bag embedding and a bag probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from numpy.typing import ArrayLike
from numpy.typing import NDArray

from graph_mil._autodiff import Node
from graph_mil._autodiff import Parameter
from graph_mil._autodiff import add
from graph_mil._autodiff import bce_loss
from graph_mil._autodiff import elementwise
from graph_mil._autodiff import scale
from graph_mil._autodiff import select_row
from graph_mil._autodiff import softmax_rows
from graph_mil._errors import GraphMilShapeError
from graph_mil._gnn import glorot


@dataclass(eq=False)
class LinearHead:
    """The bag classifier g: one logit from a 1 x d embedding."""

    weight: Parameter
    bias: Parameter

    @classmethod
    def initialize(cls, name: str, d_in: int, rng: np.random.Generator) -> LinearHead:
        return cls(
            weight=Parameter(f"{name}.weight", glorot(rng, d_in, 1)),
            bias=Parameter(f"{name}.bias", np.zeros((1, 1))),
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def head_logit(head: LinearHead, embedding: Node) -> Node:
    if embedding.shape != (1, head.weight.shape[0]):
        raise GraphMilShapeError(
            f"Classifier expects a 1 x {head.weight.shape[0]} embedding, "
            f"got {embedding.shape}."
        )
    return add(embedding @ head.weight, head.bias)


@dataclass(eq=False)
class BagOutput:
    embedding: Node
    prediction: Node
    attention: NDArray[np.float64] | None = None
    critical_index: int | None = None
    instance_scores: NDArray[np.float64] | None = None

    @property
    def probability(self) -> float:
        return self.prediction.item()


@dataclass(eq=False)
class AbmilParams:
    v: Parameter
    w: Parameter
    head: LinearHead

    @classmethod
    def initialize(
        cls, d: int, d_att: int, rng: np.random.Generator, name: str = "mil"
    ) -> AbmilParams:
        return cls(
            v=Parameter(f"{name}.v", glorot(rng, d, d_att)),
            w=Parameter(f"{name}.w", glorot(rng, d_att, 1)),
            head=LinearHead.initialize(f"{name}.head", d, rng),
        )

    @property
    def input_dim(self) -> int:
        return self.v.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.v, self.w, *self.head.parameters()]


@dataclass(eq=False)
class DsmilParams:
    instance_weight: Parameter
    query: Parameter
    value: Parameter
    head: LinearHead

    @classmethod
    def initialize(
        cls, d: int, d_q: int, rng: np.random.Generator, name: str = "mil"
    ) -> DsmilParams:
        return cls(
            instance_weight=Parameter(f"{name}.instance_weight", glorot(rng, d, 1)),
            query=Parameter(f"{name}.query", glorot(rng, d, d_q)),
            value=Parameter(f"{name}.value", glorot(rng, d, d)),
            head=LinearHead.initialize(f"{name}.head", d, rng),
        )

    @property
    def input_dim(self) -> int:
        return self.query.shape[0]

    def parameters(self) -> list[Parameter]:
        return [
            self.instance_weight,
            self.query,
            self.value,
            *self.head.parameters(),
        ]


def _check_bag(h: Node, d: int) -> None:
    if h.shape[0] < 1:
        raise GraphMilShapeError("A bag needs at least one instance.")
    if h.shape[1] != d:
        raise GraphMilShapeError(f"Instances are {h.shape[1]}-d, pooling expects {d}.")


def abmil_pool(h: Node, params: AbmilParams) -> BagOutput:
    """
    a = softmax_k(w^T tanh(V^T h_k)), B = sum_k a_k h_k, y = sigmoid(g(B)).
    """
    _check_bag(h, params.input_dim)
    scores = elementwise("tanh", h @ params.v) @ params.w
    attention = softmax_rows(scores.T)
    embedding = attention @ h
    prediction = elementwise("sigmoid", head_logit(params.head, embedding))
    return BagOutput(
        embedding=embedding,
        prediction=prediction,
        attention=attention.value.ravel().copy(),
    )


def dsmil_forward(h: Node, params: DsmilParams) -> BagOutput:
    """
    Instance stream: s_k = W_ic^T h_k, critical index m = argmax s_k (lowest
    index on ties). Bag stream: U = softmax_k(q_k . q_m), B = sum_k U_k v_k.
    The bag probability is sigmoid of the mean of s_m and g(B).
    """
    _check_bag(h, params.input_dim)
    instance_scores = h @ params.instance_weight
    critical = int(np.argmax(instance_scores.value[:, 0]))

    queries = h @ params.query
    values = h @ params.value
    attention = softmax_rows(select_row(queries, critical) @ queries.T)
    embedding = attention @ values

    critical_score = select_row(instance_scores, critical)
    logit = add(critical_score, head_logit(params.head, embedding))
    prediction = elementwise("sigmoid", scale(logit, 0.5))
    return BagOutput(
        embedding=embedding,
        prediction=prediction,
        attention=attention.value.ravel().copy(),
        critical_index=critical,
        instance_scores=instance_scores.value.ravel().copy(),
    )


def stage2_loss(predictions: Node, labels: ArrayLike) -> Node:
    return bce_loss(predictions, labels)
