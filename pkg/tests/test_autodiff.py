from __future__ import annotations

import math

import numpy as np
import pytest

from _gradcheck import TOLERANCE
from _gradcheck import max_gradient_error

from graph_mil._autodiff import Node
from graph_mil._autodiff import Parameter
from graph_mil._autodiff import add
from graph_mil._autodiff import as_matrix
from graph_mil._autodiff import backward
from graph_mil._autodiff import bce_loss
from graph_mil._autodiff import concat_cols
from graph_mil._autodiff import constant
from graph_mil._autodiff import elementwise
from graph_mil._autodiff import is_recording
from graph_mil._autodiff import matmul
from graph_mil._autodiff import max_rows
from graph_mil._autodiff import mean_rows
from graph_mil._autodiff import mul
from graph_mil._autodiff import no_grad
from graph_mil._autodiff import parameters_of
from graph_mil._autodiff import scale
from graph_mil._autodiff import select_row
from graph_mil._autodiff import softmax_rows
from graph_mil._autodiff import sub
from graph_mil._autodiff import sum_all
from graph_mil._autodiff import transpose
from graph_mil._errors import GraphMilInvariantError
from graph_mil._errors import GraphMilNonFiniteError
from graph_mil._errors import GraphMilShapeError


def weighted_sum(node: Node, weights: np.ndarray) -> Node:
    return sum_all(mul(node, constant(weights)))


def test_as_matrix_shapes():
    assert as_matrix(3.0).shape == (1, 1)
    assert as_matrix([1.0, 2.0, 3.0]).shape == (1, 3)
    assert as_matrix([[1.0], [2.0]]).shape == (2, 1)
    with pytest.raises(GraphMilShapeError):
        as_matrix(np.zeros((2, 2, 2)))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf], ids=["nan", "inf", "-inf"])
def test_as_matrix_rejects_non_finite(bad):
    with pytest.raises(GraphMilNonFiniteError):
        as_matrix([[1.0, bad]])


activation_cases = ["sigmoid", "tanh", "relu", "leaky_relu", "elu", "identity"]


@pytest.mark.parametrize("kind", activation_cases)
def test_activation_gradients(kind):
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = Parameter("x", rng.standard_normal((3, 4)))
        weights = rng.standard_normal((3, 4))
        error = max_gradient_error(
            lambda x=x, w=weights: weighted_sum(elementwise(kind, x), w), [x]
        )
        assert error <= TOLERANCE, f"{kind}: relative error {error:.2e}"


def test_activation_values():
    x = constant([[-2.0, 0.0, 3.0]])
    np.testing.assert_allclose(
        elementwise("leaky_relu", x, slope=0.2).value, [[-0.4, 0.0, 3.0]]
    )
    np.testing.assert_allclose(elementwise("relu", x).value, [[0.0, 0.0, 3.0]])
    np.testing.assert_allclose(
        elementwise("elu", x).value, [[math.expm1(-2.0), 0.0, 3.0]]
    )
    np.testing.assert_allclose(elementwise("sigmoid", constant(0.0)).value, [[0.5]])


def test_unknown_activation_is_rejected():
    with pytest.raises(GraphMilInvariantError):
        elementwise("softplus", constant(1.0))  # type: ignore[arg-type]


def composite_loss(a: Parameter, b: Parameter, c: Parameter, w: np.ndarray) -> Node:
    # Exercises matmul, broadcasting add/sub, transpose, concat, select and pooling.
    h = elementwise("tanh", add(matmul(a, b), c))
    joined = concat_cols(h, transpose(matmul(transpose(b), transpose(a))))
    pooled = add(max_rows(joined), mean_rows(sub(joined, scale(joined, 0.3))))
    picked = select_row(joined, 1)
    return weighted_sum(add(pooled, picked), w)


def test_composite_gradients():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = Parameter("a", rng.standard_normal((4, 3)))
        b = Parameter("b", rng.standard_normal((3, 2)))
        c = Parameter("c", rng.standard_normal((1, 2)))
        w = rng.standard_normal((1, 4))
        error = max_gradient_error(
            lambda a=a, b=b, c=c, w=w: composite_loss(a, b, c, w), [a, b, c]
        )
        assert error <= TOLERANCE, f"relative error {error:.2e}"


def test_softmax_gradients_with_mask():
    rng = np.random.default_rng(3)
    mask = np.array(
        [[True, False, True], [False, True, False], [True, True, True]], dtype=bool
    )
    for _ in range(20):
        x = Parameter("x", rng.standard_normal((3, 3)))
        w = rng.standard_normal((3, 3))
        error = max_gradient_error(
            lambda x=x, w=w: weighted_sum(softmax_rows(x, mask), w), [x]
        )
        assert error <= TOLERANCE


def test_softmax_rows_sum_to_one_and_respect_mask():
    mask = np.array([[True, False, True], [False, True, False]], dtype=bool)
    probs = softmax_rows(constant([[1.0, 5.0, 2.0], [3.0, -1.0, 0.0]]), mask).value
    np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0])
    assert probs[0, 1] == 0.0
    np.testing.assert_allclose(probs[1], [0.0, 1.0, 0.0])


def test_softmax_is_shift_invariant():
    x = np.array([[0.3, -1.2, 2.5, 0.0]])
    np.testing.assert_allclose(
        softmax_rows(constant(x)).value, softmax_rows(constant(x + 40.0)).value
    )


def test_softmax_rejects_empty_mask_row():
    mask = np.array([[False, False]], dtype=bool)
    with pytest.raises(GraphMilShapeError):
        softmax_rows(constant([[1.0, 2.0]]), mask)


def test_max_rows_tie_routes_to_lowest_row():
    x = Parameter("x", [[1.0, 2.0], [1.0, 0.0]])
    backward(sum_all(max_rows(x)))
    np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0]])


bce_cases = [
    ("half_positive", [[0.5]], [[1]], math.log(2.0)),
    ("half_negative", [[0.5]], [[0]], math.log(2.0)),
    (
        "batch_mean",
        [[0.9], [0.2]],
        [[1], [0]],
        -(math.log(0.9) + math.log(0.8)) / 2.0,
    ),
]


@pytest.mark.parametrize(
    "pred, labels, expected",
    [case[1:] for case in bce_cases],
    ids=[case[0] for case in bce_cases],
)
def test_bce_values(pred, labels, expected):
    assert bce_loss(constant(pred), labels).item() == pytest.approx(expected)


def test_bce_of_perfect_prediction_is_near_zero():
    assert bce_loss(constant([[1.0], [0.0]]), [[1], [0]]).item() < 1e-6


def test_bce_clamped_entries_pass_no_gradient():
    p = Parameter("p", [[1.0, 0.4]])
    loss = bce_loss(p, [[0, 1]])
    assert math.isfinite(loss.item())
    backward(loss)
    assert p.grad[0, 0] == 0.0
    assert p.grad[0, 1] != 0.0


def test_bce_gradient():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = Parameter("p", rng.uniform(0.05, 0.95, size=(5, 1)))
        labels = rng.integers(0, 2, size=(5, 1))
        error = max_gradient_error(lambda p=p, y=labels: bce_loss(p, y), [p])
        assert error <= TOLERANCE


def test_backward_requires_scalar():
    x = Parameter("x", [[1.0, 2.0]])
    with pytest.raises(GraphMilShapeError):
        backward(mul(x, x))


def test_leaf_gradients_accumulate_and_intermediates_reset():
    x = Parameter("x", [[2.0, -1.0]])
    y = mul(x, x)
    loss = sum_all(y)
    backward(loss)
    backward(loss)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.value)
    np.testing.assert_allclose(y.grad, [[1.0, 1.0]])


def test_no_grad_records_nothing():
    x = Parameter("x", [[1.0]])
    with no_grad():
        assert not is_recording()
        y = mul(x, x)
    assert is_recording()
    assert not y.requires_grad


def test_cycle_is_detected():
    a = Node([[1.0]])
    b = Node([[2.0]], parents=(a,), backward=lambda g: (g,), op="loop")
    a._parents = (b,)
    with pytest.raises(GraphMilInvariantError):
        backward(b)


def test_shape_mismatch_is_rejected():
    with pytest.raises(GraphMilShapeError):
        matmul(constant(np.zeros((2, 3))), constant(np.zeros((2, 3))))
    with pytest.raises(GraphMilShapeError):
        add(constant(np.zeros((2, 3))), constant(np.zeros((3, 2))))


def test_parameters_of_deduplicates_in_order():
    a = Parameter("a", [[1.0]])
    b = Parameter("b", [[2.0]])
    found = parameters_of([a, {"x": b, "y": a}], (b,))
    assert [p.name for p in found] == ["a", "b"]
