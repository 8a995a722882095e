from __future__ import annotations

import logging

from collections.abc import Callable
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from numpy.typing import NDArray

from graph_mil._autodiff import Matrix
from graph_mil._autodiff import Node
from graph_mil._autodiff import backward
from graph_mil._autodiff import no_grad
from graph_mil._autodiff import scale
from graph_mil._config import TrainConfig
from graph_mil._config import derive_seed
from graph_mil._errors import GraphMilDataError
from graph_mil._errors import GraphMilShapeError
from graph_mil._gnn import GraphInputs
from graph_mil._metrics import MetricsReport
from graph_mil._metrics import evaluate_scores
from graph_mil._mil import stage2_loss
from graph_mil._model import GraphMilModel
from graph_mil._optim import Optimizer


logger = logging.getLogger(__name__)


@dataclass
class TrainingHistory:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def fit_loop(
    n_items: int,
    loss_fn: Callable[[int], Node],
    optimizer: Optimizer,
    epochs: int,
    accumulation: int,
    seed: int,
    stage: str = "train",
) -> TrainingHistory:
    """
    Batch-size-1 training with gradient accumulation.

    Every item's loss is scaled by 1 / accumulation and backpropagated; the
    optimizer steps once per ``accumulation`` items and once more for an epoch's
    remainder. Item order is reshuffled every epoch from ``seed``.
    """
    if n_items < 1:
        raise GraphMilDataError(f"{stage}: nothing to train on.")
    history = TrainingHistory()
    factor = 1.0 / accumulation
    for epoch in range(epochs):
        order = np.random.default_rng(derive_seed(seed, stage, epoch)).permutation(
            n_items
        )
        total = 0.0
        pending = 0
        for index in order:
            loss = loss_fn(int(index))
            total += loss.item()
            backward(scale(loss, factor))
            pending += 1
            if pending == accumulation:
                optimizer.step()
                pending = 0
        if pending:
            optimizer.step()
        history.epoch_losses.append(total / n_items)
        logger.debug(
            "%s epoch %d/%d: mean loss %.6f", stage, epoch + 1, epochs, total / n_items
        )
    history.steps = optimizer.steps
    return history


def train_stage2(
    model: GraphMilModel,
    inputs: Sequence[GraphInputs],
    labels: Sequence[int],
    seed: int,
    config: TrainConfig | None = None,
) -> TrainingHistory:
    """Train the whole model (GNN and MIL groups) with BCE on slide labels."""
    cfg = config or model.config
    if len(inputs) != len(labels):
        raise GraphMilShapeError(f"{len(inputs)} graphs but {len(labels)} labels.")
    optimizer = Optimizer(model.parameter_groups())

    def loss_fn(index: int) -> Node:
        output = model.forward(inputs[index])
        return stage2_loss(output.prediction, [[labels[index]]])

    history = fit_loop(
        len(inputs), loss_fn, optimizer, cfg.epochs, cfg.accumulation, seed, "stage2"
    )
    logger.info(
        "%s stage 2: %d slides, %d steps, final loss %.4f",
        model.name,
        len(inputs),
        history.steps,
        history.final_loss,
    )
    return history


def extract_bag_embeddings(
    model: GraphMilModel, inputs: Sequence[GraphInputs]
) -> Matrix:
    """One row per graph, in input order, computed without recording gradients."""
    with no_grad():
        rows = [model.forward(item).embedding.value for item in inputs]
    if not rows:
        return np.zeros((0, model.embedding_dim))
    return np.vstack(rows)


def predict_scores(
    model: GraphMilModel, inputs: Sequence[GraphInputs]
) -> NDArray[np.float64]:
    with no_grad():
        return np.array([model.forward(item).probability for item in inputs])


def evaluate(
    model: GraphMilModel,
    inputs: Sequence[GraphInputs],
    labels: Sequence[int],
    threshold: float | None = None,
) -> MetricsReport:
    cutoff = model.config.threshold if threshold is None else threshold
    return evaluate_scores(predict_scores(model, inputs), labels, cutoff)
