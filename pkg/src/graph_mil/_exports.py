from __future__ import annotations

import logging

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from numpy.typing import ArrayLike
from PIL import Image

from graph_mil._autodiff import Matrix
from graph_mil._clustering import cluster_purity
from graph_mil._clustering import kmeans
from graph_mil._errors import GraphMilClusteringError
from graph_mil._errors import GraphMilDataError
from graph_mil._errors import GraphMilShapeError
from graph_mil._gnn import prepare_graph
from graph_mil._graphs import WsiGraph
from graph_mil._model import GraphMilModel
from graph_mil._slide_io import SlideRecord


logger = logging.getLogger(__name__)

HEATMAP_BACKGROUND = -1.0


@dataclass(frozen=True)
class PurityReport:
    purity: float
    table: pd.DataFrame


def purity_report(
    embeddings: ArrayLike, labels: ArrayLike, k: int, seed: int
) -> PurityReport:
    """k-means on bag embeddings, scored against the slide labels."""
    data = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    y = np.asarray(labels).ravel()
    if data.shape[0] < k:
        raise GraphMilClusteringError(
            f"Purity analysis needs at least K={k} embeddings, got {data.shape[0]}."
        )
    result = kmeans(data, k, seed)
    table = pd.crosstab(
        pd.Series(result.assignments, name="cluster"),
        pd.Series(y, name="label"),
    )
    table = table.reindex(index=range(k), fill_value=0)
    table.columns = [f"label_{c}" for c in table.columns]
    return PurityReport(purity=cluster_purity(result.assignments, y), table=table)


def attention_grid(
    slide: SlideRecord, graph: WsiGraph, node_scores: ArrayLike
) -> Matrix:
    """
    Spread node scores over the slide grid and min-max normalize them.

    Region and centroid nodes hand their score to every member patch. Cells
    without a patch hold ``HEATMAP_BACKGROUND``; if all scores are equal every
    patch cell is 1.0.
    """
    scores = np.asarray(node_scores, dtype=np.float64).ravel()
    if scores.shape[0] != graph.n_nodes:
        raise GraphMilShapeError(
            f"{scores.shape[0]} attention scores for {graph.n_nodes} nodes."
        )
    patch_scores = np.empty(slide.n_patches)
    for node, members in enumerate(graph.node_to_patches):
        patch_scores[list(members)] = scores[node]

    low, high = patch_scores.min(), patch_scores.max()
    if high > low:
        normalized = (patch_scores - low) / (high - low)
    else:
        normalized = np.ones_like(patch_scores)

    grid = np.full(slide.grid_shape, HEATMAP_BACKGROUND)
    grid[slide.coords[:, 0], slide.coords[:, 1]] = normalized
    return grid


def write_heatmap(grid: Matrix, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and an 8-bit ``<path>.pgm``; background maps to 0."""
    base = Path(path)
    csv_path = base.with_suffix(".csv")
    pgm_path = base.with_suffix(".pgm")
    pd.DataFrame(grid).to_csv(
        csv_path, header=False, index=False, float_format="%.6f", lineterminator="\n"
    )
    pixels = np.where(grid < 0, 0.0, grid)
    image = Image.fromarray(np.rint(pixels * 255.0).astype(np.uint8))
    image.save(pgm_path, format="PPM")
    return csv_path, pgm_path


def export_heatmap(
    model: GraphMilModel, slide: SlideRecord, graph: WsiGraph, path: str | Path
) -> Matrix:
    output = model.predict(prepare_graph(graph))
    if output.attention is None:
        raise GraphMilDataError(
            f"{model.name} has no per-instance attention to draw a heatmap from."
        )
    grid = attention_grid(slide, graph, output.attention)
    csv_path, pgm_path = write_heatmap(grid, path)
    logger.info("Heatmap of %s written to %s, %s", slide.slide_id, csv_path, pgm_path)
    return grid


def embeddings_frame(
    embeddings: ArrayLike,
    slide_ids: Sequence[str],
    labels: Sequence[int],
    centers: Sequence[str],
) -> pd.DataFrame:
    data = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if not data.shape[0] == len(slide_ids) == len(labels) == len(centers):
        raise GraphMilShapeError(
            f"{data.shape[0]} embeddings for {len(slide_ids)} slides."
        )
    frame = pd.DataFrame(
        {"slide_id": list(slide_ids), "center_id": list(centers), "label": list(labels)}
    )
    values = pd.DataFrame(data, columns=[f"e_{i}" for i in range(data.shape[1])])
    return pd.concat([frame, values], axis=1)


def export_embeddings(
    embeddings: ArrayLike,
    slide_ids: Sequence[str],
    labels: Sequence[int],
    centers: Sequence[str],
    path: str | Path,
) -> Path:
    """CSV with slide_id, center_id, label and e_0 .. e_{d-1}, 17 significant digits."""
    target = Path(path)
    frame = embeddings_frame(embeddings, slide_ids, labels, centers)
    frame.to_csv(target, index=False, float_format="%.17g", lineterminator="\n")
    return target
