"""
Graph views of a slide.

- Patch-graphs: one node per patch, edges between grid neighbors.
- Region-graphs: patches clustered by feature (dataset-wide with mini-batch
  k-means, or per slide with k-means), same-cluster connected regions become
  nodes, spatially touching regions are joined (region adjacency graph).
- Centroid-graphs: per-slide k-means centroids, fully connected, edges weighted
  by cosine distance.
- Bag graphs: one node per patch and no edges, for plain MIL.
"""

from __future__ import annotations

import json
import logging

from collections.abc import Iterable
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numpy.typing import NDArray

from graph_mil._autodiff import Matrix
from graph_mil._binary import ByteReader
from graph_mil._binary import pack_matrix
from graph_mil._clustering import BACKGROUND
from graph_mil._clustering import IntArray
from graph_mil._clustering import MiniBatchKMeansState
from graph_mil._clustering import connected_components
from graph_mil._clustering import kmeans
from graph_mil._clustering import minibatch_partial_fit
from graph_mil._clustering import minibatch_predict
from graph_mil._config import TrainConfig
from graph_mil._config import derive_seed
from graph_mil._errors import FormatErrorCode
from graph_mil._errors import GraphMilFormatError
from graph_mil._errors import GraphMilGraphError
from graph_mil._errors import GraphMilShapeError
from graph_mil._slide_io import Manifest
from graph_mil._slide_io import SlideRecord


logger = logging.getLogger(__name__)

# Half of each neighborhood, so every unordered pair is visited once.
_FORWARD_OFFSETS = {
    4: ((0, 1), (1, 0)),
    8: ((0, 1), (1, -1), (1, 0), (1, 1)),
}


@dataclass(frozen=True, eq=False)
class WsiGraph:
    """
    Node features plus an undirected edge list (i < j, no self-loops). Each node
    lists the slide patches it stands for; together they partition the slide.
    """

    slide_id: str
    node_features: Matrix
    edges: IntArray
    node_to_patches: tuple[tuple[int, ...], ...]
    edge_weights: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        features = np.asarray(self.node_features, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = features.shape[0]
        if features.ndim != 2 or n < 1:
            raise GraphMilShapeError(f"Graph '{self.slide_id}' needs N x d features.")
        if len(self.node_to_patches) != n:
            raise GraphMilShapeError(
                f"Graph '{self.slide_id}': {n} nodes but "
                f"{len(self.node_to_patches)} node_to_patches entries."
            )
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise GraphMilShapeError(f"Graph '{self.slide_id}': edge out of range.")
            if (edges[:, 0] >= edges[:, 1]).any():
                raise GraphMilShapeError(
                    f"Graph '{self.slide_id}': edges must satisfy i < j."
                )
            if np.unique(edges, axis=0).shape[0] != edges.shape[0]:
                raise GraphMilShapeError(f"Graph '{self.slide_id}': duplicate edges.")

        weights = self.edge_weights
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64).ravel()
            if weights.shape[0] != edges.shape[0]:
                raise GraphMilShapeError(
                    f"Graph '{self.slide_id}': {weights.shape[0]} weights for "
                    f"{edges.shape[0]} edges."
                )

        members = sorted(p for group in self.node_to_patches for p in group)
        if members != list(range(len(members))):
            raise GraphMilShapeError(
                f"Graph '{self.slide_id}': node_to_patches is not a partition."
            )

        object.__setattr__(self, "node_features", features)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_weights", weights)

    @property
    def n_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def n_patches(self) -> int:
        return sum(len(group) for group in self.node_to_patches)

    def adjacency(self) -> Matrix:
        """Dense symmetric adjacency; edge weights fill the entries when present."""
        a = np.zeros((self.n_nodes, self.n_nodes))
        if self.edges.size:
            values = 1.0 if self.edge_weights is None else self.edge_weights
            a[self.edges[:, 0], self.edges[:, 1]] = values
            a[self.edges[:, 1], self.edges[:, 0]] = values
        return a

    def neighbors(self, node: int) -> list[int]:
        left = self.edges[self.edges[:, 0] == node, 1]
        right = self.edges[self.edges[:, 1] == node, 0]
        return sorted(int(v) for v in np.concatenate([left, right]))


def _canonical_edges(pairs: Iterable[tuple[int, int]]) -> IntArray:
    unique = {(min(i, j), max(i, j)) for i, j in pairs if i != j}
    if not unique:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(unique), dtype=np.int64)


def patch_pairs(coords: IntArray, connectivity: int = 8) -> list[tuple[int, int]]:
    """Index pairs of patches that touch on the grid."""
    if connectivity not in _FORWARD_OFFSETS:
        raise GraphMilGraphError(f"connectivity must be 4 or 8, got {connectivity}.")
    index = {(int(r), int(c)): i for i, (r, c) in enumerate(coords)}
    if len(index) != coords.shape[0]:
        raise GraphMilGraphError("Slide has duplicate patch coordinates.")
    pairs = []
    for (row, col), i in index.items():
        for dr, dc in _FORWARD_OFFSETS[connectivity]:
            j = index.get((row + dr, col + dc))
            if j is not None:
                pairs.append((i, j))
    return pairs


def build_bag_graph(slide: SlideRecord) -> WsiGraph:
    return WsiGraph(
        slide_id=slide.slide_id,
        node_features=slide.features,
        edges=np.zeros((0, 2), dtype=np.int64),
        node_to_patches=tuple((i,) for i in range(slide.n_patches)),
    )


def build_patch_graph(slide: SlideRecord, connectivity: int = 8) -> WsiGraph:
    """One node per patch, edges between Chebyshev-adjacent (or 4-adjacent) cells."""
    return WsiGraph(
        slide_id=slide.slide_id,
        node_features=slide.features,
        edges=_canonical_edges(patch_pairs(slide.coords, connectivity)),
        node_to_patches=tuple((i,) for i in range(slide.n_patches)),
    )


def region_graph_from_labels(
    slide: SlideRecord,
    patch_labels: IntArray,
    region_connectivity: int = 4,
    adjacency_connectivity: int = 8,
) -> WsiGraph:
    """
    Turn per-patch cluster labels into a region adjacency graph.

    Regions are same-label connected components under ``region_connectivity``;
    two regions are joined when any of their patches touch under
    ``adjacency_connectivity``.
    """
    labels = np.asarray(patch_labels, dtype=np.int64)
    if labels.shape != (slide.n_patches,):
        raise GraphMilShapeError(
            f"Expected {slide.n_patches} patch labels, got {labels.shape}."
        )
    height, width = slide.grid_shape
    grid = np.full((height, width), BACKGROUND, dtype=np.int64)
    grid[slide.coords[:, 0], slide.coords[:, 1]] = labels

    regions, count = connected_components(grid, connectivity=region_connectivity)
    patch_region = regions[slide.coords[:, 0], slide.coords[:, 1]]
    node_to_patches = tuple(
        tuple(int(p) for p in np.flatnonzero(patch_region == region))
        for region in range(count)
    )
    features = np.vstack(
        [slide.features[list(members)].mean(axis=0) for members in node_to_patches]
    )
    pairs = (
        (int(patch_region[i]), int(patch_region[j]))
        for i, j in patch_pairs(slide.coords, adjacency_connectivity)
    )
    return WsiGraph(
        slide_id=slide.slide_id,
        node_features=features,
        edges=_canonical_edges(pairs),
        node_to_patches=node_to_patches,
    )


def _chunks(slides: Iterable[SlideRecord], size: int) -> Iterator[list[SlideRecord]]:
    chunk: list[SlideRecord] = []
    for slide in slides:
        chunk.append(slide)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def fit_region_clusters(
    slides: Iterable[SlideRecord], k_regions: int, chunk: int = 50, seed: int = 0
) -> MiniBatchKMeansState:
    """Stream slides ``chunk`` at a time through mini-batch k-means."""
    state = MiniBatchKMeansState(k=k_regions, seed=seed)
    seen = 0
    for batch in _chunks(slides, chunk):
        minibatch_partial_fit(state, np.vstack([s.features for s in batch]))
        seen += len(batch)
    if seen == 0 or not state.initialized:
        raise GraphMilGraphError("Global region clustering needs at least one slide.")
    logger.debug("Fitted %d region clusters on %d slides", k_regions, seen)
    return state


def build_region_graph_from_state(
    slide: SlideRecord,
    state: MiniBatchKMeansState,
    region_connectivity: int = 4,
    adjacency_connectivity: int = 8,
) -> WsiGraph:
    return region_graph_from_labels(
        slide,
        minibatch_predict(state, slide.features),
        region_connectivity,
        adjacency_connectivity,
    )


def build_region_graph_global(
    manifest: Manifest,
    k_regions: int = 10,
    chunk: int = 50,
    seed: int = 0,
    region_connectivity: int = 4,
    adjacency_connectivity: int = 8,
) -> dict[str, WsiGraph]:
    """Dataset-wide region graphs: stream-fit clusters, then segment each slide."""
    if len(manifest) == 0:
        raise GraphMilGraphError("Global region graphs need a non-empty dataset.")
    slides = (manifest.load(slide_id) for slide_id in manifest.slide_ids)
    state = fit_region_clusters(slides, k_regions, chunk, seed)
    return {
        slide_id: build_region_graph_from_state(
            manifest.load(slide_id), state, region_connectivity, adjacency_connectivity
        )
        for slide_id in manifest.slide_ids
    }


def build_region_graph_local(
    slide: SlideRecord,
    k_regions: int = 10,
    seed: int = 0,
    region_connectivity: int = 4,
    adjacency_connectivity: int = 8,
) -> WsiGraph:
    """Region graph whose clusters come from this slide's patches only."""
    result = kmeans(slide.features, k_regions, seed)
    return region_graph_from_labels(
        slide, result.assignments, region_connectivity, adjacency_connectivity
    )


def cosine_distance(a: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    norms = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norms == 0.0:
        raise GraphMilGraphError("Cosine distance is undefined for a zero vector.")
    return float(np.clip(1.0 - float(a @ b) / norms, 0.0, 2.0))


def build_centroid_graph(slide: SlideRecord, k: int = 9, seed: int = 0) -> WsiGraph:
    """
    k nodes from per-slide k-means, all pairs connected, each edge weighted by
    the cosine distance of its endpoint features. Patch positions are ignored.
    """
    if slide.n_patches < k:
        raise GraphMilGraphError(
            f"Slide '{slide.slide_id}' has {slide.n_patches} patches, "
            f"fewer than k={k}."
        )
    result = kmeans(slide.features, k, seed)
    node_to_patches = tuple(
        tuple(int(p) for p in np.flatnonzero(result.assignments == cluster))
        for cluster in range(k)
    )
    features = np.vstack(
        [slide.features[list(members)].mean(axis=0) for members in node_to_patches]
    )
    if (np.linalg.norm(features, axis=1) == 0.0).any():
        raise GraphMilGraphError(
            f"Slide '{slide.slide_id}': a centroid has zero norm."
        )

    edges = [(i, j) for i in range(k) for j in range(i + 1, k)]
    weights = np.array([cosine_distance(features[i], features[j]) for i, j in edges])
    return WsiGraph(
        slide_id=slide.slide_id,
        node_features=features,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        node_to_patches=node_to_patches,
        edge_weights=weights if edges else None,
    )


def save_graph(graph: WsiGraph, path: str | Path) -> Path:
    """
    Write ``path`` (edge list), ``path.features`` (u32 rows, u32 cols, f32
    row-major) and ``path.nodes.json`` (node to patch mapping).
    """
    target = Path(path)
    lines = [f"# nodes {graph.n_nodes}"]
    for index, (i, j) in enumerate(graph.edges):
        if graph.edge_weights is None:
            lines.append(f"{i} {j}")
        else:
            lines.append(f"{i} {j} {float(graph.edge_weights[index])!r}")
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(f"{target}.features").write_bytes(pack_matrix(graph.node_features, "<f4"))
    Path(f"{target}.nodes.json").write_text(
        json.dumps([list(group) for group in graph.node_to_patches]), encoding="utf-8"
    )
    return target


def load_graph(path: str | Path, slide_id: str | None = None) -> WsiGraph:
    source = Path(path)
    lines = source.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# nodes "):
        raise GraphMilFormatError(
            FormatErrorCode.BAD_MAGIC, f"{source} lacks a '# nodes N' header."
        )
    edges: list[tuple[int, int]] = []
    weights: list[float] = []
    try:
        n_nodes = int(lines[0].split()[2])
        for line in lines[1:]:
            parts = line.split()
            edges.append((int(parts[0]), int(parts[1])))
            if len(parts) == 3:
                weights.append(float(parts[2]))
    except (ValueError, IndexError) as e:
        raise GraphMilFormatError(
            FormatErrorCode.CORRUPT, f"{source}: malformed edge list ({e})."
        ) from e

    sidecar = Path(f"{source}.features")
    reader = ByteReader(sidecar.read_bytes(), source=str(sidecar))
    features = reader.matrix("node features", dtype="<f4")
    reader.finish()
    if features.shape[0] != n_nodes:
        raise GraphMilFormatError(
            FormatErrorCode.CORRUPT,
            f"{sidecar} holds {features.shape[0]} rows for {n_nodes} nodes.",
        )
    groups = json.loads(Path(f"{source}.nodes.json").read_text(encoding="utf-8"))

    return WsiGraph(
        slide_id=slide_id or source.stem,
        node_features=features,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        node_to_patches=tuple(tuple(group) for group in groups),
        edge_weights=np.array(weights) if weights else None,
    )


def build_graph(
    cfg: TrainConfig,
    slide: SlideRecord,
    regions: MiniBatchKMeansState | None = None,
) -> WsiGraph:
    """
    The graph view ``cfg.graph_kind`` asks for. Per-slide clustering draws its
    seed from the config seed and the slide id, so the same slide always yields
    the same graph.
    """
    seed = derive_seed(cfg.seed, "graph", slide.slide_id)
    if cfg.graph_kind == "none":
        return build_bag_graph(slide)
    if cfg.graph_kind == "patch":
        return build_patch_graph(slide, cfg.patch_connectivity)
    if cfg.graph_kind == "region_global":
        if regions is None:
            raise GraphMilGraphError(
                "region_global graphs need fitted region clusters."
            )
        return build_region_graph_from_state(slide, regions, cfg.region_connectivity)
    if cfg.graph_kind == "region_local":
        return build_region_graph_local(
            slide, cfg.k_regions, seed, cfg.region_connectivity
        )
    return build_centroid_graph(slide, cfg.centroid_k, seed)
