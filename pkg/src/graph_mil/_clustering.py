"""
Clustering primitives shared by graph construction and interventional training:
Lloyd k-means with k-means++ seeding, streaming mini-batch k-means, PCA,
label-aware connected components and cluster purity.
"""

from __future__ import annotations

import logging

from dataclasses import dataclass
from dataclasses import field

import numpy as np

from numpy.typing import ArrayLike
from numpy.typing import NDArray
from scipy import ndimage
from sklearn.cluster import kmeans_plusplus
from sklearn.decomposition import PCA

from graph_mil._autodiff import Matrix
from graph_mil._errors import GraphMilClusteringError
from graph_mil._errors import GraphMilConfigError
from graph_mil._errors import GraphMilShapeError


logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]

BACKGROUND = -1


@dataclass(frozen=True)
class KMeansResult:
    centroids: Matrix
    assignments: IntArray
    inertia: float
    n_iter: int
    inertia_history: tuple[float, ...] = ()


def _points(points: ArrayLike) -> Matrix:
    array = np.asarray(points, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    if array.ndim != 2:
        raise GraphMilShapeError(f"Points must be a 2-D array, got {array.ndim}-D.")
    return array


def squared_distances(points: Matrix, centroids: Matrix) -> Matrix:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign_nearest(points: Matrix, centroids: Matrix) -> tuple[IntArray, Matrix]:
    """Nearest-centroid assignment; ties resolve to the lowest centroid index."""
    distances = squared_distances(points, centroids)
    assignments = np.argmin(distances, axis=1).astype(np.int64)
    return assignments, distances[np.arange(points.shape[0]), assignments]


def _repair_empty(
    points: Matrix, centroids: Matrix, assignments: IntArray, dist: Matrix, k: int
) -> None:
    # Empty cluster takes over the point farthest from its own centroid.
    for cluster in range(k):
        sizes = np.bincount(assignments, minlength=k)
        if sizes[cluster] > 0:
            continue
        donors = sizes[assignments] > 1
        candidates = np.where(donors, dist, -np.inf)
        moved = int(np.argmax(candidates))
        assignments[moved] = cluster
        centroids[cluster] = points[moved]
        dist[moved] = 0.0


def _lloyd(
    points: Matrix, k: int, seed: int, max_iter: int, tol: float
) -> KMeansResult:
    centroids, _ = kmeans_plusplus(points, n_clusters=k, random_state=seed)
    centroids = centroids.astype(np.float64, copy=True)
    assignments, dist = assign_nearest(points, centroids)
    _repair_empty(points, centroids, assignments, dist, k)
    history = [float(dist.sum())]

    n_iter = 0
    for n_iter in range(1, max_iter + 1):  # noqa: B007
        updated = np.vstack(
            [points[assignments == cluster].mean(axis=0) for cluster in range(k)]
        )
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated

        next_assignments, dist = assign_nearest(points, centroids)
        _repair_empty(points, centroids, next_assignments, dist, k)
        history.append(float(dist.sum()))

        stable = np.array_equal(next_assignments, assignments)
        assignments = next_assignments
        if stable or shift < tol:
            break

    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        inertia=history[-1],
        n_iter=n_iter,
        inertia_history=tuple(history),
    )


def kmeans(
    points: ArrayLike,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 4,
) -> KMeansResult:
    """
    Lloyd's algorithm seeded with k-means++.

    ``n_init`` restarts run with seeds derived from ``seed``; the lowest final
    inertia wins (first restart on ties). Deterministic per seed.
    """
    data = _points(points)
    n = data.shape[0]
    if n == 0:
        raise GraphMilClusteringError("k-means needs at least one point.")
    if k < 1 or n < k:
        raise GraphMilClusteringError(f"k-means needs n >= k >= 1 (n={n}, k={k}).")

    restart_seeds = np.random.SeedSequence(seed).generate_state(max(n_init, 1))
    best: KMeansResult | None = None
    for restart_seed in restart_seeds:
        result = _lloyd(data, k, int(restart_seed), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result

    assert best is not None
    logger.debug(
        "k-means k=%d n=%d converged in %d iterations, inertia=%.6g",
        k,
        n,
        best.n_iter,
        best.inertia,
    )
    return best


@dataclass
class MiniBatchKMeansState:
    """Streaming k-means state updated with Sculley's per-center learning rate."""

    k: int
    seed: int
    centroids: Matrix | None = None
    counts: IntArray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def initialized(self) -> bool:
        return self.centroids is not None


def minibatch_partial_fit(
    state: MiniBatchKMeansState, batch: ArrayLike
) -> MiniBatchKMeansState:
    """
    Fold one batch into the running centroids.

    The first non-empty batch seeds the centroids with k-means++. Each point x
    assigned to center c (assignments cached at batch start) bumps the count
    n_c and moves c by (x - c) / n_c.
    """
    data = _points(batch)
    if data.shape[0] == 0:
        return state

    if state.centroids is None:
        if data.shape[0] < state.k:
            raise GraphMilClusteringError(
                f"First mini-batch has {data.shape[0]} points, need at least {state.k}."
            )
        seeds, _ = kmeans_plusplus(data, n_clusters=state.k, random_state=state.seed)
        state.centroids = seeds.astype(np.float64, copy=True)
        state.counts = np.zeros(state.k, dtype=np.int64)
    elif data.shape[1] != state.centroids.shape[1]:
        raise GraphMilShapeError(
            f"Batch dimension {data.shape[1]} differs from state dimension "
            f"{state.centroids.shape[1]}."
        )

    assignments, _ = assign_nearest(data, state.centroids)
    batch_counts = np.bincount(assignments, minlength=state.k)
    batch_sums = np.zeros_like(state.centroids)
    np.add.at(batch_sums, assignments, data)

    # Sequential running means collapse to one weighted mean per center.
    touched = batch_counts > 0
    previous = state.counts[touched][:, None].astype(np.float64)
    total = previous + batch_counts[touched][:, None]
    state.centroids[touched] = (
        previous * state.centroids[touched] + batch_sums[touched]
    ) / total
    state.counts = state.counts + batch_counts
    return state


def minibatch_predict(state: MiniBatchKMeansState, points: ArrayLike) -> IntArray:
    if state.centroids is None:
        raise GraphMilClusteringError("Mini-batch k-means state was never fitted.")
    data = _points(points)
    if data.shape[1] != state.centroids.shape[1]:
        raise GraphMilShapeError(
            f"Point dimension {data.shape[1]} differs from state dimension "
            f"{state.centroids.shape[1]}."
        )
    assignments, _ = assign_nearest(data, state.centroids)
    return assignments


@dataclass(frozen=True)
class PcaBasis:
    mean: NDArray[np.float64]
    components: Matrix
    explained_variance_ratio: NDArray[np.float64]

    @property
    def n_components(self) -> int:
        return int(self.components.shape[1])

    def transform(self, x: ArrayLike) -> Matrix:
        return (_points(x) - self.mean) @ self.components

    def inverse_transform(self, z: ArrayLike) -> Matrix:
        return _points(z) @ self.components.T + self.mean


def pca_fit_transform(x: ArrayLike, n_components: int) -> tuple[PcaBasis, Matrix]:
    """
    Exact (full SVD) PCA; each component is signed so that its largest-magnitude
    entry is positive.
    """
    data = _points(x)
    n, d = data.shape
    if not 1 <= n_components <= min(n, d):
        raise GraphMilClusteringError(
            f"PCA dimension {n_components} outside [1, {min(n, d)}]."
        )

    pca = PCA(n_components=n_components, svd_solver="full")
    with np.errstate(divide="ignore", invalid="ignore"):
        # A single sample has no variance to divide by.
        pca.fit(data)
    components = np.asarray(pca.components_, dtype=np.float64).T
    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivots, np.arange(n_components)])
    signs[signs == 0] = 1.0

    mean = data.mean(axis=0)
    total = float(((data - mean) ** 2).sum())
    variances = np.asarray(pca.singular_values_, dtype=np.float64) ** 2
    ratios = variances / total if total > 0 else np.zeros_like(variances)

    basis = PcaBasis(
        mean=mean,
        components=components * signs,
        explained_variance_ratio=ratios,
    )
    return basis, basis.transform(data)


def connected_components(
    grid_labels: ArrayLike, connectivity: int = 4, background: int = BACKGROUND
) -> tuple[IntArray, int]:
    """
    Label same-valued connected cells of an integer grid.

    Region ids are dense from 0 and numbered in raster order of each region's
    first cell; background cells get ``BACKGROUND``.
    """
    if connectivity not in (4, 8):
        raise GraphMilConfigError(f"connectivity must be 4 or 8, got {connectivity}.")
    grid = np.asarray(grid_labels, dtype=np.int64)
    if grid.ndim != 2:
        raise GraphMilShapeError(f"Label grid must be 2-D, got {grid.ndim}-D.")

    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    raw = np.zeros(grid.shape, dtype=np.int64)
    offset = 0
    for value in np.unique(grid[grid != background]):
        labeled, count = ndimage.label(grid == value, structure=structure)
        inside = labeled > 0
        raw[inside] = labeled[inside] + offset
        offset += count

    flat = raw.ravel()
    present = flat[flat > 0]
    _, first_seen = np.unique(present, return_index=True)
    ordered = present[np.sort(first_seen)]
    mapping = np.full(offset + 1, BACKGROUND, dtype=np.int64)
    mapping[ordered] = np.arange(ordered.size, dtype=np.int64)
    return mapping[raw], int(ordered.size)


def cluster_purity(assignments: ArrayLike, class_labels: ArrayLike) -> float:
    """Fraction of points whose cluster's majority class equals their own."""
    clusters = np.asarray(assignments).ravel()
    labels = np.asarray(class_labels).ravel()
    if clusters.size == 0:
        raise GraphMilClusteringError("Cluster purity needs at least one point.")
    if clusters.size != labels.size:
        raise GraphMilShapeError(
            f"{clusters.size} assignments but {labels.size} class labels."
        )

    _, label_codes = np.unique(labels, return_inverse=True)
    majority = 0
    for cluster in np.unique(clusters):
        majority += int(np.bincount(label_codes[clusters == cluster]).max())
    return majority / clusters.size
