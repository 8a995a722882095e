"""
Synthetic multi-center slide generator.

Every slide is a full H x W patch grid. Patch features are gaussian noise plus the
shift vector of the slide's center. Tumor patches additionally carry the tumor
direction u. In the ``contiguity`` task every slide holds the same number of
tumor patches; only their arrangement (one disc vs. scattered, pairwise
non-adjacent cells) depends on the label.
"""

from __future__ import annotations

import logging

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numpy.typing import NDArray

from graph_mil._autodiff import Matrix
from graph_mil._config import SynthConfig
from graph_mil._config import derive_seed
from graph_mil._config import disc_offsets
from graph_mil._errors import GraphMilSynthError
from graph_mil._slide_io import SLIDE_SUFFIX
from graph_mil._slide_io import Manifest
from graph_mil._slide_io import ManifestEntry
from graph_mil._slide_io import SlideRecord
from graph_mil._slide_io import save_slide
from graph_mil._slide_io import write_manifest


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
SLIDES_DIR = "slides"
SCATTER_ATTEMPTS = 200


@dataclass(frozen=True)
class SyntheticDataset:
    manifest: Manifest
    tumor_direction: NDArray[np.float64]
    center_shifts: Matrix
    tumor_masks: dict[str, NDArray[np.bool_]]


def center_positive_count(cfg: SynthConfig, center: int) -> int:
    """Positive slides in ``center``: rate 0.5 +/- rho/2, alternating sign."""
    sign = 1.0 if center % 2 == 0 else -1.0
    rate = 0.5 + 0.5 * cfg.label_center_correlation * sign
    return int(np.floor(rate * cfg.slides_per_center + 0.5))


def _disc_cells(
    rng: np.random.Generator, cfg: SynthConfig
) -> list[tuple[int, int]]:
    r = cfg.blob_radius
    row = int(rng.integers(r, cfg.grid_height - r))
    col = int(rng.integers(r, cfg.grid_width - r))
    return [(row + dr, col + dc) for dr, dc in disc_offsets(r)]


def _scatter_cells(
    rng: np.random.Generator, height: int, width: int, count: int
) -> list[tuple[int, int]]:
    capacity = ((height + 1) // 2) * ((width + 1) // 2)
    if count > capacity:
        raise GraphMilSynthError(
            f"Cannot scatter {count} non-adjacent patches on a {height}x{width} "
            f"grid (at most {capacity})."
        )
    for _ in range(SCATTER_ATTEMPTS):
        taken = np.zeros((height, width), dtype=bool)
        chosen: list[tuple[int, int]] = []
        for cell in rng.permutation(height * width):
            row, col = divmod(int(cell), width)
            if taken[max(row - 1, 0) : row + 2, max(col - 1, 0) : col + 2].any():
                continue
            taken[row, col] = True
            chosen.append((row, col))
            if len(chosen) == count:
                return sorted(chosen)
    raise GraphMilSynthError(
        f"Failed to scatter {count} non-adjacent patches on a {height}x{width} grid "
        f"after {SCATTER_ATTEMPTS} attempts."
    )


def _tumor_cells(
    rng: np.random.Generator, cfg: SynthConfig, label: int
) -> list[tuple[int, int]]:
    if cfg.task == "presence":
        return _disc_cells(rng, cfg) if label == 1 else []
    if label == 1:
        return _disc_cells(rng, cfg)
    return _scatter_cells(rng, cfg.grid_height, cfg.grid_width, cfg.tumor_patch_count)


def _directions(cfg: SynthConfig) -> tuple[NDArray[np.float64], Matrix]:
    rng = np.random.default_rng(derive_seed(cfg.seed, "directions"))
    u = rng.standard_normal(cfg.feature_dim)
    u /= np.linalg.norm(u)

    shifts = np.zeros((cfg.n_centers, cfg.feature_dim))
    for center in range(cfg.n_centers):
        s = rng.standard_normal(cfg.feature_dim)
        s -= (s @ u) * u
        s /= np.linalg.norm(s)
        shifts[center] = cfg.shift_magnitude * s
    return u, shifts


def make_slide(
    cfg: SynthConfig,
    center: int,
    index: int,
    label: int,
    tumor_direction: NDArray[np.float64],
    shift: NDArray[np.float64],
) -> tuple[SlideRecord, NDArray[np.bool_]]:
    """Build one slide; the stream depends only on (seed, center, index)."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "slide", center, index))
    height, width = cfg.grid_height, cfg.grid_width
    rows, cols = np.divmod(np.arange(height * width), width)
    coords = np.stack([rows, cols], axis=1)

    features = rng.standard_normal((height * width, cfg.feature_dim)) * cfg.noise_std
    features += shift
    mask = np.zeros((height, width), dtype=bool)
    for row, col in _tumor_cells(rng, cfg, label):
        mask[row, col] = True
    features[mask.ravel()] += cfg.signal_strength * tumor_direction

    record = SlideRecord(
        slide_id=f"c{center}_s{index:03d}",
        label=label,
        center_id=f"center{center}",
        coords=coords,
        # The on-disk payload is f32; keep memory and disk identical.
        features=features.astype(np.float32).astype(np.float64),
    )
    return record, mask


def generate(cfg: SynthConfig, out_dir: str | Path) -> SyntheticDataset:
    """Write slides and ``manifest.csv`` under ``out_dir``."""
    root = Path(out_dir)
    slides_dir = root / SLIDES_DIR
    slides_dir.mkdir(parents=True, exist_ok=True)

    tumor_direction, shifts = _directions(cfg)
    entries: list[ManifestEntry] = []
    masks: dict[str, NDArray[np.bool_]] = {}

    for center in range(cfg.n_centers):
        positives = center_positive_count(cfg, center)
        labels = np.array(
            [1] * positives + [0] * (cfg.slides_per_center - positives), dtype=np.int64
        )
        label_rng = np.random.default_rng(derive_seed(cfg.seed, "labels", center))
        labels = label_rng.permutation(labels)

        for index, label in enumerate(labels):
            record, mask = make_slide(
                cfg, center, index, int(label), tumor_direction, shifts[center]
            )
            relative = Path(SLIDES_DIR) / f"{record.slide_id}{SLIDE_SUFFIX}"
            save_slide(record, root / relative)
            masks[record.slide_id] = mask
            entries.append(
                ManifestEntry(
                    slide_id=record.slide_id,
                    path=relative.as_posix(),
                    label=record.label,
                    center_id=record.center_id,
                )
            )
        logger.info(
            "center%d: %d slides, %d positive", center, cfg.slides_per_center, positives
        )

    manifest = Manifest(entries=tuple(entries), root=root, feature_dim=cfg.feature_dim)
    write_manifest(manifest, root / MANIFEST_NAME)
    return SyntheticDataset(
        manifest=manifest,
        tumor_direction=tumor_direction,
        center_shifts=shifts,
        tumor_masks=masks,
    )
