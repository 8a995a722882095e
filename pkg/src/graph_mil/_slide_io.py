"""
Slide records, the GMIL binary slide format and the CSV dataset manifest.

GMIL layout, little-endian::

    magic    4 bytes  b"GMIL"
    version  u16      1
    label    u8
    center   u16 length + UTF-8 bytes
    N_p      u32
    F        u32
    coords   N_p x 2 i32 (grid units, row then column)
    features N_p x F f32, row-major

The slide id is the file stem.
"""

from __future__ import annotations

import logging
import struct

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from numpy.typing import ArrayLike
from numpy.typing import NDArray
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import field_validator
from pydantic import model_validator

from graph_mil._autodiff import Matrix
from graph_mil._binary import MAGIC_VERSION
from graph_mil._binary import U16
from graph_mil._binary import ByteReader
from graph_mil._binary import pack_header
from graph_mil._binary import pack_text
from graph_mil._errors import GraphMilDataError
from graph_mil._errors import GraphMilShapeError


logger = logging.getLogger(__name__)

SLIDE_MAGIC = b"GMIL"
SLIDE_VERSION = 1
SLIDE_SUFFIX = ".gmil"
DEFAULT_PATCH_SIZE = 256
MANIFEST_COLUMNS = ["slide_id", "path", "label", "center_id"]

_SIZES = struct.Struct("<II")


@dataclass(frozen=True, eq=False)
class SlideRecord:
    """
    One bag: patch features with their grid coordinates, a slide label and the
    medical center the slide came from.
    """

    slide_id: str
    label: int
    center_id: str
    coords: NDArray[np.int64]
    features: Matrix

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.int64)
        features = np.asarray(self.features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise GraphMilShapeError(f"coords must be N x 2, got {coords.shape}.")
        if features.ndim != 2:
            raise GraphMilShapeError(f"features must be 2-D, got {features.shape}.")
        if coords.shape[0] < 1:
            raise GraphMilDataError(f"Slide '{self.slide_id}' has no patches.")
        if coords.shape[0] != features.shape[0]:
            raise GraphMilShapeError(
                f"Slide '{self.slide_id}': {coords.shape[0]} coords but "
                f"{features.shape[0]} feature rows."
            )
        if (coords < 0).any():
            raise GraphMilDataError(
                f"Slide '{self.slide_id}' has negative grid coords; "
                "the grid starts at (0, 0)."
            )
        if np.unique(coords, axis=0).shape[0] != coords.shape[0]:
            raise GraphMilDataError(f"Slide '{self.slide_id}' has duplicate coords.")
        if self.label not in (0, 1):
            raise GraphMilDataError(
                f"Slide '{self.slide_id}' label must be 0 or 1, got {self.label}."
            )
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)

    @property
    def n_patches(self) -> int:
        return int(self.coords.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Extent of the grid anchored at (0, 0) that holds every patch."""
        extent = self.coords.max(axis=0) + 1
        return int(extent[0]), int(extent[1])


def pixel_to_grid(
    coords_px: ArrayLike, patch_size: int = DEFAULT_PATCH_SIZE
) -> NDArray[np.int64]:
    """Convert top-left pixel coordinates of patches into grid units."""
    return np.floor_divide(np.asarray(coords_px, dtype=np.int64), patch_size)


def encode_slide(record: SlideRecord) -> bytes:
    header = pack_header(SLIDE_MAGIC, SLIDE_VERSION) + bytes([record.label])
    sizes = _SIZES.pack(record.n_patches, record.feature_dim)
    coords = record.coords.astype("<i4").tobytes()
    features = record.features.astype("<f4").tobytes()
    return header + pack_text(record.center_id) + sizes + coords + features


def save_slide(record: SlideRecord, path: str | Path) -> Path:
    target = Path(path)
    target.write_bytes(encode_slide(record))
    return target


def decode_slide(buffer: bytes, slide_id: str) -> SlideRecord:
    reader = ByteReader(buffer, source=f"slide '{slide_id}'")
    reader.header(SLIDE_MAGIC, SLIDE_VERSION)
    label = reader.take(1, "label")[0]
    center_id = reader.text("center id")
    n_patches, feature_dim = reader.unpack(_SIZES, "sizes")
    coords = reader.array((n_patches, 2), "<i4", "coords")
    features = reader.array((n_patches, feature_dim), "<f4", "features")
    reader.finish()
    return SlideRecord(
        slide_id=slide_id,
        label=int(label),
        center_id=center_id,
        coords=coords.astype(np.int64),
        features=features,
    )


def load_slide(path: str | Path) -> SlideRecord:
    source = Path(path)
    return decode_slide(source.read_bytes(), slide_id=source.stem)


def read_slide_feature_dim(path: str | Path) -> int:
    """Read F from a slide header without decoding the payload."""
    with Path(path).open("rb") as handle:
        head = handle.read(MAGIC_VERSION.size + 1 + U16.size)
        reader = ByteReader(head, source=str(path))
        reader.header(SLIDE_MAGIC, SLIDE_VERSION)
        reader.take(1, "label")
        center_len = reader.u16("center id length")
        handle.read(center_len)
        sizes = ByteReader(handle.read(_SIZES.size), source=str(path))
        return int(sizes.unpack(_SIZES, "sizes")[1])


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    slide_id: str = Field(min_length=1)
    path: str
    label: int = Field(ge=0, le=1)
    center_id: str


class Manifest(BaseModel):
    """
    The dataset: one entry per slide. Relative paths resolve against ``root``,
    the directory holding the manifest CSV.
    """

    model_config = ConfigDict(frozen=True)

    entries: tuple[ManifestEntry, ...]
    root: Path = Path(".")
    feature_dim: int | None = None

    @field_validator("entries")
    @classmethod
    def _unique_ids(
        cls, entries: tuple[ManifestEntry, ...]
    ) -> tuple[ManifestEntry, ...]:
        seen: set[str] = set()
        for entry in entries:
            if entry.slide_id in seen:
                raise ValueError(f"Duplicate slide_id '{entry.slide_id}'.")
            seen.add(entry.slide_id)
        return entries

    @model_validator(mode="after")
    def _positive_feature_dim(self) -> Manifest:
        if self.feature_dim is not None and self.feature_dim < 1:
            raise ValueError("feature_dim must be positive.")
        return self

    @property
    def slide_ids(self) -> list[str]:
        return [entry.slide_id for entry in self.entries]

    @property
    def labels(self) -> dict[str, int]:
        return {entry.slide_id: entry.label for entry in self.entries}

    @property
    def centers(self) -> dict[str, str]:
        return {entry.slide_id: entry.center_id for entry in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, slide_id: str) -> ManifestEntry:
        for entry in self.entries:
            if entry.slide_id == slide_id:
                return entry
        raise GraphMilDataError(f"Slide '{slide_id}' is not in the manifest.")

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        return path if path.is_absolute() else self.root / path

    def load(self, slide_id: str) -> SlideRecord:
        """Load a slide; label and center come from the manifest row."""
        entry = self.entry(slide_id)
        record = load_slide(self.resolve(entry))
        return SlideRecord(
            slide_id=entry.slide_id,
            label=entry.label,
            center_id=entry.center_id,
            coords=record.coords,
            features=record.features,
        )

    def load_all(self, slide_ids: list[str] | None = None) -> list[SlideRecord]:
        ids = self.slide_ids if slide_ids is None else slide_ids
        return [self.load(slide_id) for slide_id in ids]


def read_manifest(path: str | Path) -> Manifest:
    """Parse a ``slide_id,path,label,center_id`` CSV and check every file exists."""
    source = Path(path)
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise GraphMilDataError(f"Cannot read manifest {source}: {e}") from e

    if list(frame.columns) != MANIFEST_COLUMNS:
        raise GraphMilDataError(
            f"Manifest header must be {','.join(MANIFEST_COLUMNS)}, "
            f"got {','.join(frame.columns)}."
        )

    try:
        entries = tuple(
            ManifestEntry(
                slide_id=row.slide_id,
                path=row.path,
                label=int(row.label),
                center_id=row.center_id,
            )
            for row in frame.itertuples(index=False)
        )
        manifest = Manifest(entries=entries, root=source.parent)
    except ValueError as e:
        raise GraphMilDataError(f"Invalid manifest {source}: {e}") from e

    missing = [e.slide_id for e in manifest.entries if not manifest.resolve(e).exists()]
    if missing:
        raise GraphMilDataError(
            f"Manifest {source} references missing files for slides: "
            f"{', '.join(missing)}."
        )
    if not manifest.entries:
        return manifest

    feature_dim = read_slide_feature_dim(manifest.resolve(manifest.entries[0]))
    logger.debug("Loaded manifest %s with %d slides", source, len(entries))
    return manifest.model_copy(update={"feature_dim": feature_dim})


def write_manifest(manifest: Manifest, path: str | Path) -> Path:
    target = Path(path)
    frame = pd.DataFrame(
        [entry.model_dump() for entry in manifest.entries], columns=MANIFEST_COLUMNS
    )
    frame.to_csv(target, index=False, lineterminator="\n")
    return target
