"""
Configuration models and the flat ``key=value`` run-config format.

A run config is one text file covering both the synthetic dataset and the
training run. Each key belongs to exactly one model except ``seed``, which is
shared so that every random decision derives from a single number.
"""

from __future__ import annotations

import hashlib

from pathlib import Path
from typing import Literal
from typing import cast

import numpy as np

from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import ValidationError
from pydantic import model_validator

from graph_mil._errors import GraphMilConfigError


GraphKind = Literal["none", "patch", "region_global", "region_local", "centroid"]
GnnKind = Literal["none", "gcn", "gat"]
AggregatorKind = Literal["abmil", "dsmil", "readout"]
Readout = Literal["max", "mean", "none"]
FoldModeName = Literal["shuffled", "by-center"]
SynthTask = Literal["presence", "contiguity"]


def disc_offsets(radius: int) -> list[tuple[int, int]]:
    """Grid offsets within Euclidean ``radius`` of the origin, in raster order."""
    return [
        (dr, dc)
        for dr in range(-radius, radius + 1)
        for dc in range(-radius, radius + 1)
        if dr * dr + dc * dc <= radius * radius
    ]


class SynthConfig(BaseModel):
    """Synthetic multi-center dataset."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(description="Master seed; every slide derives its own stream.")
    n_centers: int = Field(default=3, ge=1, description="Number of medical centers.")
    slides_per_center: int = Field(default=20, ge=1, description="Slides per center.")
    grid_height: int = Field(default=12, ge=1, description="Patch grid height H.")
    grid_width: int = Field(default=12, ge=1, description="Patch grid width W.")
    feature_dim: int = Field(default=16, ge=2, description="Patch feature size F.")
    blob_radius: int = Field(default=2, ge=1, description="Tumor disc radius r.")
    shift_magnitude: float = Field(
        default=0.5, ge=0.0, description="Norm of each center's feature shift."
    )
    label_center_correlation: float = Field(
        default=0.0, ge=0.0, le=1.0, description="rho: label bias per center."
    )
    task: SynthTask = Field(default="contiguity", description="presence|contiguity.")
    noise_std: float = Field(default=0.25, gt=0.0, description="Patch noise std.")
    signal_strength: float = Field(
        default=1.0, gt=0.0, description="Magnitude of the tumor direction u."
    )
    patch_size: int = Field(default=256, ge=1, description="Patch size in pixels.")

    @property
    def tumor_patch_count(self) -> int:
        return len(disc_offsets(self.blob_radius))

    @model_validator(mode="after")
    def _disc_fits(self) -> SynthConfig:
        side = 2 * self.blob_radius + 1
        if side > self.grid_height or side > self.grid_width:
            raise ValueError(
                f"A disc of radius {self.blob_radius} does not fit a "
                f"{self.grid_height}x{self.grid_width} grid."
            )
        return self


class TrainConfig(BaseModel):
    """Model, graph, optimization, intervention and cross-validation settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(description="Master seed for folds, graphs and training.")

    graph_kind: GraphKind = Field(
        default="patch",
        description="none|patch|region_global|region_local|centroid.",
    )
    gnn_kind: GnnKind = Field(default="gat", description="none|gcn|gat.")
    aggregator: AggregatorKind = Field(
        default="abmil", description="abmil|dsmil|readout."
    )
    readout: Readout = Field(
        default="max", description="Graph readout for aggregator=readout."
    )
    layers: int = Field(default=3, ge=1, description="Number of GNN layers L.")
    hidden_dim: int = Field(default=256, ge=1, description="Hidden width D.")
    attention_dim: int = Field(default=128, ge=1, description="ABMIL d_att.")
    query_dim: int = Field(default=128, ge=1, description="DSMIL query width.")

    k_regions: int = Field(default=10, ge=1, description="Region-graph clusters.")
    region_chunk: int = Field(
        default=50, ge=1, description="Slides per mini-batch k-means partial fit."
    )
    centroid_k: int = Field(default=9, ge=1, description="Centroid-graph nodes.")
    patch_connectivity: int = Field(default=8, description="Patch adjacency, 4 or 8.")
    region_connectivity: int = Field(
        default=4, description="Connectivity used to form regions, 4 or 8."
    )
    allow_global_fit: bool = Field(
        default=False,
        description="Fit global region clusters on all slides, test included.",
    )

    epochs: int = Field(default=50, ge=1, description="Training epochs.")
    batch_size: int = Field(default=1, ge=1, le=1, description="Slides per forward.")
    accumulation: int = Field(
        default=8, ge=1, description="Slides per optimizer step."
    )
    lr_mil: float = Field(default=1e-4, gt=0.0, description="MIL learning rate.")
    lr_gnn: float = Field(default=1e-3, gt=0.0, description="GNN learning rate.")
    wd_mil: float = Field(default=1e-4, ge=0.0, description="MIL weight decay.")
    wd_gnn: float = Field(default=5e-4, ge=0.0, description="GNN weight decay.")
    threshold: float = Field(
        default=0.5, gt=0.0, lt=1.0, description="Decision threshold."
    )

    confounder_k: int = Field(default=8, ge=1, description="Confounder strata K.")
    pca_dim: int = Field(default=64, ge=1, description="PCA width before clustering.")
    projection_dim: int = Field(
        default=128, ge=1, description="Confounder attention width d_p."
    )
    uniform_priors: bool = Field(
        default=False, description="Use P(c_i) = 1/K instead of cluster proportions."
    )
    balance_strata: bool = Field(
        default=True,
        description="Weight the stage-3 loss equally over (stratum, label) cells.",
    )

    folds: int = Field(default=5, ge=1, description="Number of CV folds.")
    fold_mode: FoldModeName = Field(
        default="shuffled", description="shuffled|by-center."
    )
    workers: int = Field(default=1, ge=1, description="Folds trained in parallel.")

    @model_validator(mode="after")
    def _consistent_model(self) -> TrainConfig:
        for name in ("patch_connectivity", "region_connectivity"):
            if getattr(self, name) not in (4, 8):
                raise ValueError(f"{name} must be 4 or 8.")
        if self.graph_kind == "none" and self.gnn_kind != "none":
            raise ValueError("graph_kind=none requires gnn_kind=none.")
        if self.graph_kind != "none" and self.gnn_kind == "none":
            raise ValueError(f"graph_kind={self.graph_kind} requires a GNN kind.")
        if self.aggregator == "readout" and self.gnn_kind == "none":
            raise ValueError("aggregator=readout needs a GNN stack.")
        if self.aggregator == "readout" and self.readout == "none":
            raise ValueError("aggregator=readout needs readout=max or readout=mean.")
        return self

    @property
    def model_name(self) -> str:
        """Row label in reports, e.g. ``PatchGAT-ABMIL`` or ``ABMIL``."""
        aggregator = {"abmil": "ABMIL", "dsmil": "DSMIL", "readout": ""}[
            self.aggregator
        ]
        if self.graph_kind == "none":
            return aggregator
        graph = {
            "patch": "Patch",
            "region_global": "GlobalRegion",
            "region_local": "LocalRegion",
            "centroid": "Centroid",
        }[self.graph_kind]
        backbone = f"{graph}{self.gnn_kind.upper()}"
        return f"{backbone}-{aggregator}" if aggregator else backbone


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    train: TrainConfig
    synth: SynthConfig


def _parse_lines(text: str, source: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise GraphMilConfigError(
                f"{source}:{number}: expected key=value, got '{line}'."
            )
        if key in values:
            raise GraphMilConfigError(f"{source}:{number}: duplicate key '{key}'.")
        values[key] = value.strip()
    return values


def _validate(model: type[BaseModel], values: dict[str, str], source: str) -> BaseModel:
    try:
        return model.model_validate(values)
    except ValidationError as e:
        problems = []
        for error in e.errors():
            key = ".".join(str(part) for part in error["loc"]) or model.__name__
            if error["type"] == "missing":
                problems.append(f"missing required key '{key}'")
            else:
                problems.append(f"'{key}': {error['msg']}")
        raise GraphMilConfigError(f"{source}: {'; '.join(problems)}.") from e


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """
    Parse flat ``key=value`` text into a :class:`RunConfig`.

    Keys are routed to ``TrainConfig`` or ``SynthConfig``; keys left out take
    their defaults.
    """
    values = _parse_lines(text, source)
    train_keys = set(TrainConfig.model_fields)
    synth_keys = set(SynthConfig.model_fields)
    unknown = sorted(set(values) - train_keys - synth_keys)
    if unknown:
        raise GraphMilConfigError(f"{source}: unknown key(s) {', '.join(unknown)}.")

    train_values = {k: v for k, v in values.items() if k in train_keys}
    synth_values = {k: v for k, v in values.items() if k in synth_keys}

    train = cast(TrainConfig, _validate(TrainConfig, train_values, source))
    synth = cast(SynthConfig, _validate(SynthConfig, synth_values, source))
    return RunConfig(train=train, synth=synth)


def load_run_config(path: str | Path) -> RunConfig:
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as e:
        raise GraphMilConfigError(f"Cannot read config {source}: {e}") from e
    return parse_run_config(text, source=str(source))


def config_reference() -> str:
    """Render the run-config key reference as Markdown."""
    lines = ["# Run configuration keys", ""]
    for title, model in (("Training", TrainConfig), ("Synthetic data", SynthConfig)):
        lines += [f"## {title}", "", "| key | default | description |", "|---|---|---|"]
        for name, info in model.model_fields.items():
            default = "required" if info.is_required() else repr(info.default)
            lines.append(f"| `{name}` | {default} | {info.description or ''} |")
        lines.append("")
    return "\n".join(lines)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Derive an independent 32-bit seed from ``seed`` and a path of keys."""
    entropy = [seed & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            digest = hashlib.sha256(key.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:4], "little"))
        else:
            entropy.append(key & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
