from __future__ import annotations

from typing import Literal

import numpy as np

from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import model_validator
from sklearn.model_selection import StratifiedKFold

from graph_mil._errors import GraphMilDataError
from graph_mil._slide_io import Manifest


FoldMode = Literal["shuffled", "by-center"]


class Fold(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    test_center: str | None = None

    @model_validator(mode="after")
    def _disjoint(self) -> Fold:
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError(f"Fold {self.index}: train and test sets overlap.")
        return self


class FoldPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: FoldMode
    folds: tuple[Fold, ...]

    @property
    def k(self) -> int:
        return len(self.folds)


def build_folds(
    manifest: Manifest, mode: FoldMode, k: int = 5, seed: int = 0
) -> FoldPlan:
    """
    Split a manifest into ``k`` train/test folds.

    ``shuffled`` draws a seed-deterministic, label-stratified partition.
    ``by-center`` holds out one center per fold, centers in sorted order.
    Slide ids keep manifest order inside every train and test list.
    """
    ids = manifest.slide_ids
    if mode == "by-center":
        centers = sorted(set(manifest.centers.values()))
        if len(centers) != k:
            raise GraphMilDataError(
                f"by-center folds need exactly {k} centers, manifest has "
                f"{len(centers)} ({', '.join(centers)})."
            )
        folds = []
        for index, center in enumerate(centers):
            test = tuple(i for i in ids if manifest.centers[i] == center)
            train = tuple(i for i in ids if manifest.centers[i] != center)
            folds.append(
                Fold(index=index, train_ids=train, test_ids=test, test_center=center)
            )
        return FoldPlan(mode=mode, folds=tuple(folds))

    if mode != "shuffled":
        raise GraphMilDataError(f"Unknown fold mode '{mode}'.")
    if k < 2 or len(ids) < k:
        raise GraphMilDataError(
            f"shuffled folds need k >= 2 and at least k slides "
            f"(k={k}, slides={len(ids)})."
        )

    labels = np.array([manifest.labels[i] for i in ids])
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    try:
        splits = list(splitter.split(np.zeros(len(ids)), labels))
    except ValueError as e:
        raise GraphMilDataError(f"Cannot stratify {len(ids)} slides: {e}") from e

    folds = []
    for index, (train_idx, test_idx) in enumerate(splits):
        folds.append(
            Fold(
                index=index,
                train_ids=tuple(ids[i] for i in sorted(train_idx)),
                test_ids=tuple(ids[i] for i in sorted(test_idx)),
            )
        )
    return FoldPlan(mode=mode, folds=tuple(folds))
