"""
Cross-validation orchestration.

For every fold: build the graphs, train stage 2, evaluate on the held-out
slides and, when interventional training is on, build the confounder dictionary
from the training embeddings, train stage 3 and evaluate again. Nothing fitted
inside a fold ever sees that fold's test slides unless ``allow_global_fit`` asks
for dataset-wide region clusters.
"""

from __future__ import annotations

import logging

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import pandas as pd

from graph_mil._autodiff import Matrix
from graph_mil._clustering import MiniBatchKMeansState
from graph_mil._config import TrainConfig
from graph_mil._config import derive_seed
from graph_mil._errors import GraphMilDataError
from graph_mil._errors import GraphMilInvariantError
from graph_mil._exports import export_embeddings
from graph_mil._folds import Fold
from graph_mil._folds import FoldPlan
from graph_mil._folds import build_folds
from graph_mil._gnn import GraphInputs
from graph_mil._gnn import prepare_graph
from graph_mil._graphs import build_graph
from graph_mil._graphs import fit_region_clusters
from graph_mil._intervention import DICTIONARY_SUFFIX
from graph_mil._intervention import InterventionHead
from graph_mil._intervention import build_confounder_dictionary
from graph_mil._intervention import predict_intervened
from graph_mil._intervention import save_dictionary
from graph_mil._intervention import train_stage3
from graph_mil._metrics import METRIC_NAMES
from graph_mil._metrics import MetricsReport
from graph_mil._metrics import difference
from graph_mil._metrics import evaluate_scores
from graph_mil._metrics import summarize
from graph_mil._model import CHECKPOINT_SUFFIX
from graph_mil._model import GraphMilModel
from graph_mil._model import save_checkpoint
from graph_mil._slide_io import Manifest
from graph_mil._slide_io import SlideRecord
from graph_mil._training import TrainingHistory
from graph_mil._training import evaluate
from graph_mil._training import extract_bag_embeddings
from graph_mil._training import train_stage2


logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["config", "fold", *METRIC_NAMES]
METRICS_FILE = "metrics.csv"
REGION_CENTROIDS = "regions.centroids"
INTERVENTION_SUFFIX = "+IT"


@dataclass
class FoldResult:
    index: int
    test_center: str | None
    baseline: MetricsReport
    stage2: TrainingHistory
    train_ids: tuple[str, ...]
    train_embeddings: Matrix
    intervened: MetricsReport | None = None
    stage3: TrainingHistory | None = None

    @property
    def delta(self) -> dict[str, float | None] | None:
        if self.intervened is None:
            return None
        return difference(self.intervened, self.baseline)


@dataclass
class CrossValidationResult:
    config_name: str
    plan: FoldPlan
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def with_intervention(self) -> bool:
        return any(f.intervened is not None for f in self.folds)

    def baseline_reports(self) -> list[MetricsReport]:
        return [f.baseline for f in self.folds]

    def intervened_reports(self) -> list[MetricsReport]:
        return [f.intervened for f in self.folds if f.intervened is not None]

    def metrics_frame(self) -> pd.DataFrame:
        """The metrics table with every number rendered as fixed 6-decimal text."""
        rows = _report_rows(self.config_name, self.baseline_reports())
        if self.with_intervention:
            rows += _report_rows(
                self.config_name + INTERVENTION_SUFFIX, self.intervened_reports()
            )
            rows += delta_rows(self.baseline_reports(), self.intervened_reports())
        return pd.DataFrame(rows, columns=METRICS_COLUMNS)

    def write_metrics(self, path: str | Path) -> Path:
        target = Path(path)
        self.metrics_frame().to_csv(target, index=False, lineterminator="\n")
        return target

    def format_table(self) -> str:
        """Mean +/- std per configuration, one line each."""
        lines = []
        groups = [(self.config_name, self.baseline_reports())]
        if self.with_intervention:
            groups.append(
                (self.config_name + INTERVENTION_SUFFIX, self.intervened_reports())
            )
        width = max(len(name) for name, _ in groups + [("delta", [])])
        lines.append(
            "  ".join([f"{'config':<{width}}", *(f"{m:>17}" for m in METRIC_NAMES)])
        )
        for name, reports in groups:
            means, stds = summarize(reports)
            cells = [_pm(means[m], stds[m]) for m in METRIC_NAMES]
            lines.append("  ".join([f"{name:<{width}}", *cells]))
        if self.with_intervention:
            deltas = [f.delta for f in self.folds if f.delta is not None]
            cells = []
            for m in METRIC_NAMES:
                values = [d[m] for d in deltas if d[m] is not None]
                if values:
                    cells.append(_pm(float(np.mean(values)), float(np.std(values))))
                else:
                    cells.append(_pm(None, None))
            lines.append("  ".join([f"{'delta':<{width}}", *cells]))
        return "\n".join(lines)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _pm(mean: float | None, std: float | None) -> str:
    if mean is None or std is None:
        return f"{'n/a':>17}"
    return f"{mean:>8.4f} +/- {std:.4f}"


def _metric_row(config: str, fold: str, values: dict[str, float | None]) -> list[str]:
    return [config, fold, *(_fmt(values[m]) for m in METRIC_NAMES)]


def _report_rows(config: str, reports: list[MetricsReport]) -> list[list[str]]:
    rows = [
        _metric_row(config, str(index), report.values())
        for index, report in enumerate(reports)
    ]
    means, stds = summarize(reports)
    rows.append(_metric_row(config, "mean", means))
    rows.append(_metric_row(config, "std", stds))
    return rows


def delta_rows(
    before: list[MetricsReport], after: list[MetricsReport]
) -> list[list[str]]:
    """Per-fold ``after - before`` rows plus their mean and std."""
    if len(before) != len(after):
        raise GraphMilInvariantError("Delta table needs one report pair per fold.")
    deltas = [difference(a, b) for a, b in zip(after, before)]
    rows = [_metric_row("delta", str(i), d) for i, d in enumerate(deltas)]
    means: dict[str, float | None] = {}
    stds: dict[str, float | None] = {}
    for m in METRIC_NAMES:
        values = [d[m] for d in deltas if d[m] is not None]
        means[m] = float(np.mean(values)) if values else None
        stds[m] = float(np.std(values)) if values else None
    rows.append(_metric_row("delta", "mean", means))
    rows.append(_metric_row("delta", "std", stds))
    return rows


def region_state_from(centroids: Matrix, seed: int = 0) -> MiniBatchKMeansState:
    """Rebuild a fitted region-cluster state from stored centroids."""
    data = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    return MiniBatchKMeansState(
        k=data.shape[0],
        seed=seed,
        centroids=data.copy(),
        counts=np.zeros(data.shape[0], dtype=np.int64),
    )


def _graph_inputs(
    config: TrainConfig,
    slides: list[SlideRecord],
    regions: MiniBatchKMeansState | None,
) -> list[GraphInputs]:
    return [prepare_graph(build_graph(config, slide, regions)) for slide in slides]


def run_fold(
    config: TrainConfig,
    manifest: Manifest,
    fold: Fold,
    with_intervention: bool = False,
    out_dir: Path | None = None,
) -> FoldResult:
    fold_seed = derive_seed(config.seed, "fold", fold.index)
    train = manifest.load_all(list(fold.train_ids))
    test = manifest.load_all(list(fold.test_ids))
    train_labels = [s.label for s in train]
    test_labels = [s.label for s in test]
    if not train or not test:
        raise GraphMilDataError(f"Fold {fold.index} has an empty train or test set.")

    regions = None
    extras: dict[str, Matrix] = {}
    if config.graph_kind == "region_global":
        fit_slides = train + test if config.allow_global_fit else train
        regions = fit_region_clusters(
            fit_slides,
            config.k_regions,
            config.region_chunk,
            derive_seed(fold_seed, "regions"),
        )
        assert regions.centroids is not None
        extras[REGION_CENTROIDS] = regions.centroids.copy()

    train_inputs = _graph_inputs(config, train, regions)
    test_inputs = _graph_inputs(config, test, regions)

    model = GraphMilModel.initialize(config, train[0].feature_dim, fold_seed)
    stage2 = train_stage2(
        model, train_inputs, train_labels, derive_seed(fold_seed, "stage2")
    )
    baseline = evaluate(model, test_inputs, test_labels)
    train_embeddings = extract_bag_embeddings(model, train_inputs)
    result = FoldResult(
        index=fold.index,
        test_center=fold.test_center,
        baseline=baseline,
        stage2=stage2,
        train_ids=fold.train_ids,
        train_embeddings=train_embeddings,
    )

    dictionary = None
    if with_intervention:
        fingerprint = model.fingerprint()
        dictionary = build_confounder_dictionary(
            train_embeddings,
            config.confounder_k,
            config.pca_dim,
            fold_seed,
            fingerprint,
            config.uniform_priors,
        )
        head = InterventionHead.initialize(
            model.embedding_dim,
            config.projection_dim,
            np.random.default_rng(derive_seed(fold_seed, "intervention")),
        )
        result.stage3 = train_stage3(
            train_embeddings,
            train_labels,
            dictionary,
            head,
            config,
            fingerprint,
            derive_seed(fold_seed, "stage3"),
        )
        if model.fingerprint() != fingerprint:
            raise GraphMilInvariantError("Stage 3 modified the frozen backbone.")
        test_embeddings = extract_bag_embeddings(model, test_inputs)
        result.intervened = evaluate_scores(
            predict_intervened(test_embeddings, dictionary, head),
            test_labels,
            config.threshold,
        )
        extras.update(head.state())

    if out_dir is not None:
        save_checkpoint(model, out_dir / f"fold{fold.index}{CHECKPOINT_SUFFIX}", extras)
        if dictionary is not None:
            dictionary_path = out_dir / f"fold{fold.index}{DICTIONARY_SUFFIX}"
            save_dictionary(dictionary, dictionary_path)
        export_embeddings(
            train_embeddings,
            [s.slide_id for s in train],
            train_labels,
            [s.center_id for s in train],
            out_dir / f"fold{fold.index}_embeddings.csv",
        )

    logger.info(
        "fold %d: BA %.3f%s",
        fold.index,
        baseline.ba,
        "" if result.intervened is None else f", with IT {result.intervened.ba:.3f}",
    )
    return result


def cross_validate(
    config: TrainConfig,
    manifest: Manifest,
    with_intervention: bool = False,
    out_dir: str | Path | None = None,
) -> CrossValidationResult:
    """
    Run every fold of ``config.fold_mode`` and collect the reports. With
    ``out_dir`` set, writes ``metrics.csv``, one checkpoint, one embeddings CSV
    and (with intervention) one confounder dictionary per fold.
    """
    plan = build_folds(manifest, config.fold_mode, config.folds, config.seed)
    target = None if out_dir is None else Path(out_dir)
    if target is not None:
        target.mkdir(parents=True, exist_ok=True)

    logger.info(
        "%s: %d %s folds over %d slides",
        config.model_name,
        plan.k,
        plan.mode,
        len(manifest),
    )
    if config.workers > 1 and plan.k > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, plan.k)) as pool:
            futures = [
                pool.submit(run_fold, config, manifest, fold, with_intervention, target)
                for fold in plan.folds
            ]
            folds = [future.result() for future in futures]
    else:
        folds = [
            run_fold(config, manifest, fold, with_intervention, target)
            for fold in plan.folds
        ]

    result = CrossValidationResult(
        config_name=config.model_name, plan=plan, folds=folds
    )
    if target is not None:
        result.write_metrics(target / METRICS_FILE)
    return result
