"""
Command-line entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 internal
invariant violation. Failures print one diagnostic line on standard error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from collections.abc import Sequence
from pathlib import Path
from typing import Any
from typing import NoReturn

from pydantic import ValidationError

from graph_mil._config import TrainConfig
from graph_mil._config import config_reference
from graph_mil._config import derive_seed
from graph_mil._config import load_run_config
from graph_mil._errors import GraphMilConfigError
from graph_mil._errors import GraphMilDataError
from graph_mil._errors import GraphMilError
from graph_mil._exports import export_heatmap
from graph_mil._exports import purity_report
from graph_mil._gnn import prepare_graph
from graph_mil._graphs import WsiGraph
from graph_mil._graphs import build_graph
from graph_mil._graphs import build_region_graph_global
from graph_mil._graphs import save_graph
from graph_mil._model import load_checkpoint
from graph_mil._slide_io import load_slide
from graph_mil._slide_io import read_manifest
from graph_mil._synth import generate
from graph_mil._training import extract_bag_embeddings
from graph_mil.pipeline import REGION_CENTROIDS
from graph_mil.pipeline import cross_validate
from graph_mil.pipeline import region_state_from


logger = logging.getLogger("graph_mil")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
GRAPH_SUFFIX = ".edges"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise GraphMilConfigError(f"{self.prog}: {message}")


def _with_overrides(config: TrainConfig, **overrides: Any) -> TrainConfig:
    values = config.model_dump()
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.model_validate(values)
    except ValidationError as e:
        raise GraphMilConfigError(f"Invalid command-line override: {e}") from e


def cmd_synth(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    dataset = generate(run.synth, args.out)
    logger.info("Wrote %d slides to %s", len(dataset.manifest), args.out)
    return 0


def cmd_build_graphs(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    config = _with_overrides(run.train, graph_kind=args.graph_kind)
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    graphs: dict[str, WsiGraph]
    if config.graph_kind == "region_global":
        graphs = build_region_graph_global(
            manifest,
            config.k_regions,
            config.region_chunk,
            derive_seed(config.seed, "regions"),
            config.region_connectivity,
        )
    else:
        graphs = {
            slide_id: build_graph(config, manifest.load(slide_id))
            for slide_id in manifest.slide_ids
        }
    for slide_id, graph in graphs.items():
        save_graph(graph, out / f"{slide_id}{GRAPH_SUFFIX}")
    logger.info("Wrote %d %s graphs to %s", len(graphs), config.graph_kind, out)
    return 0


def cmd_cv(args: argparse.Namespace) -> int:
    config = _with_overrides(
        load_run_config(args.config).train,
        fold_mode=args.fold_mode,
        workers=args.workers,
        allow_global_fit=True if args.allow_global_fit else None,
    )
    manifest = read_manifest(args.manifest)
    result = cross_validate(config, manifest, args.with_intervention, args.out)
    sys.stdout.write(result.format_table() + "\n")
    return 0


def _regions_from(extras: dict[str, Any], config: TrainConfig) -> Any:
    if config.graph_kind != "region_global":
        return None
    if REGION_CENTROIDS not in extras:
        raise GraphMilDataError("Checkpoint lacks the fitted region centroids.")
    return region_state_from(extras[REGION_CENTROIDS], config.seed)


def cmd_heatmap(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.model
    slide = load_slide(args.slide)
    regions = _regions_from(checkpoint.extras, model.config)
    graph = build_graph(model.config, slide, regions)
    export_heatmap(model, slide, graph, args.out)
    return 0


def cmd_purity(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.model
    config = model.config
    regions = _regions_from(checkpoint.extras, config)
    manifest = read_manifest(args.manifest)
    slides = manifest.load_all()
    inputs = [prepare_graph(build_graph(config, s, regions)) for s in slides]
    embeddings = extract_bag_embeddings(model, inputs)

    report = purity_report(
        embeddings,
        [s.label for s in slides],
        args.k,
        derive_seed(config.seed, "purity"),
    )
    report.table.to_csv(args.out, lineterminator="\n")
    sys.stdout.write(f"purity={report.purity:.6f}\n")
    return 0


def cmd_config_reference(args: argparse.Namespace) -> int:
    text = config_reference()
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graph-mil", description="Graph-based MIL on slide bags.")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Root logger level (default: WARNING).",
    )
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser
    )

    synth = commands.add_parser("synth", help="Generate a synthetic dataset.")
    synth.add_argument("--config", required=True)
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=cmd_synth)

    graphs = commands.add_parser("build-graphs", help="Build and dump slide graphs.")
    graphs.add_argument("--config", required=True)
    graphs.add_argument("--manifest", required=True)
    graphs.add_argument("--out", required=True)
    graphs.add_argument(
        "--graph-kind",
        choices=["none", "patch", "region_global", "region_local", "centroid"],
    )
    graphs.set_defaults(handler=cmd_build_graphs)

    cv = commands.add_parser("cv", help="Cross-validate a model configuration.")
    cv.add_argument("--config", required=True)
    cv.add_argument("--manifest", required=True)
    cv.add_argument("--out", required=True)
    cv.add_argument("--fold-mode", choices=["shuffled", "by-center"])
    cv.add_argument("--with-intervention", action="store_true")
    cv.add_argument("--allow-global-fit", action="store_true")
    cv.add_argument("--workers", type=int)
    cv.set_defaults(handler=cmd_cv)

    heatmap = commands.add_parser("heatmap", help="Export an attention heatmap.")
    heatmap.add_argument("--checkpoint", required=True)
    heatmap.add_argument("--slide", required=True)
    heatmap.add_argument("--out", required=True)
    heatmap.set_defaults(handler=cmd_heatmap)

    purity = commands.add_parser("purity", help="Cluster purity of bag embeddings.")
    purity.add_argument("--checkpoint", required=True)
    purity.add_argument("--manifest", required=True)
    purity.add_argument("--k", type=int, default=2)
    purity.add_argument("--out", required=True)
    purity.set_defaults(handler=cmd_purity)

    reference = commands.add_parser(
        "config-reference", help="Render the run-config key reference."
    )
    reference.add_argument("--out")
    reference.set_defaults(handler=cmd_config_reference)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT, force=True)
        return int(args.handler(args))
    except GraphMilError as e:
        sys.stderr.write(f"graph-mil: error: {e}\n")
        return e.exit_code
    except OSError as e:
        sys.stderr.write(f"graph-mil: error: {e}\n")
        return GraphMilDataError.exit_code
    except Exception as e:  # noqa: BLE001
        logger.debug("Unhandled error", exc_info=True)
        sys.stderr.write(f"graph-mil: internal error: {type(e).__name__}: {e}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
