from __future__ import annotations

from graph_mil._config import RunConfig
from graph_mil._config import SynthConfig
from graph_mil._config import TrainConfig
from graph_mil._config import load_run_config
from graph_mil._config import parse_run_config
from graph_mil._errors import GraphMilConfigError
from graph_mil._errors import GraphMilDataError
from graph_mil._errors import GraphMilError
from graph_mil._errors import GraphMilFormatError
from graph_mil._errors import GraphMilInvariantError
from graph_mil._graphs import WsiGraph
from graph_mil._graphs import build_graph
from graph_mil._metrics import MetricsReport
from graph_mil._model import GraphMilModel
from graph_mil._model import load_checkpoint
from graph_mil._model import save_checkpoint
from graph_mil._slide_io import Manifest
from graph_mil._slide_io import SlideRecord
from graph_mil._slide_io import read_manifest
from graph_mil._synth import generate
from graph_mil.pipeline import CrossValidationResult
from graph_mil.pipeline import cross_validate


__all__ = [
    "CrossValidationResult",
    "GraphMilConfigError",
    "GraphMilDataError",
    "GraphMilError",
    "GraphMilFormatError",
    "GraphMilInvariantError",
    "GraphMilModel",
    "Manifest",
    "MetricsReport",
    "RunConfig",
    "SlideRecord",
    "SynthConfig",
    "TrainConfig",
    "WsiGraph",
    "build_graph",
    "cross_validate",
    "generate",
    "load_checkpoint",
    "load_run_config",
    "parse_run_config",
    "read_manifest",
    "save_checkpoint",
]
