from __future__ import annotations

from pathlib import Path

import pytest

from graph_mil._config import SynthConfig
from graph_mil._config import TrainConfig
from graph_mil._config import config_reference
from graph_mil._config import derive_seed
from graph_mil._config import disc_offsets
from graph_mil._config import load_run_config
from graph_mil._config import parse_run_config
from graph_mil._errors import GraphMilConfigError


EXAMPLE = """
# synthetic data
seed = 7
n_centers = 3
slides_per_center = 10
task = contiguity
label_center_correlation = 0.5

# model
graph_kind = patch
gnn_kind = gcn
aggregator = dsmil
hidden_dim = 32
lr_mil = 1e-3
allow_global_fit = false
"""


def test_parse_routes_keys_to_both_models():
    run = parse_run_config(EXAMPLE)
    assert run.train.seed == run.synth.seed == 7
    assert run.train.gnn_kind == "gcn"
    assert run.train.hidden_dim == 32
    assert run.train.lr_mil == pytest.approx(1e-3)
    assert run.train.allow_global_fit is False
    assert run.synth.n_centers == 3
    assert run.synth.label_center_correlation == 0.5
    assert run.train.epochs == 50


def test_defaults():
    cfg = TrainConfig(seed=0)
    assert (cfg.lr_mil, cfg.lr_gnn, cfg.wd_mil, cfg.wd_gnn) == (1e-4, 1e-3, 1e-4, 5e-4)
    assert (cfg.accumulation, cfg.hidden_dim, cfg.layers) == (8, 256, 3)
    assert cfg.confounder_k == 8
    assert cfg.centroid_k == 9


config_failures = [
    ("missing_seed", "graph_kind = patch\n", "missing required key 'seed'"),
    ("unknown_key", "seed = 1\nlearning_rate = 3\n", "unknown key(s) learning_rate"),
    ("duplicate_key", "seed = 1\nseed = 2\n", "duplicate key 'seed'"),
    ("no_equals", "seed = 1\njust words\n", "expected key=value"),
    ("bad_type", "seed = 1\nhidden_dim = many\n", "'hidden_dim'"),
    ("bad_choice", "seed = 1\ngnn_kind = sage\n", "'gnn_kind'"),
    (
        "out_of_range",
        "seed = 1\nlabel_center_correlation = 1.5\n",
        "'label_center_correlation'",
    ),
    ("inconsistent", "seed = 1\ngraph_kind = none\ngnn_kind = gat\n", "gnn_kind=none"),
    ("bad_connectivity", "seed = 1\npatch_connectivity = 6\n", "4 or 8"),
    ("disc_too_big", "seed = 1\ngrid_height = 3\nblob_radius = 2\n", "does not fit"),
]


@pytest.mark.parametrize(
    "text, fragment",
    [case[1:] for case in config_failures],
    ids=[case[0] for case in config_failures],
)
def test_invalid_configs(text, fragment):
    with pytest.raises(GraphMilConfigError) as info:
        parse_run_config(text)
    assert fragment in str(info.value)


def test_load_missing_file(tmp_path):
    with pytest.raises(GraphMilConfigError):
        load_run_config(tmp_path / "absent.cfg")


def test_load_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(EXAMPLE)
    assert load_run_config(path).train.aggregator == "dsmil"


model_names = [
    ("ABMIL", dict(graph_kind="none", gnn_kind="none", aggregator="abmil")),
    ("DSMIL", dict(graph_kind="none", gnn_kind="none", aggregator="dsmil")),
    ("PatchGAT-ABMIL", dict(graph_kind="patch", gnn_kind="gat")),
    ("PatchGCN-DSMIL", dict(graph_kind="patch", gnn_kind="gcn", aggregator="dsmil")),
    ("GlobalRegionGAT", dict(graph_kind="region_global", aggregator="readout")),
    ("LocalRegionGCN-ABMIL", dict(graph_kind="region_local", gnn_kind="gcn")),
    ("CentroidGAT", dict(graph_kind="centroid", aggregator="readout")),
]


@pytest.mark.parametrize(
    "expected, overrides",
    model_names,
    ids=[case[0] for case in model_names],
)
def test_model_name(expected, overrides):
    assert TrainConfig(seed=0, **overrides).model_name == expected


def test_readout_aggregator_needs_a_pooling():
    with pytest.raises(ValueError):
        TrainConfig(seed=0, aggregator="readout", readout="none")


def test_disc_offsets():
    assert disc_offsets(1) == [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]
    assert len(disc_offsets(2)) == 13
    assert SynthConfig(seed=0, blob_radius=2).tumor_patch_count == 13


class TestDeriveSeed:

    def test_deterministic(self):
        assert derive_seed(3, "fold", 1) == derive_seed(3, "fold", 1)

    def test_keys_separate_streams(self):
        seeds = {
            derive_seed(3),
            derive_seed(4),
            derive_seed(3, "fold", 0),
            derive_seed(3, "fold", 1),
            derive_seed(3, "graph", "slide_a"),
            derive_seed(3, "graph", "slide_b"),
        }
        assert len(seeds) == 6

    def test_fits_32_bits(self):
        assert 0 <= derive_seed(-1, "x") < 2**32


def test_config_reference_lists_every_key():
    text = config_reference()
    for name in list(TrainConfig.model_fields) + list(SynthConfig.model_fields):
        assert f"`{name}`" in text
    assert "| `seed` | required |" in text


def test_checked_in_reference_is_current():
    docs = Path(__file__).resolve().parent.parent / "docs" / "CONFIG.md"
    assert docs.read_text(encoding="utf-8") == config_reference()
