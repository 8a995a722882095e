from __future__ import annotations

import numpy as np
import pytest

from graph_mil._config import SynthConfig
from graph_mil._config import TrainConfig
from graph_mil._errors import FormatErrorCode
from graph_mil._errors import GraphMilFormatError
from graph_mil._errors import GraphMilGraphError
from graph_mil._errors import GraphMilShapeError
from graph_mil._graphs import WsiGraph
from graph_mil._graphs import build_centroid_graph
from graph_mil._graphs import build_graph
from graph_mil._graphs import build_patch_graph
from graph_mil._graphs import build_region_graph_global
from graph_mil._graphs import build_region_graph_local
from graph_mil._graphs import cosine_distance
from graph_mil._graphs import fit_region_clusters
from graph_mil._graphs import load_graph
from graph_mil._graphs import region_graph_from_labels
from graph_mil._graphs import save_graph
from graph_mil._slide_io import SlideRecord
from graph_mil._synth import generate


def grid_slide(height: int, width: int, features=None, slide_id: str = "s") -> SlideRecord:
    rows, cols = np.divmod(np.arange(height * width), width)
    coords = np.stack([rows, cols], axis=1)
    if features is None:
        features = np.random.default_rng(0).standard_normal((height * width, 4))
    return SlideRecord(
        slide_id=slide_id, label=0, center_id="c", coords=coords, features=features
    )


def assert_partition(graph: WsiGraph, n_patches: int) -> None:
    members = sorted(p for group in graph.node_to_patches for p in group)
    assert members == list(range(n_patches))


class TestPatchGraph:

    @pytest.mark.parametrize(
        "connectivity, expected",
        [(8, [[0, 1], [0, 2], [1, 2]]), (4, [[0, 1], [0, 2]])],
        ids=["8-connected", "4-connected"],
    )
    def test_three_patches(self, connectivity, expected):
        slide = SlideRecord(
            slide_id="s",
            label=1,
            center_id="c",
            coords=[[0, 0], [0, 1], [1, 0]],
            features=np.eye(3),
        )
        graph = build_patch_graph(slide, connectivity)
        np.testing.assert_array_equal(graph.edges, expected)
        assert graph.n_nodes == 3

    def test_full_grid_edge_count(self):
        graph = build_patch_graph(grid_slide(3, 3), 8)
        # 12 orthogonal + 8 diagonal pairs on a 3x3 grid.
        assert graph.edges.shape == (20, 2)
        assert graph.neighbors(4) == [0, 1, 2, 3, 5, 6, 7, 8]
        assert graph.neighbors(0) == [1, 3, 4]

    def test_sparse_coords_have_no_spurious_edges(self):
        slide = SlideRecord(
            slide_id="s",
            label=0,
            center_id="c",
            coords=[[0, 0], [5, 5]],
            features=np.ones((2, 2)),
        )
        assert build_patch_graph(slide).edges.shape == (0, 2)


class TestRegionGraph:

    def test_checkerboard_labels_give_four_regions_all_touching(self):
        graph = region_graph_from_labels(grid_slide(2, 2), np.array([0, 1, 1, 0]))
        assert graph.n_nodes == 4
        assert graph.edges.shape == (6, 2)
        assert_partition(graph, 4)

    def test_region_features_are_member_means(self):
        features = np.arange(8, dtype=np.float64).reshape(4, 2)
        slide = grid_slide(2, 2, features)
        graph = region_graph_from_labels(slide, np.array([0, 0, 1, 1]))
        assert graph.node_to_patches == ((0, 1), (2, 3))
        np.testing.assert_allclose(graph.node_features, [[1.0, 2.0], [5.0, 6.0]])
        np.testing.assert_array_equal(graph.edges, [[0, 1]])

    def test_local_clustering_of_two_halves(self):
        features = np.zeros((16, 3))
        features[:, 0] = 1.0
        features[np.arange(16) % 4 >= 2] = [0.0, 1.0, 0.0]
        graph = build_region_graph_local(grid_slide(4, 4, features), k_regions=2, seed=0)
        assert graph.n_nodes == 2
        np.testing.assert_array_equal(graph.edges, [[0, 1]])
        assert_partition(graph, 16)

    def test_label_count_must_match_patches(self):
        with pytest.raises(GraphMilShapeError):
            region_graph_from_labels(grid_slide(2, 2), np.array([0, 1]))

    def test_global_clusters_are_shared_across_slides(self, tmp_path):
        cfg = SynthConfig(
            seed=1,
            n_centers=2,
            slides_per_center=3,
            grid_height=6,
            grid_width=6,
            feature_dim=4,
            blob_radius=1,
        )
        manifest = generate(cfg, tmp_path).manifest
        graphs = build_region_graph_global(manifest, k_regions=3, chunk=2, seed=0)
        assert list(graphs) == manifest.slide_ids
        for graph in graphs.values():
            assert_partition(graph, 36)

    def test_global_fit_needs_slides(self):
        with pytest.raises(GraphMilGraphError):
            fit_region_clusters([], k_regions=2)


class TestCentroidGraph:

    def test_fully_connected_with_cosine_weights(self):
        slide = grid_slide(5, 5)
        graph = build_centroid_graph(slide, k=4, seed=1)
        assert graph.n_nodes == 4
        assert graph.edges.shape == (6, 2)
        assert graph.edge_weights is not None
        assert ((graph.edge_weights >= 0) & (graph.edge_weights <= 2)).all()
        i, j = graph.edges[0]
        assert graph.edge_weights[0] == pytest.approx(
            cosine_distance(graph.node_features[i], graph.node_features[j])
        )
        assert_partition(graph, 25)

    def test_too_few_patches(self):
        with pytest.raises(GraphMilGraphError):
            build_centroid_graph(grid_slide(2, 2), k=9)

    def test_zero_norm_centroid(self):
        slide = grid_slide(2, 2, np.zeros((4, 3)))
        with pytest.raises(GraphMilGraphError):
            build_centroid_graph(slide, k=1)

    @pytest.mark.parametrize(
        "a, b, expected",
        [
            ([1.0, 0.0], [1.0, 0.0], 0.0),
            ([1.0, 0.0], [0.0, 1.0], 1.0),
            ([1.0, 0.0], [-1.0, 0.0], 2.0),
        ],
        ids=["same", "orthogonal", "opposite"],
    )
    def test_cosine_distance(self, a, b, expected):
        assert cosine_distance(np.array(a), np.array(b)) == pytest.approx(expected)


class TestWsiGraphValidation:

    @pytest.mark.parametrize(
        "edges",
        [[[1, 0]], [[0, 0]], [[0, 1], [0, 1]], [[0, 3]]],
        ids=["reversed", "self_loop", "duplicate", "out_of_range"],
    )
    def test_rejects_bad_edges(self, edges):
        with pytest.raises(GraphMilShapeError):
            WsiGraph("s", np.zeros((3, 2)), np.array(edges), ((0,), (1,), (2,)))

    def test_rejects_non_partition(self):
        with pytest.raises(GraphMilShapeError):
            WsiGraph("s", np.zeros((2, 2)), np.zeros((0, 2)), ((0,), (0,)))

    def test_adjacency_uses_weights(self):
        graph = WsiGraph(
            "s",
            np.zeros((3, 1)),
            np.array([[0, 2]]),
            ((0,), (1,), (2,)),
            edge_weights=np.array([0.25]),
        )
        expected = np.zeros((3, 3))
        expected[0, 2] = expected[2, 0] = 0.25
        np.testing.assert_array_equal(graph.adjacency(), expected)


class TestSaveLoad:

    def test_round_trip_with_weights(self, tmp_path):
        graph = build_centroid_graph(grid_slide(4, 4), k=3, seed=2)
        path = save_graph(graph, tmp_path / "s.edges")
        loaded = load_graph(path)
        np.testing.assert_array_equal(loaded.edges, graph.edges)
        assert loaded.edge_weights is not None
        np.testing.assert_array_equal(loaded.edge_weights, graph.edge_weights)
        np.testing.assert_array_equal(
            loaded.node_features, graph.node_features.astype(np.float32)
        )
        assert loaded.node_to_patches == graph.node_to_patches
        assert loaded.slide_id == "s"

    def test_edge_list_text(self, tmp_path):
        slide = SlideRecord(
            slide_id="s",
            label=1,
            center_id="c",
            coords=[[0, 0], [0, 1], [1, 0]],
            features=np.eye(3),
        )
        path = save_graph(build_patch_graph(slide), tmp_path / "s.edges")
        assert path.read_text() == "# nodes 3\n0 1\n0 2\n1 2\n"

    def test_missing_header(self, tmp_path):
        path = tmp_path / "s.edges"
        path.write_text("0 1\n")
        with pytest.raises(GraphMilFormatError) as info:
            load_graph(path)
        assert info.value.code == FormatErrorCode.BAD_MAGIC

    @pytest.mark.parametrize(
        "text",
        ["# nodes three\n", "# nodes 3\n0 x\n", "# nodes 3\n1\n"],
        ids=["node_count", "endpoint", "short_line"],
    )
    def test_malformed_edge_list(self, tmp_path, text):
        path = tmp_path / "s.edges"
        path.write_text(text)
        with pytest.raises(GraphMilFormatError) as info:
            load_graph(path)
        assert info.value.code == FormatErrorCode.CORRUPT


graph_kinds = [
    ("none", dict(graph_kind="none", gnn_kind="none"), 16),
    ("patch", dict(graph_kind="patch"), 16),
    ("region_local", dict(graph_kind="region_local", k_regions=3), None),
    ("centroid", dict(graph_kind="centroid", centroid_k=4), 4),
]


@pytest.mark.parametrize(
    "overrides, n_nodes",
    [case[1:] for case in graph_kinds],
    ids=[case[0] for case in graph_kinds],
)
def test_build_graph_dispatch(overrides, n_nodes):
    cfg = TrainConfig(seed=3, **overrides)
    slide = grid_slide(4, 4)
    graph = build_graph(cfg, slide)
    again = build_graph(cfg, slide)
    if n_nodes is not None:
        assert graph.n_nodes == n_nodes
    assert_partition(graph, 16)
    np.testing.assert_array_equal(graph.edges, again.edges)
    np.testing.assert_array_equal(graph.node_features, again.node_features)


def test_region_global_needs_fitted_clusters():
    with pytest.raises(GraphMilGraphError):
        build_graph(TrainConfig(seed=0, graph_kind="region_global"), grid_slide(2, 2))
