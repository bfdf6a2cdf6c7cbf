import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gevae.graphcore import (
    EdgeListFormatError,
    Graph,
    GraphError,
    InvalidPermutationError,
    ParameterError,
    connected_components,
    er_graph,
    generate,
    grid_graph,
    invert_permutation,
    ladder_graph,
    laplacian,
    load_dataset,
    permute_graph,
    read_edge_list,
    save_dataset,
    write_edge_list,
)

K3 = Graph(3, [(0, 1), (0, 2), (1, 2)])
PATH3 = Graph(3, [(0, 1), (1, 2)])


@st.composite
def graph_and_perm(draw, n_max=50):
    n = draw(st.integers(1, n_max))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=80)) if pairs else []
    perm = draw(st.permutations(list(range(n))))
    return Graph(n, chosen), np.array(perm)


class TestGraph:
    def test_canonical_storage(self):
        g = Graph(4, [(3, 1), (2, 0), (1, 0)])
        assert g.edges.tolist() == [[0, 1], [0, 2], [1, 3]]

    @pytest.mark.parametrize("edges", [[(1, 1)], [(0, 3)], [(0, 1), (1, 0)], [(-1, 0)]])
    def test_invariants_enforced(self, edges):
        with pytest.raises(GraphError):
            Graph(3, edges)

    def test_zero_nodes_rejected(self):
        with pytest.raises(GraphError):
            Graph(0)

    def test_dense_round_trip(self, rng):
        g = er_graph(12, 0.4, rng)
        assert Graph.from_dense(g.dense()) == g


class TestPermute:
    def test_complete_graph_fixed(self):
        for perm in ([1, 2, 0], [2, 1, 0], [0, 2, 1]):
            assert permute_graph(K3, perm) == K3

    def test_identity(self):
        assert permute_graph(PATH3, [0, 1, 2]) == PATH3

    def test_swap_ends_of_path(self):
        assert permute_graph(PATH3, [2, 1, 0]).edges.tolist() == [[0, 1], [1, 2]]

    def test_length_mismatch(self):
        with pytest.raises(InvalidPermutationError):
            permute_graph(PATH3, [0, 1])
        with pytest.raises(InvalidPermutationError):
            permute_graph(PATH3, [0, 0, 1])

    @settings(max_examples=60, deadline=None)
    @given(graph_and_perm())
    def test_inverse_restores(self, gp):
        g, perm = gp
        assert permute_graph(permute_graph(g, perm), invert_permutation(perm)) == g

    @settings(max_examples=60, deadline=None)
    @given(graph_and_perm())
    def test_laplacian_conjugation_exact(self, gp):
        g, perm = gp
        pm = np.zeros((g.n, g.n))
        pm[perm, np.arange(g.n)] = 1.0
        assert np.array_equal(laplacian(permute_graph(g, perm)), pm @ laplacian(g) @ pm.T)


class TestLaplacian:
    def test_single_edge(self):
        assert laplacian(Graph(2, [(0, 1)])).tolist() == [[1, -1], [-1, 1]]

    def test_empty(self):
        assert not laplacian(Graph(3)).any()

    def test_k3(self):
        lap = laplacian(K3)
        assert np.array_equal(lap, 3 * np.eye(3) - np.ones((3, 3)))
        np.testing.assert_allclose(np.linalg.eigvalsh(lap), [0, 3, 3], atol=1e-12)

    def test_psd_rows_sum_to_zero(self, rng):
        g = er_graph(25, 0.3, rng)
        lap = laplacian(g)
        assert np.array_equal(lap, lap.T)
        assert np.allclose(lap.sum(axis=1), 0)
        assert np.linalg.eigvalsh(lap).min() > -1e-10


class TestGenerators:
    def test_grid_counts(self):
        g = grid_graph(3, 3)
        assert (g.n, g.num_edges) == (9, 3 * 2 + 3 * 2)

    @pytest.mark.parametrize("r,c", [(3, 5), (4, 7), (1, 6)])
    def test_grid_formula(self, r, c):
        assert grid_graph(r, c).num_edges == r * (c - 1) + c * (r - 1)

    def test_ladder_counts(self):
        g = ladder_graph(4)
        assert (g.n, g.num_edges) == (8, 2 * 3 + 4)

    def test_community_complete_clusters(self):
        ds = generate("community", {"num_graphs": 1, "cluster_min": 10, "cluster_max": 10,
                                    "p_in": 1.0, "p_out": 0.0}, seed=0)
        g = ds.graphs[0]
        assert (g.n, g.num_edges) == (20, 2 * math.comb(10, 2))

    @pytest.mark.parametrize("kind,params", [
        ("community", {"num_graphs": 20}),
        ("grid", {"num_graphs": 20}),
        ("ladder", {"rungs": [2, 3, 5]}),
        ("er", {"num_graphs": 20, "n": 15, "p": 0.3}),
    ])
    def test_deterministic(self, kind, params):
        a, b = generate(kind, params, seed=7), generate(kind, params, seed=7)
        assert a.graphs == b.graphs and a.splits == b.splits
        assert {g.n for g in a.graphs} and all(isinstance(g, Graph) for g in a.graphs)

    def test_split_fraction(self):
        ds = generate("er", {"num_graphs": 30}, seed=1)
        assert len(ds.train) == 20 and len(ds.test) == 10
        assert ds.meta["train_fraction"] == pytest.approx(2 / 3)

    @pytest.mark.parametrize("kind,params", [
        ("community", {"p_in": 1.5}),
        ("community", {"cluster_min": 0}),
        ("grid", {"rows_min": 5, "rows_max": 4}),
        ("er", {"p": -0.1}),
        ("er", {"n": 0}),
        ("ladder", {"rungs": [0]}),
        ("er", {"bogus": 1}),
        ("cycle", {}),
    ])
    def test_invalid_params(self, kind, params):
        with pytest.raises(ParameterError):
            generate(kind, params, seed=0)

    def test_disconnected_graphs_kept(self):
        ds = generate("community", {"num_graphs": 50, "p_in": 0.1, "p_out": 0.0}, seed=3)
        assert any(len(set(connected_components(g))) > 1 for g in ds.graphs)


class TestEdgeListIO:
    def test_round_trip(self, tmp_path):
        write_edge_list(K3, tmp_path / "k3.txt")
        assert read_edge_list(tmp_path / "k3.txt") == K3

    def test_duplicates_warn(self, tmp_path, caplog):
        path = tmp_path / "dup.txt"
        path.write_text("# comment\n3 2\n2 1\n1 2\n")
        with caplog.at_level(logging.WARNING):
            g = read_edge_list(path)
        assert g.edges.tolist() == [[1, 2]]
        assert "duplicate" in caplog.text

    def test_self_loop(self, tmp_path):
        path = tmp_path / "loop.txt"
        path.write_text("5 1\n4 4\n")
        with pytest.raises(EdgeListFormatError, match="self-loop") as exc:
            read_edge_list(path)
        assert exc.value.line == 2

    @pytest.mark.parametrize("body,line", [("3 1\n0 5\n", 2), ("3 1\n0 x\n", 2),
                                           ("3 1\n0 1 2\n", 2), ("oops\n", 1)])
    def test_malformed(self, tmp_path, body, line):
        path = tmp_path / "bad.txt"
        path.write_text(body)
        with pytest.raises(EdgeListFormatError) as exc:
            read_edge_list(path)
        assert exc.value.line == line

    @settings(max_examples=30, deadline=None)
    @given(graph_and_perm(n_max=20))
    def test_round_trip_property(self, tmp_path_factory, gp):
        g, _ = gp
        path = tmp_path_factory.mktemp("rt") / "g.txt"
        write_edge_list(g, path)
        assert read_edge_list(path) == g

    def test_dataset_directory(self, tmp_path):
        ds = generate("grid", {"num_graphs": 6}, seed=2)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.graphs == ds.graphs and back.splits == ds.splits
        assert back.meta["kind"] == "grid"
