import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specfuse.graphs import (
    Graph,
    SbmConfig,
    edge_homophily,
    generate_sbm,
    l_hat,
    l_scaled,
    load_graph,
    make_folds,
    save_graph,
    sym_laplacian,
)
from specfuse.linalg import CsrMatrix, jacobi_eigh


def sbm(n=60, c=3, h=0.3, deg=6.0, f=4, noise=0.5, seed=0):
    return generate_sbm(SbmConfig(n, c, h, deg, f, noise, seed))


class TestLaplacians:
    def test_single_edge(self):
        adj = CsrMatrix.from_dense([[0, 1], [1, 0]], symmetric=True)
        lap = sym_laplacian(adj)
        assert np.array_equal(lap.to_dense(), [[1, -1], [-1, 1]])
        assert np.array_equal(l_hat(lap).to_dense(), [[0, -1], [-1, 0]])
        assert np.array_equal(l_scaled(lap).to_dense(), [[0.5, -0.5], [-0.5, 0.5]])

    def test_triangle(self):
        adj = CsrMatrix.from_dense(np.ones((3, 3)) - np.eye(3), symmetric=True)
        lap = sym_laplacian(adj).to_dense()
        assert np.allclose(np.diag(lap), 1.0)
        off = lap[~np.eye(3, dtype=bool)]
        assert np.allclose(off, -0.5)
        lh = l_hat(sym_laplacian(adj)).to_dense()
        assert np.allclose(np.diag(lh), 0.0)
        w, _ = jacobi_eigh(lh)
        assert np.all(w >= -1 - 1e-9) and np.all(w <= 1 + 1e-9)

    def test_isolated_nodes_get_unit_diagonal(self):
        adj = CsrMatrix.from_dense(np.zeros((3, 3)), symmetric=True)
        lap = sym_laplacian(adj)
        assert np.array_equal(lap.to_dense(), np.eye(3))
        assert np.array_equal(l_scaled(lap).to_dense(), 0.5 * np.eye(3))

    def test_rejects_self_loops(self):
        with pytest.raises(ValueError):
            sym_laplacian(CsrMatrix.from_dense(np.eye(2), symmetric=True))

    def test_exact_shift_and_scale_identities(self):
        g = sbm(seed=4)
        lap = sym_laplacian(g.adjacency)
        shifted = l_hat(lap)
        restored = shifted.vals.copy()
        on_diag = lap.row_expansion() == lap.col_idx
        restored[on_diag] += 1.0
        assert np.array_equal(restored, lap.vals)  # l_hat(L) + I == L bitwise
        assert np.array_equal(2.0 * l_scaled(lap).vals, lap.vals)  # 2 * l_scaled == L bitwise

    def test_spectrum_bounds_small_graphs(self):
        for seed in range(3):
            g = sbm(n=40, seed=seed)
            lap = sym_laplacian(g.adjacency)
            w, _ = jacobi_eigh(lap)
            assert np.all(w >= -1e-9) and np.all(w <= 2 + 1e-9)
            wh, _ = jacobi_eigh(l_hat(lap))
            assert np.all(np.abs(wh) <= 1 + 1e-9)
            ws, _ = jacobi_eigh(l_scaled(lap))
            assert np.all(ws >= -1e-9) and np.all(ws <= 1 + 1e-9)


class TestSbm:
    def test_deterministic(self):
        a, b = sbm(seed=9), sbm(seed=9)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.adjacency.col_idx, b.adjacency.col_idx)
        assert np.array_equal(a.adjacency.row_ptr, b.adjacency.row_ptr)

    def test_pure_homophily_has_no_cross_edges(self):
        g = sbm(n=90, h=1.0, deg=8.0, seed=2)
        rows = g.adjacency.row_expansion()
        assert np.all(g.labels[rows] == g.labels[g.adjacency.col_idx])

    def test_uniform_point_gives_equal_probabilities(self):
        # h = 1/c puts intra and inter probabilities at the same value, so
        # measured homophily sits near 1/c
        g = generate_sbm(SbmConfig(600, 3, 1 / 3, 10.0, 4, 0.5, seed=11))
        assert abs(edge_homophily(g) - 1 / 3) < 0.05

    def test_measured_homophily_tracks_target(self):
        vals = [
            edge_homophily(generate_sbm(SbmConfig(400, 4, 0.9, 10.0, 8, 1.0, seed=s)))
            for s in range(10)
        ]
        assert all(abs(v - 0.9) < 0.05 for v in vals)

    def test_infeasible_probability_raises(self):
        with pytest.raises(ValueError):
            generate_sbm(SbmConfig(10, 2, 1.0, 8.0, 4, 0.5, seed=0))

    def test_average_degree(self):
        g = sbm(n=500, deg=12.0, seed=3)
        assert abs(g.adjacency.nnz / g.n - 12.0) < 1.5

    def test_feature_dim_validation(self):
        with pytest.raises(ValueError):
            SbmConfig(50, 4, 0.5, 5.0, 2, 0.5, seed=0)


class TestFolds:
    def test_sizes_and_disjointness(self):
        g = sbm(n=100, c=4, seed=1)
        folds = make_folds(g, 10, seed=0)
        assert len(folds) == 10
        for masks in folds:
            assert abs(int(masks["test"].sum()) - 20) <= 2
            assert not np.any(masks["train"] & masks["val"])
            assert not np.any(masks["train"] & masks["test"])
            assert not np.any(masks["val"] & masks["test"])
            assert int((masks["train"] | masks["val"] | masks["test"]).sum()) == g.n

    def test_same_seed_identical(self):
        g = sbm(n=80, seed=5)
        a = make_folds(g, 5, seed=3)
        b = make_folds(g, 5, seed=3)
        for ma, mb in zip(a, b):
            for name in ("train", "val", "test"):
                assert np.array_equal(ma[name], mb[name])

    def test_stratification_within_one_node(self):
        g = sbm(n=120, c=3, seed=7)
        global_counts = np.bincount(g.labels)
        for masks in make_folds(g, 4, seed=1):
            for name, ratio in (("train", 0.6), ("val", 0.2), ("test", 0.2)):
                got = np.bincount(g.labels[masks[name]], minlength=3)
                expect = ratio * global_counts
                assert np.all(np.abs(got - expect) <= 1.0 + 1e-9)

    def test_small_class_raises(self):
        g = sbm(n=30, c=3, seed=0)
        with pytest.raises(ValueError):
            make_folds(g, 20, seed=0)


class TestFileIO:
    def test_symmetrize_and_dedup(self, tmp_path):
        (tmp_path / "edges.txt").write_text("0 1\n1 0\n")
        (tmp_path / "features.txt").write_text("1.0 0.0 0\n0.0 1.0 1\n")
        g = load_graph(tmp_path)
        assert g.adjacency.nnz == 2  # one undirected edge, both directions stored once
        assert np.array_equal(g.adjacency.to_dense(), [[0, 1], [1, 0]])

    def test_self_loop_dropped(self, tmp_path):
        (tmp_path / "edges.txt").write_text("0 1\n1 1\n")
        (tmp_path / "features.txt").write_text("1.0 0\n2.0 1\n")
        g = load_graph(tmp_path)
        assert g.adjacency.nnz == 2

    def test_malformed_line_reports_lineno(self, tmp_path):
        (tmp_path / "edges.txt").write_text("0 1\nbogus line here\n")
        (tmp_path / "features.txt").write_text("1.0 0\n2.0 1\n")
        with pytest.raises(ValueError, match="edges.txt:2"):
            load_graph(tmp_path)

    def test_label_out_of_range(self, tmp_path):
        (tmp_path / "edges.txt").write_text("0 1\n")
        (tmp_path / "features.txt").write_text("1.0 0\n2.0 -3\n")
        with pytest.raises(ValueError, match="label"):
            load_graph(tmp_path)

    def test_node_id_out_of_range(self, tmp_path):
        (tmp_path / "edges.txt").write_text("0 7\n")
        (tmp_path / "features.txt").write_text("1.0 0\n2.0 1\n")
        with pytest.raises(ValueError, match="out of range"):
            load_graph(tmp_path)

    def test_masks_loaded(self, tmp_path):
        (tmp_path / "edges.txt").write_text("0 1\n")
        (tmp_path / "features.txt").write_text("1.0 0\n2.0 1\n")
        (tmp_path / "masks.json").write_text(json.dumps({"train": [0], "val": [], "test": [1]}))
        g = load_graph(tmp_path)
        assert g.masks["train"][0] and g.masks["test"][1]

    def test_save_load_round_trip(self, tmp_path):
        g = sbm(n=50, seed=13)
        save_graph(g, tmp_path)
        back = load_graph(tmp_path)
        assert back.n == g.n
        assert np.array_equal(back.adjacency.to_dense(), g.adjacency.to_dense())
        assert np.array_equal(back.features, g.features)  # repr round-trips floats
        assert np.array_equal(back.labels, g.labels)
        for name in ("train", "val", "test"):
            assert np.array_equal(back.masks[name], g.masks[name])


class TestGraphInvariants:
    def test_mask_overlap_rejected(self):
        g = sbm(n=20, seed=0)
        masks = {k: v.copy() for k, v in g.masks.items()}
        masks["val"][:] = masks["train"]
        with pytest.raises(ValueError):
            Graph(g.n, g.adjacency, g.features, g.labels, masks)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_generated_graphs_validate(self, seed):
        g = sbm(n=40, seed=seed)
        assert g.adjacency.symmetric
        assert g.num_classes == 3
