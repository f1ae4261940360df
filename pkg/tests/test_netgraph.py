# tests/test_netgraph.py
import logging
import os
import tempfile
import unittest

import networkx as nx
import numpy as np

from src.errors import GraphError
from src.models import GraphSequence
from src.netgraph import (
    build_laplacian,
    generate_graph,
    generate_time_varying,
    graph_from_edge_list,
    graph_to_edge_list,
    kron_lift,
    laplacian_mixing,
    load_matrix_csv,
    make_graph,
    metropolis_mixing,
    save_matrix_csv,
    spectral_summary,
    sqrt_psd,
    window_connected,
)

logging.basicConfig(level=logging.ERROR)


class TestGraphConstruction(unittest.TestCase):
    """グラフ生成と検証のテスト。"""

    def test_path_and_complete_edges(self) -> None:
        self.assertEqual(generate_graph("path", 3).edges, ((0, 1), (1, 2)))
        self.assertEqual(generate_graph("complete", 3).edges, ((0, 1), (0, 2), (1, 2)))

    def test_erdos_renyi_is_connected(self) -> None:
        g = generate_graph("erdos_renyi", 10, seed=7)
        self.assertTrue(nx.is_connected(g.to_networkx()))
        self.assertTrue(g.connected)

    def test_rejects_small_or_unknown(self) -> None:
        with self.assertRaises(GraphError):
            generate_graph("path", 1)
        with self.assertRaises(GraphError):
            generate_graph("hypercube", 4)

    def test_rejects_self_loop_and_duplicates(self) -> None:
        with self.assertRaises(GraphError):
            make_graph(3, [(0, 0)])
        with self.assertRaises(GraphError):
            make_graph(3, [(0, 1), (1, 0)])

    def test_edge_list_is_one_indexed(self) -> None:
        g = generate_graph("path", 3)
        text = graph_to_edge_list(g)
        self.assertEqual(text, "1 2\n2 3\n")
        self.assertEqual(graph_from_edge_list(text, 3), g)


class TestMatrices(unittest.TestCase):
    """ラプラシアン・混合行列のテスト。"""

    def test_laplacian_examples(self) -> None:
        P3 = build_laplacian(generate_graph("path", 3))
        np.testing.assert_array_equal(P3, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
        K3 = build_laplacian(generate_graph("complete", 3))
        np.testing.assert_array_equal(K3, [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])

    def test_cycle4_chi(self) -> None:
        W = build_laplacian(generate_graph("cycle", 4))
        s = spectral_summary(W, "laplacian")
        np.testing.assert_allclose(sorted(s.eigenvalues), [0, 2, 2, 4], atol=1e-12)
        self.assertAlmostEqual(s.chi, 2.0, places=12)

    def test_laplacian_kernel_is_one_dimensional(self) -> None:
        for family in ("path", "cycle", "star", "complete"):
            W = build_laplacian(generate_graph(family, 7))
            eig = np.linalg.eigvalsh(W)
            self.assertEqual(int(np.sum(eig < 1e-9 * eig.max())), 1, family)
            np.testing.assert_allclose(W.sum(axis=1), 0.0)

    def test_metropolis_path3(self) -> None:
        M = metropolis_mixing(generate_graph("path", 3))
        expected = np.array([[2, 1, 0], [1, 1, 1], [0, 1, 2]]) / 3.0
        np.testing.assert_allclose(M, expected, atol=1e-15)

    def test_metropolis_invariants(self) -> None:
        g = generate_graph("erdos_renyi", 12, seed=3)
        M = metropolis_mixing(g)
        self.assertLessEqual(np.abs(M.sum(axis=1) - 1).max(), 1e-12)
        self.assertLessEqual(np.abs(M - M.T).max(), 1e-12)
        edges = set(g.edges)
        for i in range(12):
            for j in range(i + 1, 12):
                if (i, j) not in edges:
                    self.assertEqual(M[i, j], 0.0)
        self.assertLess(spectral_summary(M, "mixing").lambda2_mix, 1.0)

    def test_metropolis_rejects_disconnected(self) -> None:
        with self.assertRaises(GraphError):
            metropolis_mixing(make_graph(4, [(0, 1), (2, 3)]))

    def test_laplacian_mixing_k3_is_averaging(self) -> None:
        M = laplacian_mixing(build_laplacian(generate_graph("complete", 3)))
        np.testing.assert_allclose(M, np.full((3, 3), 1 / 3), atol=1e-12)
        s = spectral_summary(M, "mixing")
        self.assertAlmostEqual(s.lambda2_mix, 0.0, places=12)
        self.assertAlmostEqual(s.chi, 1.0, places=12)

    def test_laplacian_mixing_rejects_zero(self) -> None:
        with self.assertRaises(ValueError):
            laplacian_mixing(np.zeros((3, 3)))

    def test_chi_two_ways_agree(self) -> None:
        """ラプラシアン固有値からの χ と laplacian_mixing の 1/(1−λ₂) が一致する。"""
        for family, m in (("path", 6), ("cycle", 8), ("star", 5)):
            W = build_laplacian(generate_graph(family, m))
            chi_l = spectral_summary(W, "laplacian").chi
            chi_m = spectral_summary(laplacian_mixing(W), "mixing").chi
            self.assertAlmostEqual(chi_l, chi_m, delta=1e-9 * chi_l)

    def test_complete_graph_chi_is_one(self) -> None:
        W = build_laplacian(generate_graph("complete", 6))
        self.assertAlmostEqual(spectral_summary(W, "laplacian").chi, 1.0, places=10)

    def test_spectral_rejects_non_symmetric(self) -> None:
        with self.assertRaises(ValueError):
            spectral_summary(np.array([[1.0, 2.0], [0.0, 1.0]]), "laplacian")


class TestLiftAndSqrt(unittest.TestCase):

    def test_kron_lift_examples(self) -> None:
        K2 = build_laplacian(generate_graph("complete", 2))
        np.testing.assert_array_equal(kron_lift(K2, 1), [[1, -1], [-1, 1]])
        P3 = build_laplacian(generate_graph("path", 3))
        W = kron_lift(P3, 2)
        self.assertEqual(W.shape, (6, 6))
        np.testing.assert_array_equal(W[2:4, 2:4], 2 * np.eye(2))
        x = np.tile([0.3, -1.2], 3)
        self.assertLessEqual(np.abs(W @ x).max(), 1e-12)

    def test_sqrt_psd_examples(self) -> None:
        np.testing.assert_allclose(sqrt_psd(np.eye(3)), np.eye(3), atol=1e-14)
        np.testing.assert_allclose(sqrt_psd(np.diag([4.0, 9.0, 0.0])), np.diag([2.0, 3.0, 0.0]), atol=1e-12)
        W = build_laplacian(generate_graph("complete", 3))
        S = sqrt_psd(W)
        self.assertLessEqual(np.linalg.norm(S @ S - W) / np.linalg.norm(W), 1e-10)
        np.testing.assert_allclose(S, S.T, atol=1e-14)

    def test_sqrt_psd_kernel_matches(self) -> None:
        W = kron_lift(build_laplacian(generate_graph("cycle", 5)), 2)
        S = sqrt_psd(W)
        ones = np.ones(10)
        self.assertLessEqual(np.abs(S @ ones).max(), 1e-10)
        eig_w = np.linalg.eigvalsh(W)
        eig_s = np.linalg.eigvalsh(S)
        self.assertEqual(int(np.sum(eig_w < 1e-9)), int(np.sum(np.abs(eig_s) < 1e-6)))

    def test_sqrt_psd_rejects_indefinite(self) -> None:
        with self.assertRaises(ValueError):
            sqrt_psd(np.diag([1.0, -1.0]))


class TestTimeVarying(unittest.TestCase):

    def test_no_drop_is_constant(self) -> None:
        base = generate_graph("cycle", 6)
        seq = generate_time_varying(base, rounds=5, drop_prob=0.0, window=2, seed=1)
        self.assertIsInstance(seq, GraphSequence)
        self.assertTrue(all(g == base for g in seq.graphs))

    def test_window_one_means_connected_rounds(self) -> None:
        seq = generate_time_varying(generate_graph("complete", 6), rounds=10, drop_prob=0.5, window=1, seed=2)
        self.assertTrue(all(g.connected for g in seq.graphs))

    def test_window_unions_connected(self) -> None:
        seq = generate_time_varying(generate_graph("cycle", 6), rounds=20, drop_prob=0.3, window=3, seed=5)
        self.assertEqual(seq.rounds, 20)
        self.assertTrue(window_connected(seq))
        for start in range(0, 18):
            union = nx.Graph()
            union.add_nodes_from(range(6))
            for g in seq.graphs[start:start + 3]:
                union.add_edges_from(g.edges)
            self.assertTrue(nx.is_connected(union))

    def test_rejects_bad_drop_prob(self) -> None:
        with self.assertRaises(GraphError):
            generate_time_varying(generate_graph("cycle", 4), rounds=4, drop_prob=1.0, window=1)


class TestMatrixCsv(unittest.TestCase):

    def test_save_and_load(self) -> None:
        M = metropolis_mixing(generate_graph("star", 4))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.csv")
            save_matrix_csv(path, M)
            np.testing.assert_array_equal(load_matrix_csv(path), M)


if __name__ == "__main__":
    unittest.main()
