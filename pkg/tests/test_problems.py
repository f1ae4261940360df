# tests/test_problems.py
import logging
import tempfile
import unittest

import numpy as np

from src.adapters.logistic import LogisticNode
from src.adapters.nonsmooth import L1RegressionNode
from src.errors import NotDualFriendlyError
from src.models import Domain
from src.problems import (
    ProblemInstance,
    StackedFunction,
    compute_constants,
    conjugate_argmax,
    load_bundle,
    make_logistic,
    make_logistic_from,
    make_nonsmooth,
    make_quadratic,
    make_quadratic_from,
    save_bundle,
    solve_reference,
    stack_gradient,
)

logging.basicConfig(level=logging.ERROR)


def _finite_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestQuadratic(unittest.TestCase):
    """二次関数インスタンスのテスト。"""

    def test_identity_single_node(self) -> None:
        problem = make_quadratic_from([np.eye(2)], [np.zeros(2)])
        ref = solve_reference(problem)
        np.testing.assert_allclose(ref.x_star, np.zeros(2), atol=1e-14)
        self.assertAlmostEqual(ref.f_star, 0.0, places=14)

    def test_two_node_average(self) -> None:
        problem = make_quadratic_from([np.eye(2), np.eye(2)], [np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_allclose(solve_reference(problem).x_star, [0.5, 0.5], atol=1e-14)

    def test_random_instance_closed_form(self) -> None:
        problem = make_quadratic(5, 4, 20.0, seed=3)
        A = sum(f.A for f in problem.node_functions)
        b = sum(f.b for f in problem.node_functions)
        ref = solve_reference(problem)
        np.testing.assert_allclose(ref.x_star, np.linalg.solve(A, b), atol=1e-10)
        self.assertTrue(ref.certified)

    def test_global_condition_number(self) -> None:
        c = compute_constants(make_quadratic(6, 5, 50.0, seed=1))
        self.assertAlmostEqual(c.kappa_g, 50.0, delta=1e-8)
        self.assertLessEqual(c.kappa_g, c.kappa_l + 1e-12)

    def test_constants_from_eigenvalues(self) -> None:
        problem = make_quadratic(4, 3, 10.0, seed=2)
        for f in problem.node_functions:
            eig = np.linalg.eigvalsh(f.A)
            self.assertAlmostEqual(f.mu, eig[0], places=10)
            self.assertAlmostEqual(f.L, eig[-1], places=10)

    def test_rejects_kappa_below_one(self) -> None:
        with self.assertRaises(ValueError):
            make_quadratic(2, 2, 0.5)


class TestConstants(unittest.TestCase):

    class _Stub:
        def __init__(self, mu: float, L: float):
            self.mu, self.L, self.dim, self.lipschitz = mu, L, 1, 1.0

    def test_identical_nodes(self) -> None:
        problem = ProblemInstance(name="stub", node_functions=[self._Stub(1, 10), self._Stub(1, 10)], dimension=1)
        c = compute_constants(problem)
        self.assertEqual((c.mu_l, c.mu_g, c.L_l, c.L_g), (1, 1, 10, 10))

    def test_mixed_nodes(self) -> None:
        problem = ProblemInstance(name="stub", node_functions=[self._Stub(1, 10), self._Stub(3, 20)], dimension=1)
        c = compute_constants(problem)
        self.assertEqual((c.mu_l, c.mu_g, c.L_l, c.L_g), (1, 2, 20, 15))


class TestSmoothnessCertificate(unittest.TestCase):

    def test_random_pairs(self) -> None:
        rng = np.random.default_rng(5)
        for problem in (make_quadratic(3, 4, 15.0, seed=4), make_logistic(3, 4, 25, 0.1, seed=4)):
            for f in problem.node_functions:
                for _ in range(100):
                    x, y = rng.standard_normal(4), rng.standard_normal(4)
                    gx, gy = f.gradient(x), f.gradient(y)
                    self.assertLessEqual(np.linalg.norm(gx - gy), f.L * np.linalg.norm(x - y) * (1 + 1e-9) + 1e-12)
                    lower = f.value(x) + gx @ (y - x) + 0.5 * f.mu * np.sum((y - x) ** 2)
                    self.assertGreaterEqual(f.value(y), lower - 1e-10)


class TestLogistic(unittest.TestCase):

    def test_zero_data_gradient(self) -> None:
        problem = make_logistic_from([np.zeros((4, 3))], [np.array([1.0, -1.0, 1.0, -1.0])], reg_mu=0.5)
        np.testing.assert_allclose(problem.node_functions[0].gradient(np.zeros(3)), 0.0, atol=1e-15)

    def test_gradient_vs_finite_differences(self) -> None:
        rng = np.random.default_rng(6)
        f = make_logistic(1, 5, 30, 0.1, seed=6).node_functions[0]
        for _ in range(10):
            x = rng.standard_normal(5)
            np.testing.assert_allclose(f.gradient(x), _finite_diff(f.value, x), atol=1e-6)

    def test_constants(self) -> None:
        f = make_logistic(1, 3, 20, 0.2, seed=1).node_functions[0]
        top = np.linalg.eigvalsh(f.Z.T @ f.Z)[-1]
        self.assertAlmostEqual(f.L, 0.2 + top / 80.0, places=12)
        self.assertEqual(f.mu, 0.2)

    def test_reference_residual(self) -> None:
        problem = make_logistic(4, 3, 20, 0.1, seed=2)
        ref = solve_reference(problem)
        self.assertLessEqual(float(np.linalg.norm(problem.objective_gradient(ref.x_star))), 1e-9)


class TestNonsmooth(unittest.TestCase):

    def test_midpoint_subgradient(self) -> None:
        f = L1RegressionNode(np.array([[1.0]]), np.array([0.0]))
        np.testing.assert_array_equal(f.gradient(np.zeros(1)), [0.0])

    def test_two_kinks_reference(self) -> None:
        f = L1RegressionNode(np.array([[1.0], [1.0]]), np.array([1.0, -1.0]))
        problem = ProblemInstance(name="l1_regression", node_functions=[f], dimension=1)
        ref = solve_reference(problem, strict=False)
        self.assertAlmostEqual(ref.f_star, 2.0, delta=1e-4)
        self.assertLessEqual(abs(ref.x_star[0]), 1.0 + 1e-4)

    def test_generated_families(self) -> None:
        for kind in ("l1_regression", "hinge"):
            problem = make_nonsmooth(3, 4, kind, seed=1)
            self.assertEqual(problem.m, 3)
            self.assertFalse(problem.smooth)
            self.assertFalse(problem.dual_friendly)
            self.assertTrue(all(f.lipschitz > 0 for f in problem.node_functions))

    def test_unknown_kind(self) -> None:
        with self.assertRaises(ValueError):
            make_nonsmooth(2, 2, "huber")


class TestConjugate(unittest.TestCase):

    def test_self_conjugate(self) -> None:
        problem = make_quadratic_from([np.eye(3)], [np.zeros(3)])
        y = np.array([[0.3, -2.0, 1.5]])
        np.testing.assert_allclose(conjugate_argmax(problem, y), y)

    def test_diagonal_quadratic(self) -> None:
        problem = make_quadratic_from([np.diag([2.0, 4.0])], [np.zeros(2)])
        np.testing.assert_allclose(conjugate_argmax(problem, np.array([[2.0, 4.0]])), [[1.0, 1.0]])

    def test_danskin_logistic(self) -> None:
        """∇φ(y) = x(y) を有限差分で確認する。"""
        rng = np.random.default_rng(7)
        node = LogisticNode(rng.standard_normal((20, 3)), np.where(rng.random(20) > 0.5, 1.0, -1.0), reg=0.3)

        def phi(y: np.ndarray) -> float:
            x = node.conjugate_argmax(y)
            return float(y @ x - node.value(x))

        y = rng.standard_normal(3) * 0.5
        x = node.conjugate_argmax(y)
        np.testing.assert_allclose(x, _finite_diff(phi, y), atol=1e-6)
        self.assertLessEqual(float(np.linalg.norm(y - node.gradient(x))), 1e-10)

    def test_nonsmooth_rejected(self) -> None:
        with self.assertRaises(NotDualFriendlyError):
            conjugate_argmax(make_nonsmooth(2, 2, "hinge"), np.zeros((2, 2)))


class TestStacking(unittest.TestCase):

    def test_stacked_function_matches_nodes(self) -> None:
        problem = make_quadratic(3, 2, 5.0, seed=9)
        X = np.random.default_rng(9).standard_normal((3, 2))
        stacked = StackedFunction(problem)
        self.assertAlmostEqual(stacked.value(X.ravel()),
                               sum(f.value(x) for f, x in zip(problem.node_functions, X)), places=12)
        np.testing.assert_allclose(stacked.gradient(X.ravel()), stack_gradient(problem, X).ravel())

    def test_bundle_round_trip_preserves_reference(self) -> None:
        problem = make_quadratic(3, 2, 5.0, seed=10)
        with tempfile.TemporaryDirectory() as tmp:
            save_bundle(problem, tmp)
            loaded = load_bundle(tmp)
        np.testing.assert_allclose(solve_reference(loaded).x_star, solve_reference(problem).x_star, atol=1e-12)

    def test_box_domain_reference(self) -> None:
        problem = make_quadratic_from([np.eye(2)], [np.array([5.0, 0.0])], domain=Domain(kind="box"))
        ref = solve_reference(problem)
        np.testing.assert_allclose(ref.x_star, [1.0, 0.0], atol=1e-8)


if __name__ == "__main__":
    unittest.main()
