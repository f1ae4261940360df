# tests/test_primal.py
import logging
import math
import unittest

import numpy as np

from src.consensus import mean_projection
from src.errors import DivergenceError
from src.netgraph import generate_graph, generate_time_varying, metropolis_mixing
from src.primal_algos import (
    acc_dngd,
    dagd_consensus,
    dagd_iteration_estimate,
    dagd_step_coefficient,
    dgd,
    diging,
    extra,
    extra_fixed_point_gap,
    inexact_oracle_params,
    tune_acc_dngd_step,
)
from src.problems import compute_constants, make_quadratic, make_quadratic_from, solve_reference, stack_gradient
from src.run_guard import RunGuard

logging.basicConfig(level=logging.ERROR)


class PrimalTestBase(unittest.TestCase):

    def setUp(self) -> None:
        self.problem = make_quadratic(5, 3, 10.0, seed=1)
        self.reference = solve_reference(self.problem)
        self.M = metropolis_mixing(generate_graph("path", 5))
        # 全ノードが同じ最小化点を持つ問題
        A = np.diag([1.0, 2.0, 3.0])
        self.x_common = np.array([0.5, -1.0, 2.0])
        self.common = make_quadratic_from([A] * 5, [A @ self.x_common] * 5)
        self.X_common = np.tile(self.x_common, (5, 1))


class TestDGD(PrimalTestBase):
    """分散勾配降下のテスト。"""

    def test_common_minimizer_is_stationary(self) -> None:
        record = dgd(self.common, self.M, X0=self.X_common, budget=20)
        np.testing.assert_allclose(record.final_iterate, self.X_common, atol=1e-14)

    def test_zero_step_is_consensus(self) -> None:
        X0 = np.random.default_rng(0).standard_normal((5, 3))
        record = dgd(self.problem, self.M, alpha=0.0, X0=X0, budget=2000, reference=self.reference)
        np.testing.assert_allclose(record.final_iterate, mean_projection(X0), atol=1e-8)

    def test_plateau_scales_with_step(self) -> None:
        L_l = compute_constants(self.problem).L_l

        def plateau(alpha: float) -> float:
            record = dgd(self.problem, self.M, alpha=alpha, budget=6000, reference=self.reference)
            tail = record.column("f_residual")[-1200:]
            return float(np.mean(tail))

        high = plateau(0.1 / L_l)
        low = plateau(0.05 / L_l)
        self.assertGreater(low, 0.0)
        self.assertLess(low, high)
        self.assertLess(low / high, 0.75)

    def test_counters_and_columns(self) -> None:
        record = dgd(self.problem, self.M, budget=10, reference=self.reference)
        self.assertEqual(record.last.comm_rounds, 10)
        self.assertEqual(record.last.grad_calls, 10)
        self.assertEqual(list(record.to_frame().columns),
                         ["iter", "comm_rounds", "grad_calls", "f_residual", "consensus_error"])

    def test_divergence_guard(self) -> None:
        with self.assertRaises(DivergenceError) as ctx:
            dgd(self.problem, self.M, alpha=100.0, budget=500, reference=self.reference)
        self.assertEqual(ctx.exception.record.status, "DIVERGED")
        self.assertGreater(len(ctx.exception.record.rows), 0)


class TestEXTRA(PrimalTestBase):

    def test_exact_convergence(self) -> None:
        record = extra(self.problem, self.M, budget=20000, reference=self.reference, eps=1e-9)
        self.assertEqual(record.status, "CONVERGED")
        self.assertLessEqual(record.last.f_residual, 1e-8)
        self.assertLessEqual(record.last.consensus_error, 1e-8)
        # 1反復1通信ラウンド
        self.assertEqual(record.last.comm_rounds, record.last.iter)

    def test_optimal_start_is_fixed(self) -> None:
        record = extra(self.common, self.M, X0=self.X_common, budget=10)
        np.testing.assert_allclose(record.final_iterate, self.X_common, atol=1e-13)

    def test_running_sum_identity(self) -> None:
        """1ᵀ(X^{k+1} − X^k) = −α1ᵀ∇F(X^k) を毎反復確認する。"""
        alpha = 1.0 / compute_constants(self.problem).L_l
        gaps = []

        def observe(k: int, s: dict) -> None:
            lhs = (s["X"] - s["X_prev"]).sum(axis=0)
            gaps.append(float(np.abs(lhs + alpha * s["grad"].sum(axis=0)).max()))

        extra(self.problem, self.M, budget=30, reference=self.reference, on_step=observe)
        self.assertEqual(len(gaps), 30)
        self.assertLessEqual(max(gaps), 1e-9)

    def test_fixed_point_characterization(self) -> None:
        alpha = 0.1
        X_opt = np.tile(self.reference.x_star, (5, 1))
        self.assertLessEqual(extra_fixed_point_gap(self.problem, self.M, X_opt, alpha), 1e-9)
        X_bad = X_opt + np.random.default_rng(3).standard_normal((5, 3))
        self.assertGreater(extra_fixed_point_gap(self.problem, self.M, X_bad, alpha), 1e-6)
        X_consensual_off = np.tile(self.reference.x_star + 1.0, (5, 1))
        self.assertGreater(extra_fixed_point_gap(self.problem, self.M, X_consensual_off, alpha), 1e-6)

    def test_dgd_inexact_vs_extra_exact(self) -> None:
        record_dgd = dgd(self.problem, self.M, budget=4000, reference=self.reference)
        record_extra = extra(self.problem, self.M, budget=20000, reference=self.reference, eps=1e-9)
        self.assertGreater(record_dgd.last.f_residual, 1e-7)
        self.assertLess(record_extra.last.f_residual, 1e-8)


class TestAccDNGD(PrimalTestBase):

    def test_tracking_conservation(self) -> None:
        eta = tune_acc_dngd_step(self.problem, self.M)
        checks = []

        def observe(k: int, s: dict) -> None:
            checks.append(np.abs(s["S"].sum(axis=0) - stack_gradient(self.problem, s["Y"]).sum(axis=0)).max())

        acc_dngd(self.problem, self.M, eta=eta, budget=100, reference=self.reference, on_step=observe)
        self.assertTrue(checks)
        self.assertLessEqual(max(checks), 1e-9)

    def test_reaches_accuracy_with_four_rounds(self) -> None:
        eta = tune_acc_dngd_step(self.problem, self.M)
        record = acc_dngd(self.problem, self.M, eta=eta, budget=20000, reference=self.reference, eps=1e-6)
        self.assertEqual(record.status, "CONVERGED")
        self.assertEqual(record.last.comm_rounds, 4 * record.last.iter)

    def test_optimal_start_is_fixed(self) -> None:
        record = acc_dngd(self.common, self.M, eta=0.05, X0=self.X_common, budget=10)
        np.testing.assert_allclose(record.final_iterate, self.X_common, atol=1e-12)


class TestDIGing(PrimalTestBase):

    def test_static_sequence_matches_fixed_graph(self) -> None:
        base = generate_graph("path", 5)
        seq = generate_time_varying(base, rounds=6, drop_prob=0.0, window=1, seed=0)
        a = diging(self.problem, seq, alpha=0.05, budget=50, reference=self.reference)
        b = diging(self.problem, self.M, alpha=0.05, budget=50, reference=self.reference)
        np.testing.assert_allclose(a.final_iterate, b.final_iterate, atol=1e-12)

    def test_tracking_conservation(self) -> None:
        seq = generate_time_varying(generate_graph("cycle", 5), rounds=12, drop_prob=0.3, window=3, seed=2)
        gaps = []
        diging(self.problem, seq, alpha=0.03, budget=60, reference=self.reference,
               on_step=lambda k, s: gaps.append(
                   np.abs(s["Y"].sum(axis=0) - s["grad"].sum(axis=0)).max()))
        self.assertLessEqual(max(gaps), 1e-9)

    def test_linear_convergence_time_varying(self) -> None:
        problem = make_quadratic(8, 3, 5.0, seed=11)
        reference = solve_reference(problem)
        seq = generate_time_varying(generate_graph("cycle", 8), rounds=24, drop_prob=0.3, window=3, seed=11)
        record = diging(problem, seq, alpha=0.02, budget=20000, reference=reference, eps=1e-6)
        self.assertEqual(record.status, "CONVERGED")
        self.assertEqual(record.last.comm_rounds, 2 * record.last.iter)
        residual = record.column("f_residual")
        self.assertLessEqual(residual[-1], 1e-3 * residual[0])
        slope = np.polyfit(record.column("iter"), np.log(np.maximum(residual, 1e-300)), 1)[0]
        self.assertLess(slope, 0.0)


class TestDAGDConsensus(PrimalTestBase):

    def test_first_step_coefficient(self) -> None:
        self.assertAlmostEqual(dagd_step_coefficient(0.0, 4.0, 0.5), 0.25, places=15)

    def test_step_coefficient_rejects_degenerate(self) -> None:
        with self.assertRaises(ValueError):
            dagd_step_coefficient(1.0, 0.0, 0.5)

    def test_optimal_start_is_fixed(self) -> None:
        record = dagd_consensus(self.common, self.M, X0=self.X_common, consensus_T=3, budget=10)
        np.testing.assert_allclose(record.final_iterate, self.X_common, atol=1e-12)

    def test_rounds_are_T_per_iteration(self) -> None:
        record = dagd_consensus(self.problem, self.M, consensus_T=7, budget=12, reference=self.reference)
        self.assertEqual(record.last.comm_rounds, 7 * 12)
        self.assertEqual(record.last.grad_calls, 12)

    def test_consensus_accuracy_within_delta_prime(self) -> None:
        eps = 1e-6
        params = inexact_oracle_params(self.problem, eps, mixing=self.M, reference=self.reference)
        errors = []
        dagd_consensus(self.problem, self.M, budget=40, reference=self.reference, eps=eps,
                       on_step=lambda k, s: errors.append(float(np.sum((s["U"] - mean_projection(s["U"])) ** 2))))
        self.assertIsNotNone(params.T)
        self.assertLessEqual(max(errors), params.delta_prime)

    def test_iterations_scale_with_sqrt_kappa(self) -> None:
        eps = 1e-6
        counts = {}
        for kappa in (10.0, 1000.0):
            problem = make_quadratic(5, 3, kappa, seed=4)
            reference = solve_reference(problem)
            record = dagd_consensus(problem, self.M, consensus_T=200, budget=20000,
                                    reference=reference, eps=eps)
            self.assertEqual(record.status, "CONVERGED")
            counts[kappa] = record.last.iter
        ratio = counts[1000.0] / counts[10.0]
        self.assertGreater(ratio, 10.0 / 2.5)
        self.assertLess(ratio, 10.0 * 2.5)

    def test_rejects_non_consensual_start(self) -> None:
        with self.assertRaises(ValueError):
            dagd_consensus(self.problem, self.M, X0=np.eye(5, 3), consensus_T=2, budget=2)

    def test_iteration_estimate(self) -> None:
        c = compute_constants(self.problem)
        self.assertAlmostEqual(dagd_iteration_estimate(self.problem, 1e-6, 0.0),
                               math.ceil(2.0 * math.sqrt(c.L_g / c.mu_g)), delta=1)
        low = dagd_iteration_estimate(make_quadratic(5, 3, 10.0, seed=2), 1e-6, 1.0)
        high = dagd_iteration_estimate(make_quadratic(5, 3, 1000.0, seed=2), 1e-6, 1.0)
        self.assertGreater(high, 5 * low)


class TestInexactOracleParams(unittest.TestCase):

    def test_unit_constants(self) -> None:
        problem = make_quadratic_from([np.eye(1)], [np.zeros(1)])
        params = inexact_oracle_params(problem, 1e-3, delta_prime=0.2)
        self.assertAlmostEqual(params.delta, 1.5 * 0.2, places=14)
        self.assertEqual(params.L_model, 2.0)
        self.assertEqual(params.mu_model, 0.5)

    def test_zero_delta_prime(self) -> None:
        problem = make_quadratic(3, 2, 10.0, seed=0)
        self.assertEqual(inexact_oracle_params(problem, 1e-3, delta_prime=0.0).delta, 0.0)

    def test_matches_formula(self) -> None:
        problem = make_quadratic(4, 3, 30.0, seed=5)
        c = compute_constants(problem)
        dp = 1e-4
        expected = (c.L_l ** 2 / c.L_g + 2 * c.L_l ** 2 / c.mu_g + c.L_l - c.mu_l) * dp / (2 * 4)
        self.assertAlmostEqual(inexact_oracle_params(problem, 1e-3, delta_prime=dp).delta, expected, places=14)


class TestRunGuard(unittest.TestCase):

    def test_threshold_default_and_override(self) -> None:
        self.assertEqual(RunGuard().threshold, 1e10)
        self.assertEqual(RunGuard({"divergence_threshold": 5.0}).threshold, 5.0)
        self.assertEqual(RunGuard({"divergence_threshold": None}).threshold, 1e10)

    def test_non_finite_raises(self) -> None:
        with self.assertRaises(DivergenceError):
            RunGuard().check(np.array([np.nan]), 3, "dgd")

    def test_validate_step(self) -> None:
        with self.assertRaises(ValueError):
            RunGuard.validate_step("alpha", -1.0)
        self.assertEqual(RunGuard.validate_step("alpha", 0.5), 0.5)


if __name__ == "__main__":
    unittest.main()
