# tests/test_harness.py
import json
import logging
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import yaml

from src.errors import ConfigError
from src.harness import (
    AUDIT_FILE,
    REPORT_FILE,
    SUMMARY_FILE,
    TRACE_FILE,
    config_hash,
    derive_seeds,
    list_algorithms,
    load_config,
    member_config,
    read_trace,
    run_experiment,
    sweep,
    validate_config,
)
from src.main import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_PARTIAL, main

# ログ出力を抑制してテスト結果を見やすくする
logging.basicConfig(level=logging.ERROR)

GOLDEN_DIR = Path(__file__).resolve().parents[1] / "config" / "golden"


def _raw(algorithm: str = "extra", params: dict | None = None, family: str = "quadratic",
         m: int = 4, graph: str = "path", **extra) -> dict:
    raw = {
        "problem": {"family": family, "m": m, "n": 2, "kappa": 5.0},
        "graph": {"family": graph, "m": m},
        "algorithm": {"id": algorithm, "params": params or {}},
        "budget": 3000,
        "eps": 1e-6,
        "seed": 1,
    }
    raw.update(extra)
    return raw


class TestConfigValidation(unittest.TestCase):
    """設定検証のテスト。"""

    def test_mismatched_node_counts_name_both_fields(self) -> None:
        raw = _raw()
        raw["graph"]["m"] = 5
        with self.assertRaises(ConfigError) as ctx:
            validate_config(raw)
        self.assertIn("problem.m", ctx.exception.fields)
        self.assertIn("graph.m", ctx.exception.fields)

    def test_unknown_algorithm(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            validate_config(_raw("newton"))
        self.assertEqual(ctx.exception.fields, ["algorithm.id"])

    def test_missing_and_unknown_params(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            validate_config(_raw("diging"))
        self.assertEqual(ctx.exception.fields, ["algorithm.params.alpha"])
        with self.assertRaises(ConfigError) as ctx:
            validate_config(_raw("extra", {"beta": 1.0}))
        self.assertEqual(ctx.exception.fields, ["algorithm.params.beta"])

    def test_family_combinations(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            validate_config(_raw("extra", family="hinge"))
        self.assertEqual(ctx.exception.fields, ["problem.family"])
        with self.assertRaises(ConfigError) as ctx:
            validate_config(_raw("sliding", {"D": 1.0}))
        self.assertEqual(ctx.exception.fields, ["problem.family"])

    def test_time_varying_only_where_supported(self) -> None:
        raw = _raw("extra")
        raw["graph"]["drop_prob"] = 0.2
        with self.assertRaises(ConfigError) as ctx:
            validate_config(raw)
        self.assertEqual(ctx.exception.fields, ["graph.drop_prob"])

    def test_schema_errors_carry_paths(self) -> None:
        raw = _raw()
        raw["eps"] = -1.0
        with self.assertRaises(ConfigError) as ctx:
            validate_config(raw)
        self.assertIn("eps", ctx.exception.fields)
        with self.assertRaises(ConfigError):
            validate_config(["not", "a", "mapping"])

    def test_load_config_errors(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / "missing.yaml")
            broken = Path(tmp) / "broken.yaml"
            broken.write_text("problem: [unclosed\n", encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_config(broken)

    def test_golden_configs_are_valid(self) -> None:
        for path in sorted(GOLDEN_DIR.glob("*.yaml")):
            config = load_config(path)
            self.assertEqual(config.problem.m, config.graph.m, path.name)

    def test_geometry_param(self) -> None:
        raw = _raw("zo_sliding", {"D": 2.0, "r": 0.01, "geometry": "wasserstein"}, family="l1_regression", m=3)
        with self.assertRaises(ConfigError) as ctx:
            validate_config(raw)
        self.assertEqual(ctx.exception.fields, ["algorithm.params.geometry"])
        raw = _raw("zo_sliding", {"D": 2.0, "r": 0.01, "geometry": "entropy"}, family="l1_regression", m=3)
        with self.assertRaises(ConfigError) as ctx:
            validate_config(raw)
        self.assertEqual(ctx.exception.fields, ["algorithm.params.geometry", "problem.domain"])
        raw["problem"]["domain"] = {"kind": "simplex"}
        self.assertEqual(validate_config(raw).algorithm.params["geometry"], "entropy")

    def test_constrained_domain_only_for_sliding(self) -> None:
        raw = _raw("extra")
        raw["problem"]["domain"] = {"kind": "box"}
        with self.assertRaises(ConfigError) as ctx:
            validate_config(raw)
        self.assertEqual(ctx.exception.fields, ["problem.domain"])

    def test_seeds_and_hash(self) -> None:
        config = validate_config(_raw())
        self.assertEqual(derive_seeds(config), derive_seeds(config))
        self.assertEqual(config_hash(config), config_hash(validate_config(_raw())))
        self.assertNotEqual(config_hash(config), config_hash(config.model_copy(update={"seed": 2})))
        raw = _raw()
        raw["problem"]["seed"] = 99
        self.assertEqual(derive_seeds(validate_config(raw))["problem"], 99)

    def test_registry(self) -> None:
        ids = [entry.id for entry in list_algorithms()]
        self.assertEqual(ids, sorted(ids))
        for name in ("dgd", "extra", "acc_dngd", "diging", "dagd_consensus", "consensus",
                     "accelerated_consensus", "sliding", "zo_sliding", "spdstm", "restarted_rrma"):
            self.assertIn(name, ids)


class TestRunExperiment(unittest.TestCase):

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_golden_extra_run(self) -> None:
        config = load_config(GOLDEN_DIR / "extra_quadratic.yaml")
        result = run_experiment(config, self.tmp / "extra")
        self.assertEqual(result.status, "OK")
        self.assertEqual(result.summary["run_status"], "CONVERGED")
        self.assertLessEqual(result.summary["f_residual"], 1e-8)
        frame = read_trace(result.trace_path)
        self.assertEqual(list(frame.columns), ["iter", "comm_rounds", "grad_calls", "f_residual", "consensus_error"])
        self.assertTrue(frame["comm_rounds"].is_monotonic_increasing)

    def test_same_seed_is_byte_identical(self) -> None:
        config = validate_config(_raw("extra"))
        a = run_experiment(config, self.tmp / "a")
        b = run_experiment(config, self.tmp / "b")
        self.assertEqual((self.tmp / "a" / TRACE_FILE).read_bytes(), (self.tmp / "b" / TRACE_FILE).read_bytes())
        self.assertEqual((self.tmp / "a" / SUMMARY_FILE).read_bytes(), (self.tmp / "b" / SUMMARY_FILE).read_bytes())
        self.assertEqual(a.summary, b.summary)

    def test_trace_has_schema_line(self) -> None:
        run_experiment(validate_config(_raw("dgd", budget=50)), self.tmp)
        first = (self.tmp / TRACE_FILE).read_text(encoding="utf-8").splitlines()[0]
        self.assertEqual(first, "# schema_version=1")

    def test_audit_matches_communication_rounds(self) -> None:
        for algorithm, params in (("extra", {}), ("spdstm", {"N": 30})):
            out = self.tmp / algorithm
            result = run_experiment(validate_config(_raw(algorithm, params, graph="complete")), out)
            line = (out / AUDIT_FILE).read_text(encoding="utf-8").strip().splitlines()[-1]
            audit = json.loads(line)
            self.assertEqual(audit["status"], "OK")
            self.assertEqual(audit["instrumented_multiplications"], result.summary["comm_rounds"])
            self.assertEqual(audit["comm_rounds"], result.summary["comm_rounds"])

    def test_divergence_is_reported(self) -> None:
        result = run_experiment(validate_config(_raw("dgd", {"alpha": 100.0})), self.tmp)
        self.assertEqual(result.status, "DIVERGED")
        self.assertEqual(result.summary["run_status"], "DIVERGED")
        self.assertTrue((self.tmp / TRACE_FILE).exists())

    def test_time_varying_consensus(self) -> None:
        raw = _raw("consensus", m=6, graph="cycle", eps=1e-4)
        raw["graph"].update({"drop_prob": 0.3, "window": 3})
        result = run_experiment(validate_config(raw), self.tmp)
        self.assertEqual(result.summary["run_status"], "CONVERGED")
        self.assertEqual(result.summary["instrumented_multiplications"], result.summary["comm_rounds"])

    def test_dagd_summary_has_prediction(self) -> None:
        raw = _raw("dagd_consensus", {"consensus_T": 5}, budget=5)
        result = run_experiment(validate_config(raw), self.tmp)
        self.assertIsInstance(result.summary["predicted_iterations"], int)
        self.assertGreater(result.summary["predicted_iterations"], 0)
        self.assertNotIn("predicted_iterations", run_experiment(validate_config(_raw("extra", budget=5)),
                                                                self.tmp / "extra").summary)

    def test_sliding_on_nonsmooth_problem(self) -> None:
        raw = _raw("sliding", {"D": 2.0, "N": 5}, family="l1_regression", m=3, eps=0.1)
        result = run_experiment(validate_config(raw), self.tmp)
        self.assertEqual(result.status, "OK")
        self.assertEqual(result.summary["smooth_grad_calls"], 5)
        self.assertEqual(result.summary["comm_rounds"], 5)

    def test_noisy_spdstm_grows_batches(self) -> None:
        noisy = _raw("spdstm", {"N": 20, "sigma_x": 0.3}, m=3, graph="complete", eps=1e-2)
        result = run_experiment(validate_config(noisy), self.tmp / "schedule")
        self.assertGreater(result.summary["conj_calls"], 20)
        fixed = _raw("spdstm", {"N": 20, "sigma_x": 0.3, "batch": 1}, m=3, graph="complete", eps=1e-2)
        self.assertEqual(run_experiment(validate_config(fixed), self.tmp / "fixed").summary["conj_calls"], 20)

    def test_zeroth_order_sliding_on_simplex(self) -> None:
        """エントロピー幾何で単体上のゼロ次 Sliding を設定から実行できる。"""
        raw = _raw("zo_sliding", {"D": 1.0, "N": 5, "r": 0.01, "p_star": 1.0, "geometry": "entropy"},
                   family="l1_regression", m=3, eps=0.1)
        raw["problem"]["domain"] = {"kind": "simplex"}
        result = run_experiment(validate_config(raw), self.tmp)
        self.assertEqual(result.status, "OK")
        self.assertEqual(result.summary["smooth_grad_calls"], 5)
        self.assertGreater(result.summary["zo_calls"], 0)


class TestSweep(unittest.TestCase):

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_needs_three_values(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            sweep(validate_config(_raw()), "eps", [1e-2, 1e-3], self.tmp)
        self.assertEqual(ctx.exception.fields, ["values"])

    def test_chi_sweep_writes_report(self) -> None:
        config = validate_config(_raw("consensus", graph="cycle", eps=1e-4))
        report = sweep(config, "chi", [4, 6, 8], self.tmp, workers=2)
        self.assertEqual(report.failures, [])
        self.assertEqual(len(report.x), 3)
        self.assertEqual(report.x, sorted(report.x))
        self.assertIn("comm_rounds", [fit.metric for fit in report.fits])
        self.assertTrue((self.tmp / REPORT_FILE).exists())

    def test_accelerated_chi_sweep_slope(self) -> None:
        config = validate_config(_raw("accelerated_consensus", graph="path", eps=1e-6))
        report = sweep(config, "chi", [6, 10, 16], self.tmp)
        self.assertEqual(report.failures, [])
        fit = next(f for f in report.fits if f.metric == "comm_rounds")
        self.assertEqual(fit.theory_slope, 0.5)
        self.assertTrue(fit.passed, f"slope={fit.slope:.3f}")

    def test_sliding_eps_sweep_keeps_penalty(self) -> None:
        """ε 掃引ではペナルティ係数が固定され、外側反復数は ε^{-1/2} で増える。"""
        config = validate_config(_raw("sliding", {"D": 2.0, "R_y": 0.5}, family="l1_regression", m=3,
                                      graph="complete", eps=1.0))
        values = [1.0, 0.5, 0.25]
        for value in values:
            member = member_config(config, "eps", value, self.tmp)
            self.assertEqual(member.eps, value)
            self.assertEqual(member.algorithm.params["penalty_eps"], 1.0)
        explicit = config.model_copy(update={"algorithm": config.algorithm.model_copy(
            update={"params": {"D": 2.0, "R_y": 0.5, "penalty_eps": 0.3}})})
        self.assertEqual(member_config(explicit, "eps", 0.5, self.tmp).algorithm.params["penalty_eps"], 0.3)

        report = sweep(config, "eps", values, self.tmp)
        self.assertEqual(report.failures, [])
        fit = next(f for f in report.fits if f.metric == "smooth_grad_calls")
        self.assertEqual(fit.theory_slope, -0.5)
        self.assertTrue(fit.passed, f"slope={fit.slope:.3f}")

    @patch('src.harness.run_experiment')
    def test_member_exception_is_recorded(self, mock_run) -> None:
        """メンバーの例外はスイープ全体を止めず failures に記録される。"""
        mock_run.side_effect = RuntimeError("boom")
        report = sweep(validate_config(_raw()), "eps", [1e-2, 1e-3, 1e-4], self.tmp)
        self.assertEqual(len(report.failures), 3)
        self.assertFalse(report.passed)


class TestCli(unittest.TestCase):
    """終了コードのテスト。"""

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()
        logging.getLogger().setLevel(logging.ERROR)

    def _write(self, raw: dict) -> str:
        path = self.tmp / "config.yaml"
        path.write_text(yaml.safe_dump(raw), encoding="utf-8")
        return str(path)

    def test_list_and_validate(self) -> None:
        self.assertEqual(main(["list-algorithms", "--quiet"]), EXIT_OK)
        self.assertEqual(main(["validate-config", "--quiet", "--config",
                               str(GOLDEN_DIR / "extra_quadratic.yaml")]), EXIT_OK)

    def test_config_error_exit_code(self) -> None:
        raw = _raw()
        raw["graph"]["m"] = 7
        self.assertEqual(main(["run", "--quiet", "--config", self._write(raw)]), EXIT_CONFIG)

    def test_run_ok_and_out_override(self) -> None:
        out = self.tmp / "out"
        code = main(["run", "--quiet", "--config", self._write(_raw("extra")), "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue((out / SUMMARY_FILE).exists())

    def test_divergence_exit_code(self) -> None:
        raw = _raw("dgd", {"alpha": 100.0}, output_dir=str(self.tmp / "div"))
        self.assertEqual(main(["run", "--quiet", "--config", self._write(raw)]), EXIT_DIVERGED)

    def test_partial_sweep_exit_code(self) -> None:
        raw = _raw("consensus", graph="cycle", budget=1, eps=1e-12, output_dir=str(self.tmp / "sweep"))
        code = main(["sweep", "--quiet", "--config", self._write(raw), "--variable", "chi",
                     "--values", "4", "5", "6"])
        self.assertEqual(code, EXIT_PARTIAL)


if __name__ == "__main__":
    unittest.main()
