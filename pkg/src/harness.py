# src/harness.py
import hashlib
import json
import logging
import math
import re
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor, as_completed
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.adapters.geometry import GEOMETRIES, make_geometry
from src.consensus import (
    Communicator,
    InstrumentedMixing,
    SequenceMixing,
    StaticMixing,
    accelerated_consensus_trajectory,
    consensus_error,
)
from src.dual_algos import (
    DualProblem,
    decentralized_lift,
    minimal_norm_dual_solution,
    restarted_rrma,
    rrma_run,
    spdstm,
    spdstm_batch_schedule,
    sstm_sc,
)
from src.errors import ConfigError, DecoptError, DivergenceError
from src.models import (
    SCHEMA_VERSION,
    DualRunRecord,
    ExperimentConfig,
    ExperimentResult,
    GraphSpec,
    IterationRecord,
    ProblemSpec,
    RunRecord,
    ScalingReport,
    SlopeFit,
    SweepVariable,
)
from src.netgraph import (
    build_laplacian,
    generate_graph,
    generate_time_varying,
    kron_lift,
    laplacian_mixing,
    metropolis_mixing,
    spectral_summary,
    sqrt_psd,
)
from src.primal_algos import (
    acc_dngd,
    dagd_consensus,
    dagd_iteration_estimate,
    dgd,
    diging,
    extra,
    tune_acc_dngd_step,
)
from src.problems import (
    ProblemInstance,
    compute_constants,
    make_logistic,
    make_nonsmooth,
    make_quadratic,
    solve_reference,
)
from src.run_guard import RunGuard
from src.sliding_algos import (
    DEFAULT_INNER_CONSTANT,
    m_zo_sliding,
    make_penalty,
    rs_sliding,
    s_sliding,
    sliding,
    sliding_iterations,
    zo_sliding,
)

logger = logging.getLogger(__name__)

# 実行ごとの監査ログ（JSONL）。ハンドラは出力ディレクトリごとに付け外しする
audit_logger = logging.getLogger("RunAudit")
audit_logger.setLevel(logging.INFO)
audit_logger.propagate = False
_audit_lock = threading.Lock()

TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
AUDIT_FILE = "run_audit.jsonl"
REPORT_FILE = "scaling_report.json"
SWEEP_TABLE_FILE = "sweep.csv"

MIN_SWEEP_POINTS = 3

AnyRecord = Union[RunRecord, DualRunRecord]

# ----------------------------------------------------
# Algorithm registry
# ----------------------------------------------------

AlgorithmFamily = Literal[
    "primal",     # 平滑問題の分散1次法
    "consensus",  # 合意のみ（目的関数なし）
    "sliding",    # 非平滑問題のペナルティ化 + Sliding
    "dual",       # 共役オラクルによる双対法
]

# どのアルゴリズムでも受け付けるパラメータ
COMMON_PARAMS = ("divergence_threshold",)


class AlgorithmEntry(BaseModel):
    """
    レジストリの1エントリ。

    Attributes:
        id (str): アルゴリズムID
        family (AlgorithmFamily): 族
        description (str): 一行説明
        required (tuple[str, ...]): 必須パラメータ
        optional (tuple[str, ...]): 任意パラメータ
        time_varying (bool): 時変グラフ（drop_prob > 0）で実行できるか
    """
    model_config = ConfigDict(frozen=True)

    id: str
    family: AlgorithmFamily
    description: str
    required: tuple[str, ...] = ()
    optional: tuple[str, ...] = ()
    time_varying: bool = False

    @property
    def accepted(self) -> set[str]:
        return set(self.required) | set(self.optional) | set(COMMON_PARAMS)


_SLIDING_OPTIONAL = ("R_y", "penalty_eps", "C", "geometry")
_DUAL_OPTIONAL = ("lifted", "sigma_x", "delta_x")

ALGORITHMS: dict[str, AlgorithmEntry] = {e.id: e for e in [
    AlgorithmEntry(id="dgd", family="primal", time_varying=True, optional=("alpha",),
                   description="Decentralized gradient descent (constant step)"),
    AlgorithmEntry(id="extra", family="primal", optional=("alpha",),
                   description="EXTRA exact first-order method"),
    AlgorithmEntry(id="acc_dngd", family="primal", optional=("eta", "trial"),
                   description="Accelerated distributed Nesterov gradient descent"),
    AlgorithmEntry(id="diging", family="primal", time_varying=True, required=("alpha",),
                   description="Gradient tracking over time-varying graphs"),
    AlgorithmEntry(id="dagd_consensus", family="primal", time_varying=True,
                   optional=("L", "mu", "consensus_T", "delta_prime"),
                   description="Accelerated gradient with an inner consensus subroutine"),
    AlgorithmEntry(id="consensus", family="consensus", time_varying=True,
                   description="Plain consensus averaging"),
    AlgorithmEntry(id="accelerated_consensus", family="consensus",
                   description="Nesterov-accelerated consensus on the Laplacian"),
    AlgorithmEntry(id="sliding", family="sliding", required=("D",), optional=_SLIDING_OPTIONAL + ("N",),
                   description="Gradient sliding on the penalized problem"),
    AlgorithmEntry(id="s_sliding", family="sliding", required=("D",),
                   optional=_SLIDING_OPTIONAL + ("N", "sigma", "batch"),
                   description="Stochastic gradient sliding"),
    AlgorithmEntry(id="rs_sliding", family="sliding", required=("D", "mu", "phases"),
                   optional=_SLIDING_OPTIONAL + ("sigma", "batch", "phase_iterations"),
                   description="Restarted stochastic sliding (strongly convex)"),
    AlgorithmEntry(id="zo_sliding", family="sliding", required=("D", "r"),
                   optional=_SLIDING_OPTIONAL + ("N", "Delta", "p_star"),
                   description="Zeroth-order sliding"),
    AlgorithmEntry(id="m_zo_sliding", family="sliding", required=("mu", "r", "phases"),
                   optional=_SLIDING_OPTIONAL + ("Delta", "p_star", "rho0"),
                   description="Restarted zeroth-order sliding (strongly convex)"),
    AlgorithmEntry(id="spdstm", family="dual", optional=_DUAL_OPTIONAL + ("N", "batch"),
                   description="Stochastic primal-dual similar triangles method"),
    AlgorithmEntry(id="sstm_sc", family="dual", optional=_DUAL_OPTIONAL + ("N", "batch"),
                   description="Similar triangles method for strongly convex duals"),
    AlgorithmEntry(id="rrma_ac_sa2", family="dual", optional=_DUAL_OPTIONAL + ("N", "lam", "batch"),
                   description="Recursive regularization around AC-SA2"),
    AlgorithmEntry(id="restarted_rrma", family="dual",
                   optional=_DUAL_OPTIONAL + ("R_y", "beta", "C", "N_bar", "phases", "workers"),
                   description="Restarted RRMA with gradient-norm halving"),
]}


def list_algorithms() -> list[AlgorithmEntry]:
    return [ALGORITHMS[k] for k in sorted(ALGORITHMS)]


# ----------------------------------------------------
# Configuration
# ----------------------------------------------------

_FIELD_PATTERN = re.compile(r"\b(?:problem|graph|algorithm)\.\w+")


def _error_fields(err: ValidationError) -> list[str]:
    fields = []
    for item in err.errors():
        path = ".".join(str(p) for p in item["loc"])
        if path:
            fields.append(path)
        else:
            # モデル全体のバリデータはメッセージ中のフィールド名を拾う
            fields.extend(_FIELD_PATTERN.findall(item["msg"]))
    return sorted(set(fields))


def check_algorithm(config: ExperimentConfig) -> AlgorithmEntry:
    """
    アルゴリズムIDとパラメータ、問題族・グラフとの組み合わせを検証する。

    Raises:
        ConfigError: 未知のID、パラメータ過不足、組み合わせ不可の場合。
    """
    entry = ALGORITHMS.get(config.algorithm.id)
    if entry is None:
        raise ConfigError(
            f"Unknown algorithm '{config.algorithm.id}' (known: {', '.join(sorted(ALGORITHMS))})",
            ["algorithm.id"],
        )
    params = config.algorithm.params
    missing = [p for p in entry.required if p not in params]
    if missing:
        raise ConfigError(
            f"{entry.id} needs parameter(s): {', '.join(missing)}",
            [f"algorithm.params.{p}" for p in missing],
        )
    unknown = sorted(set(params) - entry.accepted)
    if unknown:
        raise ConfigError(
            f"{entry.id} does not accept parameter(s): {', '.join(unknown)}",
            [f"algorithm.params.{p}" for p in unknown],
        )

    family = config.problem.family
    smooth = family in ("quadratic", "logistic")
    if entry.family == "primal" and not smooth:
        raise ConfigError(f"{entry.id} needs a smooth problem family (got '{family}')", ["problem.family"])
    if entry.family == "sliding" and smooth:
        raise ConfigError(f"{entry.id} needs a non-smooth problem family (got '{family}')", ["problem.family"])
    domain = config.problem.domain.kind
    if domain != "all" and entry.family != "sliding":
        raise ConfigError(f"{entry.id} runs only on the whole space (got domain '{domain}')",
                          ["problem.domain"])
    if "geometry" in params:
        geometry = params["geometry"]
        if geometry not in GEOMETRIES:
            raise ConfigError(f"Unknown geometry '{geometry}' (known: {', '.join(GEOMETRIES)})",
                              ["algorithm.params.geometry"])
        if geometry == "entropy" and domain != "simplex":
            raise ConfigError(f"Entropy geometry needs a simplex domain (got '{domain}')",
                              ["algorithm.params.geometry", "problem.domain"])
    if entry.family == "dual":
        if not smooth:
            raise ConfigError(f"{entry.id} needs a conjugate oracle (got '{family}')", ["problem.family"])
        if family == "logistic" and config.problem.reg_mu <= 0.0:
            raise ConfigError(f"{entry.id} needs strongly convex nodes (reg_mu > 0)", ["problem.reg_mu"])
    if config.graph.drop_prob > 0.0 and not entry.time_varying:
        raise ConfigError(f"{entry.id} does not support time-varying graphs", ["graph.drop_prob"])
    return entry


def validate_config(raw: Any) -> ExperimentConfig:
    """
    辞書から実験設定を検証して返す。

    Raises:
        ConfigError: スキーマ違反または組み合わせ不可の場合（fields に該当パス）。
    """
    if not isinstance(raw, dict):
        raise ConfigError("Configuration must be a mapping", [])
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        fields = _error_fields(e)
        details = "; ".join(f"{'.'.join(str(p) for p in x['loc']) or '<root>'}: {x['msg']}" for x in e.errors())
        raise ConfigError(f"Invalid configuration: {details}", fields) from e
    check_algorithm(config)
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    YAML設定ファイルを読み込んで検証する。

    Raises:
        ConfigError: ファイルが無い、YAMLとして壊れている、または検証に失敗した場合。
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}", []) from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse YAML {path}: {e}", []) from e
    return validate_config(raw)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seeds(config: ExperimentConfig) -> dict[str, int]:
    """ルートシードから問題・グラフ・アルゴリズム用のシードを派生する（明示指定が優先）。"""
    children = np.random.SeedSequence(config.seed).spawn(3)
    derived = [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]
    return {
        "problem": config.problem.seed if config.problem.seed is not None else derived[0],
        "graph": config.graph.seed if config.graph.seed is not None else derived[1],
        "algorithm": derived[2],
    }


# ----------------------------------------------------
# Builders
# ----------------------------------------------------


def build_problem(spec: ProblemSpec, seed: int) -> ProblemInstance:
    if spec.family == "quadratic":
        return make_quadratic(spec.m, spec.n, spec.kappa, seed=seed)
    if spec.family == "logistic":
        return make_logistic(spec.m, spec.n, spec.samples_per_node, spec.reg_mu, seed=seed)
    return make_nonsmooth(spec.m, spec.n, spec.family, seed=seed,
                          samples_per_node=spec.samples_per_node, reg=spec.reg_mu, domain=spec.domain)


class Network:
    """
    生成済みの通信ネットワーク。

    Attributes:
        graph (Graph): 基底グラフ
        laplacian (np.ndarray): 基底グラフのラプラシアン
        source (MixingSource): 混合行列源（時変なら SequenceMixing）
    """

    def __init__(self, spec: GraphSpec, seed: int):
        self.spec = spec
        self.graph = generate_graph(spec.family, spec.m, seed=seed, edge_prob=spec.edge_prob)
        self.laplacian = build_laplacian(self.graph)
        if spec.drop_prob > 0.0:
            rounds = spec.rounds or max(4 * spec.window, 12)
            self.sequence = generate_time_varying(self.graph, rounds, spec.drop_prob, spec.window, seed=seed)
            self.source = SequenceMixing(self.sequence)
        else:
            self.sequence = None
            if spec.mixing == "metropolis":
                matrix = metropolis_mixing(self.graph)
            else:
                matrix = laplacian_mixing(self.laplacian)
            self.source = StaticMixing(matrix)

    @property
    def time_varying(self) -> bool:
        return self.sequence is not None

    def chi(self) -> float:
        return spectral_summary(self.laplacian, "laplacian").chi


def build_graph(spec: GraphSpec, seed: int) -> Network:
    return Network(spec, seed)


# ----------------------------------------------------
# Runners
# ----------------------------------------------------


class RunContext:
    """1回の実行に必要なものをまとめる。instrumented は runner が設定する。"""

    def __init__(self, config: ExperimentConfig, problem: ProblemInstance, network: Network,
                 seeds: dict[str, int], guard: RunGuard):
        self.config = config
        self.problem = problem
        self.network = network
        self.seeds = seeds
        self.guard = guard
        self.params = config.algorithm.params
        self.instrumented: Optional[InstrumentedMixing] = None

    def communicator(self, source: Any) -> Communicator:
        self.instrumented = InstrumentedMixing(source)
        return Communicator(self.instrumented)


def _run_primal(ctx: RunContext) -> RunRecord:
    cfg, p, problem = ctx.config, ctx.params, ctx.problem
    source = ctx.network.source
    reference = solve_reference(problem, strict=False)
    common = dict(budget=cfg.budget, reference=reference, guard=ctx.guard, eps=cfg.eps)
    algo = cfg.algorithm.id

    if algo == "acc_dngd":
        # 刻み幅の探索は計測外の行列で行う
        eta = p.get("eta") or tune_acc_dngd_step(problem, source.matrix_at(0), trial=int(p.get("trial", 200)))
        return acc_dngd(problem, source, eta=eta, communicator=ctx.communicator(source), **common)
    comm = ctx.communicator(source)
    if algo == "dgd":
        return dgd(problem, source, alpha=p.get("alpha"), communicator=comm, **common)
    if algo == "extra":
        return extra(problem, source, alpha=p.get("alpha"), communicator=comm, **common)
    if algo == "diging":
        return diging(problem, source, alpha=float(p["alpha"]), communicator=comm, **common)
    return dagd_consensus(problem, source, L=p.get("L"), mu=p.get("mu"), consensus_T=p.get("consensus_T"),
                          delta_prime=p.get("delta_prime"), communicator=comm, **common)


def _run_consensus(ctx: RunContext) -> RunRecord:
    cfg = ctx.config
    algo = cfg.algorithm.id
    rng = np.random.default_rng(ctx.seeds["algorithm"])
    X0 = rng.standard_normal((ctx.problem.m, ctx.problem.dimension))
    base = consensus_error(X0)
    record = RunRecord(algorithm=algo)

    def log(k: int, X: np.ndarray) -> bool:
        ctx.guard.check(X, k, algo, record)
        rel = consensus_error(X) / base if base > 0.0 else 0.0
        record.rows.append(IterationRecord(iter=k, comm_rounds=k, grad_calls=0,
                                           f_residual=0.0, consensus_error=rel))
        return rel <= cfg.eps

    reached = log(0, X0)
    X = X0
    if algo == "consensus":
        comm = ctx.communicator(ctx.network.source)
        k = 0
        while not reached and k < cfg.budget:
            X = comm.mix(X, k)
            k += 1
            reached = log(k, X)
    else:
        if not reached:
            for k, X in enumerate(accelerated_consensus_trajectory(ctx.network.laplacian, X0, cfg.budget), 1):
                if log(k, X):
                    reached = True
                    break
    record.final_iterate = X
    record.status = "CONVERGED" if reached else "BUDGET_EXHAUSTED"
    return record


def _run_sliding(ctx: RunContext) -> RunRecord:
    cfg, p, problem = ctx.config, ctx.params, ctx.problem
    algo = cfg.algorithm.id
    seed = ctx.seeds["algorithm"]
    A = sqrt_psd(kron_lift(ctx.network.laplacian, problem.dimension))
    penalty = make_penalty(problem, A, p.get("R_y"), float(p.get("penalty_eps", cfg.eps)))
    comm = ctx.communicator(StaticMixing(penalty.gram))
    composite = penalty.composite(sigma=float(p.get("sigma", 0.0)), Delta=float(p.get("Delta", 0.0)),
                                  communicator=comm)
    dim = problem.m * problem.dimension
    # 積み上げ変数の領域はノードごとの Q の直積
    geometry = make_geometry(p.get("geometry", "euclidean"), problem.domain, dim, blocks=problem.m)
    x0 = geometry.center(dim)
    f_star = solve_reference(problem, strict=False).f_star
    C = float(p.get("C", DEFAULT_INNER_CONSTANT))
    if algo == "m_zo_sliding":
        return m_zo_sliding(composite, geometry, x0, int(p["phases"]), r=float(p["r"]), mu=float(p["mu"]),
                            rho0=p.get("rho0"), f_star=f_star, seed=seed, p_star=p.get("p_star"),
                            C=C, guard=ctx.guard)
    D = float(p["D"])
    N = int(p.get("N") or sliding_iterations(penalty.L, D, cfg.eps))
    common = dict(f_star=f_star, guard=ctx.guard, C=C)

    if algo == "sliding":
        return sliding(composite, geometry, x0, N, D=D, **common)
    if algo == "s_sliding":
        return s_sliding(composite, geometry, x0, N, seed=seed, batch=int(p.get("batch", 1)), D=D, **common)
    if algo == "rs_sliding":
        return rs_sliding(composite, geometry, x0, int(p["phases"]), mu=float(p["mu"]), R0=D, seed=seed,
                          batch=int(p.get("batch", 1)), phase_iterations=p.get("phase_iterations"), **common)
    return zo_sliding(composite, geometry, x0, N, r=float(p["r"]), seed=seed, D_tilde=0.75 * D * D,
                      p_star=p.get("p_star"), **common)


def _run_dual(ctx: RunContext) -> DualRunRecord:
    cfg, p, problem = ctx.config, ctx.params, ctx.problem
    algo = cfg.algorithm.id
    seed = ctx.seeds["algorithm"]
    lifted = bool(p.get("lifted", True))
    A = sqrt_psd(kron_lift(ctx.network.laplacian, problem.dimension))
    gram = A.T @ A
    dual = DualProblem(problem, A, sigma_x=float(p.get("sigma_x", 0.0)), delta_x=float(p.get("delta_x", 0.0)))
    if lifted:
        dual = decentralized_lift(dual, ctx.communicator(StaticMixing((gram + gram.T) / 2.0)))
    N = int(p.get("N", cfg.budget))
    batch = int(p.get("batch", 1))

    if algo == "spdstm":
        schedule = batch
        if "batch" not in p and dual.sigma_x > 0.0:
            # 雑音ありでバッチ未指定なら r_k を増やしていく
            schedule = spdstm_batch_schedule(dual, N, cfg.eps)
        return spdstm(dual, N, batch=schedule, seed=seed, guard=ctx.guard, eps=cfg.eps)
    if algo == "sstm_sc":
        return sstm_sc(dual, N, batch=batch, seed=seed, guard=ctx.guard, eps=cfg.eps)
    if algo == "rrma_ac_sa2":
        return rrma_run(dual, N, lam=p.get("lam"), batch=batch, seed=seed, guard=ctx.guard, eps=cfg.eps)
    R_y = p.get("R_y")
    if R_y is None:
        reference = solve_reference(problem, strict=False)
        R_y = minimal_norm_dual_solution(dual, reference.x_star)[1]
    return restarted_rrma(dual, cfg.eps, float(R_y), beta=float(p.get("beta", 0.1)), C=float(p.get("C", 1.0)),
                          N_bar=p.get("N_bar"), phases=p.get("phases"), seed=seed,
                          workers=int(p.get("workers", 1)), guard=ctx.guard)


RUNNERS: dict[str, Callable[[RunContext], AnyRecord]] = {
    "primal": _run_primal,
    "consensus": _run_consensus,
    "sliding": _run_sliding,
    "dual": _run_dual,
}


# ----------------------------------------------------
# Outputs
# ----------------------------------------------------


def write_trace(record: AnyRecord, path: Union[str, Path]) -> Path:
    """スキーマ行付きのCSVトレースを書き出す（浮動小数は round-trip 精度）。"""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# schema_version={SCHEMA_VERSION}\n")
        record.to_frame().to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_trace(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def _num(value: Any) -> Any:
    if value is None:
        return None
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    return float(value)


def summarize(config: ExperimentConfig, record: AnyRecord, instrumented: Optional[InstrumentedMixing],
              status: str, measured: dict[str, float]) -> dict[str, Any]:
    """summary.json の内容。時刻などの非決定的な値は含めない。"""
    summary: dict[str, Any] = {
        "algorithm": config.algorithm.id,
        "status": status,
        "run_status": record.status,
        "eps": config.eps,
        "seed": config.seed,
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(config),
        "instrumented_multiplications": instrumented.multiplications if instrumented is not None else None,
        **{k: _num(v) for k, v in measured.items()},
    }
    if not record.rows:
        return summary
    last = record.last
    if isinstance(record, DualRunRecord):
        summary.update({k: _num(getattr(last, k)) for k in
                        ("iter", "comm_rounds", "conj_calls", "grad_norm", "psi", "gap", "ax_norm")})
        summary["phase_grad_norms"] = [float(v) for v in record.phase_grad_norms]
        return summary
    summary.update({k: _num(getattr(last, k)) for k in
                    ("iter", "comm_rounds", "grad_calls", "f_residual", "consensus_error",
                     "zo_calls", "smooth_grad_calls")})
    hit = record.first_reaching(config.eps)
    summary["iterations_to_eps"] = hit.iter if hit is not None else None
    summary["rounds_to_eps"] = hit.comm_rounds if hit is not None else None
    summary["grad_calls_to_eps"] = hit.grad_calls if hit is not None else None
    summary["phase_values"] = [float(v) for v in record.phase_values]
    return summary


def _write_audit(out_dir: Path, entry: dict[str, Any]) -> None:
    with _audit_lock:
        handler = logging.FileHandler(out_dir / AUDIT_FILE, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(message)s"))
        audit_logger.addHandler(handler)
        try:
            audit_logger.info(json.dumps(entry, ensure_ascii=False, sort_keys=True))
        finally:
            audit_logger.removeHandler(handler)
            handler.close()


# ----------------------------------------------------
# Experiment
# ----------------------------------------------------


def run_experiment(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """
    設定に従って1回の実験を実行し、trace.csv / summary.json / run_audit.jsonl を書き出す。

    Args:
        config (ExperimentConfig): 検証済み設定
        out_dir (Optional[str | Path]): 出力先（未指定なら config.output_dir）

    Returns:
        ExperimentResult: OK / DIVERGED / ERROR

    Raises:
        ConfigError: 組み合わせ不可の設定の場合。
    """
    entry = check_algorithm(config)
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = derive_seeds(config)
    run_id = str(uuid.uuid4())
    logger.info(f"Run {run_id}: {entry.id} on {config.problem.family}/{config.graph.family} "
                f"(m={config.problem.m}, n={config.problem.n}, seed={config.seed})")

    guard = RunGuard({"divergence_threshold": config.algorithm.params.get("divergence_threshold")})
    record: Optional[AnyRecord] = None
    ctx: Optional[RunContext] = None
    measured: dict[str, float] = {}
    message = ""
    try:
        problem = build_problem(config.problem, seeds["problem"])
        network = build_graph(config.graph, seeds["graph"])
        measured["chi"] = network.chi()
        kappa_g = compute_constants(problem).kappa_g
        if math.isfinite(kappa_g):
            measured["kappa_g"] = kappa_g
            if entry.id == "dagd_consensus":
                # 初期点は 0
                x_star = solve_reference(problem, strict=False).x_star
                measured["predicted_iterations"] = dagd_iteration_estimate(
                    problem, config.eps, float(np.linalg.norm(x_star)))
        ctx = RunContext(config, problem, network, seeds, guard)
        record = RUNNERS[entry.family](ctx)
        status = "OK"
    except DivergenceError as e:
        logger.error(f"Run {run_id} diverged: {e}")
        record = e.record
        status = "DIVERGED"
        message = str(e)
    except (DecoptError, ValueError) as e:
        logger.error(f"Run {run_id} failed: {e}")
        status = "ERROR"
        message = str(e)

    if record is None:
        record = RunRecord(algorithm=entry.id, status="DIVERGED" if status == "DIVERGED" else "BUDGET_EXHAUSTED")

    trace_path = write_trace(record, out / TRACE_FILE) if record.rows else None
    instrumented = ctx.instrumented if ctx is not None else None
    summary = summarize(config, record, instrumented, status, measured)
    summary_path = out / SUMMARY_FILE
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
        f.write("\n")

    _write_audit(out, {
        "run_id": run_id,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "algorithm": entry.id,
        "status": status,
        "config_hash": summary["config_hash"],
        "seeds": seeds,
        "rows": len(record.rows),
        "comm_rounds": summary.get("comm_rounds"),
        "instrumented_multiplications": summary["instrumented_multiplications"],
        "message": message,
    })
    logger.info(f"Run {run_id} finished: status={status}, rows={len(record.rows)}")
    return ExperimentResult(status=status, algorithm=entry.id, summary=summary,
                            trace_path=str(trace_path) if trace_path else None,
                            summary_path=str(summary_path), message=message)


# ----------------------------------------------------
# Sweeps
# ----------------------------------------------------

SWEEP_TOLERANCES: dict[str, float] = {"kappa": 0.2, "eps": 0.35, "chi": 0.3}

# (変数, アルゴリズム, 指標) → 理論上の両対数傾き
THEORY_SLOPES: dict[tuple[str, str, str], float] = {
    ("kappa", "dagd_consensus", "iterations"): 0.5,
    ("chi", "consensus", "comm_rounds"): 1.0,
    ("chi", "accelerated_consensus", "comm_rounds"): 0.5,
    **{("eps", a, "smooth_grad_calls"): -0.5
       for a in ("sliding", "s_sliding", "rs_sliding", "zo_sliding", "m_zo_sliding")},
    **{("eps", a, "grad_calls"): -2.0 for a in ("sliding", "s_sliding")},
}


def member_config(config: ExperimentConfig, variable: SweepVariable, value: float,
                  out_dir: Path) -> ExperimentConfig:
    """
    掃引変数だけを差し替えたメンバー設定。

    Sliding 系の ε 掃引ではペナルティ用の ε を基準設定の値に固定する。
    ペナルティ係数 R_y²/ε が ε と一緒に動くと L ∝ 1/ε になり、外側反復数の傾きが変わってしまう。
    """
    update: dict[str, Any] = {"output_dir": str(out_dir)}
    if variable == "eps":
        update["eps"] = float(value)
        entry = ALGORITHMS.get(config.algorithm.id)
        params = config.algorithm.params
        if entry is not None and entry.family == "sliding" and "penalty_eps" not in params:
            pinned = {**params, "penalty_eps": config.eps}
            update["algorithm"] = config.algorithm.model_copy(update={"params": pinned})
    elif variable == "kappa":
        update["problem"] = config.problem.model_copy(update={"kappa": float(value)})
    else:
        m = int(value)
        update["problem"] = config.problem.model_copy(update={"m": m})
        update["graph"] = config.graph.model_copy(update={"m": m})
    return config.model_copy(update=update)


def _sweep_metrics(family: str, summary: dict[str, Any]) -> dict[str, Optional[float]]:
    if family in ("primal", "consensus"):
        return {
            "iterations": summary.get("iterations_to_eps"),
            "comm_rounds": summary.get("rounds_to_eps"),
            "grad_calls": summary.get("grad_calls_to_eps"),
        }
    if family == "sliding":
        metrics = {"smooth_grad_calls": summary.get("smooth_grad_calls"), "grad_calls": summary.get("grad_calls")}
        if summary.get("zo_calls") is not None:
            metrics["zo_calls"] = summary["zo_calls"]
        return metrics
    return {"comm_rounds": summary.get("comm_rounds"), "conj_calls": summary.get("conj_calls")}


def _measured_x(variable: SweepVariable, member: ExperimentConfig, summary: dict[str, Any]) -> float:
    if variable == "eps":
        return member.eps
    if variable == "kappa":
        return float(summary.get("kappa_g", member.problem.kappa))
    return float(summary.get("chi", float("nan")))


def fit_slope(x: list[float], y: list[float]) -> float:
    """両対数の最小二乗傾き。"""
    slope, _ = np.polyfit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)
    return float(slope)


def sweep(config: ExperimentConfig, variable: SweepVariable, values: list[float],
          out_dir: Optional[Union[str, Path]] = None, workers: int = 1) -> ScalingReport:
    """
    1変数を掃引して各メンバーを実行し、指標の両対数傾きを理論値と比べる。

    Args:
        config (ExperimentConfig): 基準設定
        variable (SweepVariable): "eps" / "kappa" / "chi"
        values (list[float]): 掃引値（3点以上）
        out_dir (Optional[str | Path]): 出力先
        workers (int): 並列数

    Returns:
        ScalingReport: 指標・傾き・失敗メンバー

    Raises:
        ConfigError: 掃引値が3点未満、または基準設定が不正な場合。
    """
    if len(values) < MIN_SWEEP_POINTS:
        raise ConfigError(f"A sweep needs at least {MIN_SWEEP_POINTS} values (got {len(values)})", ["values"])
    entry = check_algorithm(config)
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    members = [member_config(config, variable, v, out / f"{variable}_{i:02d}") for i, v in enumerate(values)]
    for member in members:
        check_algorithm(member)
    logger.info(f"Sweep over {variable}: {entry.id}, {len(values)} members, workers={workers}")

    results: dict[int, ExperimentResult] = {}
    failures: list[str] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(run_experiment, member): i for i, member in enumerate(members)}
        for future in as_completed(futures):
            i = futures[future]
            try:
                results[i] = future.result()
            except Exception as e:
                logger.error(f"Sweep member {variable}={values[i]} raised: {e}")
                failures.append(f"{variable}={values[i]}: {e}")

    xs: list[float] = []
    metrics: dict[str, list[float]] = {}
    rows = []
    for i, value in enumerate(values):
        result = results.get(i)
        if result is None:
            continue
        if result.status != "OK":
            failures.append(f"{variable}={value}: {result.status} {result.message}".strip())
            continue
        member_metrics = _sweep_metrics(entry.family, result.summary)
        missing = [k for k, v in member_metrics.items() if v is None]
        if missing:
            failures.append(f"{variable}={value}: eps not reached ({', '.join(missing)})")
            continue
        x = _measured_x(variable, members[i], result.summary)
        xs.append(x)
        for k, v in member_metrics.items():
            metrics.setdefault(k, []).append(float(v))
        rows.append({"value": value, "x": x, **member_metrics})

    fits: list[SlopeFit] = []
    tolerance = SWEEP_TOLERANCES[variable]
    if len(xs) >= MIN_SWEEP_POINTS:
        for name, ys in metrics.items():
            if min(ys) <= 0.0 or not all(math.isfinite(v) for v in xs):
                continue
            slope = fit_slope(xs, ys)
            theory = THEORY_SLOPES.get((variable, entry.id, name))
            passed = abs(slope - theory) <= tolerance if theory is not None else None
            fits.append(SlopeFit(metric=name, slope=slope, theory_slope=theory, tolerance=tolerance, passed=passed))
            logger.info(f"Sweep fit {entry.id}/{name}: slope={slope:.3f} (theory={theory})")
    elif not failures:
        failures.append(f"only {len(xs)} usable members")

    report = ScalingReport(variable=variable, algorithm=entry.id, values=[float(v) for v in values],
                           x=xs, metrics=metrics, fits=fits, failures=sorted(failures))
    with open(out / REPORT_FILE, "w", encoding="utf-8") as f:
        f.write(report.model_dump_json(indent=2))
        f.write("\n")
    pd.DataFrame(rows).to_csv(out / SWEEP_TABLE_FILE, index=False, float_format="%.17g", lineterminator="\n")
    return report
