# src/problems.py
import logging
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field

from src.adapters.geometry import project_simplex
from src.adapters.logistic import LogisticNode
from src.adapters.nonsmooth import HingeNode, L1RegressionNode
from src.adapters.quadratic import QuadraticNode
from src.errors import CertificationError, NotDualFriendlyError, ShapeMismatchError
from src.models import ConstantSummary, Domain, ReferenceSolution
from src.netgraph import load_matrix_csv, save_matrix_csv

logger = logging.getLogger(__name__)

# 参照解の既定許容誤差
SMOOTH_REFERENCE_TOL = 1e-10
NONSMOOTH_REFERENCE_TOL = 1e-4


class ProblemInstance(BaseModel):
    """
    ノードごとの凸関数の集合。目的関数は f(x) = Σ_i f_i(x)。

    Attributes:
        name (str): インスタンス名（族）。
        node_functions (list[Any]): NodeFunction に準拠する m 個の関数。
        domain (Domain): 実行可能領域 Q。
        dimension (int): 変数次元 n。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    node_functions: list[Any] = Field(min_length=1)
    domain: Domain = Field(default_factory=Domain)
    dimension: int = Field(ge=1)

    @property
    def m(self) -> int:
        return len(self.node_functions)

    @property
    def smooth(self) -> bool:
        return all(f.L > 0.0 for f in self.node_functions)

    @property
    def dual_friendly(self) -> bool:
        return all(hasattr(f, "conjugate_argmax") and f.mu > 0.0 for f in self.node_functions)

    def objective(self, x: np.ndarray) -> float:
        """f(x) = Σ f_i(x)"""
        return float(sum(f.value(x) for f in self.node_functions))

    def objective_gradient(self, x: np.ndarray) -> np.ndarray:
        return np.sum([f.gradient(x) for f in self.node_functions], axis=0)


# ----------------------------------------------------
# Stacked evaluation
# ----------------------------------------------------


def _check_state(problem: ProblemInstance, X: np.ndarray) -> None:
    if X.shape != (problem.m, problem.dimension):
        raise ShapeMismatchError(f"State shape {X.shape} != ({problem.m}, {problem.dimension})")


def stack_value(problem: ProblemInstance, X: np.ndarray) -> float:
    """F(X) = Σ f_i(x_i)"""
    _check_state(problem, X)
    return float(sum(f.value(x) for f, x in zip(problem.node_functions, X)))


def stack_gradient(problem: ProblemInstance, X: np.ndarray) -> np.ndarray:
    """∇F(X) の第 i 行は ∇f_i(x_i)。"""
    _check_state(problem, X)
    return np.vstack([f.gradient(x) for f, x in zip(problem.node_functions, X)])


class StackedFunction:
    """
    F(x) = Σ f_i(x_i) を長さ mn のベクトル変数の1関数として扱うビュー。
    ペナルティ化した問題の非平滑部に使う。
    """

    def __init__(self, problem: ProblemInstance):
        self.problem = problem
        self.shape = (problem.m, problem.dimension)
        self.dim = problem.m * problem.dimension
        c = compute_constants(problem)
        self.mu = c.mu_l
        self.L = c.L_l
        self.lipschitz = math.sqrt(sum(f.lipschitz ** 2 for f in problem.node_functions))

    def value(self, x: np.ndarray) -> float:
        return stack_value(self.problem, np.reshape(x, self.shape))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return stack_gradient(self.problem, np.reshape(x, self.shape)).ravel()


def conjugate_argmax(problem: ProblemInstance, Y: np.ndarray) -> np.ndarray:
    """
    各ノードの共役最大化点 x_i(y_i) = argmax{⟨y_i,x⟩ − f_i(x)} を行に並べて返す。

    Raises:
        NotDualFriendlyError: 強凸でない、または共役オラクルを持たない場合。
    """
    if not problem.dual_friendly:
        raise NotDualFriendlyError(f"Problem '{problem.name}' has no conjugate oracle")
    _check_state(problem, Y)
    return np.vstack([f.conjugate_argmax(y) for f, y in zip(problem.node_functions, Y)])


# ----------------------------------------------------
# Generators
# ----------------------------------------------------


def _random_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def make_quadratic_from(A_list: list[np.ndarray], b_list: list[np.ndarray],
                        domain: Optional[Domain] = None) -> ProblemInstance:
    """与えられた行列とベクトルから二次関数のインスタンスを作る。"""
    if len(A_list) != len(b_list) or not A_list:
        raise ShapeMismatchError("A_list and b_list must be non-empty and of equal length")
    nodes = [QuadraticNode(np.atleast_2d(A), np.atleast_1d(b)) for A, b in zip(A_list, b_list)]
    return ProblemInstance(name="quadratic", node_functions=nodes,
                           domain=domain or Domain(), dimension=nodes[0].dim)


def make_quadratic(m: int, n: int, kappa_target: float, seed: int = 0) -> ProblemInstance:
    """
    f_i(x) = ½xᵀA_ix − b_iᵀx。A_i = a_i Q_i diag(1, …, κ) Q_iᵀ（Q_i はノード固有の回転）。
    a_i は平均 1 に正規化するので μ_g = 1、L_g = κ（n ≥ 2 のとき κ_g = kappa_target）。
    b_i はノードごとに独立なので各ノードの最小化点は異なる。

    Args:
        m (int): ノード数
        n (int): 次元
        kappa_target (float): 大域条件数 κ_g (≥ 1)
        seed (int): 乱数シード

    Returns:
        ProblemInstance: 二次関数インスタンス
    """
    if kappa_target < 1.0:
        raise ValueError(f"kappa_target must be >= 1 (got {kappa_target})")
    rng = np.random.default_rng(seed)
    scales = rng.uniform(0.5, 1.5, size=m)
    scales /= scales.mean()

    A_list, b_list = [], []
    for i in range(m):
        if n == 1:
            spectrum = np.array([1.0])
        else:
            inner = rng.uniform(1.0, kappa_target, size=n - 2)
            spectrum = np.concatenate([[1.0], inner, [kappa_target]])
        Q = _random_rotation(n, rng)
        A = scales[i] * (Q * spectrum) @ Q.T
        A_list.append((A + A.T) / 2.0)
        b_list.append(rng.standard_normal(n))

    problem = make_quadratic_from(A_list, b_list)
    logger.info(f"Quadratic instance: m={m}, n={n}, kappa_g={kappa_target}")
    return problem


def make_logistic_from(Z_list: list[np.ndarray], labels_list: list[np.ndarray],
                       reg_mu: float) -> ProblemInstance:
    nodes = [LogisticNode(Z, y, reg_mu) for Z, y in zip(Z_list, labels_list)]
    return ProblemInstance(name="logistic", node_functions=nodes, dimension=nodes[0].dim)


def make_logistic(m: int, n: int, samples_per_node: int, reg_mu: float,
                  seed: int = 0) -> ProblemInstance:
    """
    ノードごとの ℓ2 正則化ロジスティック損失（合成データ、ほぼ分離可能）。

    Args:
        m (int): ノード数
        n (int): 次元
        samples_per_node (int): ノードあたりのサンプル数
        reg_mu (float): 正則化係数 (≥ 0)
        seed (int): 乱数シード
    """
    if reg_mu < 0.0:
        raise ValueError("reg_mu must be non-negative")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(n)
    Z_list, labels_list = [], []
    for _ in range(m):
        # ノードごとに特徴量の分布をずらして異質性を持たせる
        shift = rng.normal(0.0, 0.5, size=n)
        Z = rng.standard_normal((samples_per_node, n)) + shift
        noise = rng.normal(0.0, 0.5, size=samples_per_node)
        labels = np.where(Z @ w_true + noise >= 0.0, 1.0, -1.0)
        Z_list.append(Z)
        labels_list.append(labels)
    return make_logistic_from(Z_list, labels_list, reg_mu)


def make_nonsmooth(m: int, n: int, kind: str, seed: int = 0,
                   samples_per_node: int = 10, reg: float = 0.1,
                   domain: Optional[Domain] = None) -> ProblemInstance:
    """
    非平滑凸関数のインスタンスを生成する。

    Args:
        m (int): ノード数
        n (int): 次元
        kind (str): "l1_regression" または "hinge"
        seed (int): 乱数シード
        samples_per_node (int): ノードあたりのサンプル数
        reg (float): hinge の ℓ2 正則化係数
        domain (Optional[Domain]): 実行可能領域（既定は全空間）

    Raises:
        ValueError: 未知の種類。
    """
    rng = np.random.default_rng(seed)
    x_true = rng.standard_normal(n)
    nodes: list[Any] = []
    if kind == "l1_regression":
        for _ in range(m):
            A = rng.standard_normal((samples_per_node, n))
            b = A @ x_true + rng.laplace(0.0, 0.3, size=samples_per_node)
            nodes.append(L1RegressionNode(A, b, scale=1.0 / samples_per_node))
    elif kind == "hinge":
        for _ in range(m):
            Z = rng.standard_normal((samples_per_node, n))
            labels = np.where(Z @ x_true + rng.normal(0.0, 0.5, size=samples_per_node) >= 0.0, 1.0, -1.0)
            nodes.append(HingeNode(Z, labels, reg=reg))
    else:
        raise ValueError(f"Unknown nonsmooth kind: {kind}")
    return ProblemInstance(name=kind, node_functions=nodes, domain=domain or Domain(), dimension=n)


# ----------------------------------------------------
# Constants and reference solutions
# ----------------------------------------------------


def compute_constants(problem: ProblemInstance) -> ConstantSummary:
    """
    局所・大域定数を計算する。μ_l = min μ_i, L_l = max L_i, μ_g, L_g は平均。
    """
    mus = np.array([f.mu for f in problem.node_functions], dtype=float)
    Ls = np.array([f.L for f in problem.node_functions], dtype=float)
    mu_l, L_l = float(mus.min()), float(Ls.max())
    mu_g, L_g = float(mus.mean()), float(Ls.mean())
    return ConstantSummary(
        mu_l=mu_l,
        L_l=L_l,
        mu_g=mu_g,
        L_g=L_g,
        kappa_l=L_l / mu_l if mu_l > 0.0 else math.inf,
        kappa_g=L_g / mu_g if mu_g > 0.0 else math.inf,
        lipschitz=float(max(f.lipschitz for f in problem.node_functions)),
    )


def _project(domain: Domain, x: np.ndarray) -> np.ndarray:
    if domain.kind == "box":
        return np.clip(x, domain.lower, domain.upper)
    if domain.kind == "simplex":
        return project_simplex(x)
    return x


def _initial_point(domain: Domain, n: int) -> np.ndarray:
    if domain.kind == "simplex":
        return np.full(n, 1.0 / n)
    if domain.kind == "box":
        return np.full(n, 0.5 * (domain.lower + domain.upper))
    return np.zeros(n)


def _solve_smooth(problem: ProblemInstance, tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    # 射影付き加速勾配法（関数値増加で再始動）
    L = float(sum(f.L for f in problem.node_functions))
    mu = float(sum(f.mu for f in problem.node_functions))
    step = 1.0 / L
    if mu > 0.0:
        q = math.sqrt(mu / L)
        momentum = (1.0 - q) / (1.0 + q)
    x = _initial_point(problem.domain, problem.dimension)
    y = x.copy()
    t = 1.0
    f_prev = problem.objective(x)
    residual = math.inf
    for _ in range(max_iter):
        g = problem.objective_gradient(y)
        x_next = _project(problem.domain, y - step * g)
        f_next = problem.objective(x_next)
        if f_next > f_prev:
            y, t = x.copy(), 1.0
            continue
        if mu > 0.0:
            beta = momentum
        else:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            beta = (t - 1.0) / t_next
            t = t_next
        y = x_next + beta * (x_next - x)
        x, f_prev = x_next, f_next
        g_x = problem.objective_gradient(x)
        residual = L * float(np.linalg.norm(x - _project(problem.domain, x - step * g_x)))
        if residual <= tol:
            break
    return x, residual


def _solve_nonsmooth(problem: ProblemInstance, tol: float, max_iter: int,
                     radius: float) -> tuple[np.ndarray, float, float]:
    # 正規化劣勾配法。ブロックごとの最良値の改善量を停滞の目安にする
    x = _initial_point(problem.domain, problem.dimension)
    best_x, best_f = x.copy(), problem.objective(x)
    block = 10_000
    block_start_f = best_f
    stagnation = math.inf
    for k in range(max_iter):
        g = problem.objective_gradient(x)
        g_norm = float(np.linalg.norm(g))
        if g_norm == 0.0:
            return x, problem.objective(x), 0.0
        x = _project(problem.domain, x - (radius / math.sqrt(k + 1.0)) * g / g_norm)
        fx = problem.objective(x)
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        if (k + 1) % block == 0:
            stagnation = block_start_f - best_f
            if stagnation <= tol / 10.0:
                break
            block_start_f = best_f
    return best_x, best_f, stagnation


def solve_reference(problem: ProblemInstance, tol: Optional[float] = None, strict: bool = True,
                    max_iter: Optional[int] = None, radius: float = 1.0) -> ReferenceSolution:
    """
    集中型の高精度参照解を求める。
    二次関数（全空間）は閉形式 (ΣA_i)⁻¹Σb_i、平滑関数は射影付き加速勾配法、
    非平滑関数は劣勾配法（最良値を採用）。

    Args:
        problem (ProblemInstance): 問題
        tol (Optional[float]): 要求精度（既定: 平滑 1e-10、非平滑 1e-4）
        strict (bool): 認証できなければ例外を送出するか
        max_iter (Optional[int]): 反復上限（既定: 平滑 2e5、非平滑 1e6）
        radius (float): 劣勾配法のステップ尺度

    Returns:
        ReferenceSolution: 参照解

    Raises:
        CertificationError: strict=True で許容誤差を満たせない場合。
    """
    nodes = problem.node_functions
    if problem.domain.kind == "all" and all(isinstance(f, QuadraticNode) for f in nodes):
        tol = SMOOTH_REFERENCE_TOL if tol is None else tol
        A = sum(f.A for f in nodes)
        b = sum(f.b for f in nodes)
        x = np.linalg.solve(A, b)
        residual = float(np.linalg.norm(A @ x - b))
        certified = residual <= tol * max(1.0, float(np.linalg.norm(b)))
        ref = ReferenceSolution(x_star=x, f_star=problem.objective(x),
                                method_note="closed form (sum A_i)^-1 sum b_i",
                                tolerance=residual, certified=certified)
    elif problem.smooth:
        tol = SMOOTH_REFERENCE_TOL if tol is None else tol
        x, residual = _solve_smooth(problem, tol, max_iter or 200_000)
        ref = ReferenceSolution(x_star=x, f_star=problem.objective(x),
                                method_note="restarted accelerated projected gradient",
                                tolerance=residual, certified=residual <= tol)
    else:
        tol = NONSMOOTH_REFERENCE_TOL if tol is None else tol
        x, f_best, stagnation = _solve_nonsmooth(problem, tol, max_iter or 1_000_000, radius)
        ref = ReferenceSolution(x_star=x, f_star=f_best,
                                method_note="normalized subgradient method, best iterate",
                                tolerance=stagnation, certified=stagnation <= tol)

    if not ref.certified:
        message = f"Reference for '{problem.name}' not certified (residual {ref.tolerance:.3e} > {tol:.1e})"
        if strict:
            raise CertificationError(message)
        logger.warning(message)
    return ref


# ----------------------------------------------------
# Bundle serialization
# ----------------------------------------------------


def save_bundle(problem: ProblemInstance, directory: str | Path) -> Path:
    """
    問題インスタンスを CSV 行列群と YAML マニフェストとして保存する。

    Returns:
        Path: マニフェストのパス
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, f in enumerate(problem.node_functions):
        if isinstance(f, QuadraticNode):
            arrays = {"A": f.A, "b": f.b}
            entry = {"type": "quadratic"}
        elif isinstance(f, LogisticNode):
            arrays = {"Z": f.Z, "labels": f.labels}
            entry = {"type": "logistic", "reg": f.reg}
        elif isinstance(f, L1RegressionNode):
            arrays = {"A": f.A, "b": f.b}
            entry = {"type": "l1_regression", "scale": f.scale}
        elif isinstance(f, HingeNode):
            arrays = {"Z": f.Z, "labels": f.labels}
            entry = {"type": "hinge", "reg": f.reg}
        else:
            raise ValueError(f"Node type {type(f).__name__} is not serializable")
        files = {}
        for key, arr in arrays.items():
            name = f"node{i}_{key}.csv"
            save_matrix_csv(directory / name, np.atleast_2d(arr))
            files[key] = name
        entry["files"] = files
        entries.append(entry)

    manifest = {
        "name": problem.name,
        "dimension": problem.dimension,
        "domain": problem.domain.model_dump(),
        "nodes": entries,
    }
    path = directory / "manifest.yaml"
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return path


def load_bundle(directory: str | Path) -> ProblemInstance:
    """save_bundle で保存したインスタンスを読み込む。"""
    directory = Path(directory)
    with open(directory / "manifest.yaml", "r", encoding="utf-8") as fh:
        manifest = yaml.safe_load(fh)

    def vec(name: str) -> np.ndarray:
        return load_matrix_csv(directory / name).ravel()

    nodes: list[Any] = []
    for entry in manifest["nodes"]:
        files = entry["files"]
        kind = entry["type"]
        if kind == "quadratic":
            nodes.append(QuadraticNode(load_matrix_csv(directory / files["A"]), vec(files["b"])))
        elif kind == "logistic":
            nodes.append(LogisticNode(load_matrix_csv(directory / files["Z"]), vec(files["labels"]), entry["reg"]))
        elif kind == "l1_regression":
            nodes.append(L1RegressionNode(load_matrix_csv(directory / files["A"]), vec(files["b"]), entry["scale"]))
        elif kind == "hinge":
            nodes.append(HingeNode(load_matrix_csv(directory / files["Z"]), vec(files["labels"]), entry["reg"]))
        else:
            raise ValueError(f"Unknown node type in bundle: {kind}")
    return ProblemInstance(name=manifest["name"], node_functions=nodes,
                           domain=Domain(**manifest["domain"]), dimension=manifest["dimension"])
