# src/sliding_algos.py
import logging
import math
from typing import Any, Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.consensus import Communicator
from src.interfaces import BregmanGeometry, NodeFunction
from src.models import RunRecord
from src.netgraph import spectral_summary
from src.oracle import OracleSuite, estimate_p_star, two_point_estimate
from src.primal_algos import RunTracer, StepObserver
from src.problems import ProblemInstance, StackedFunction
from src.run_guard import RunGuard

logger = logging.getLogger(__name__)

# 内側反復数 T_k の既定定数と上限
DEFAULT_INNER_CONSTANT = 0.1
INNER_STEPS_CAP = 100_000


# ----------------------------------------------------
# Composite objectives
# ----------------------------------------------------


class Composite:
    """
    Ψ(x) = h(x) + f(x)。h は L-平滑（∇h を外側1反復に1回呼ぶ）、f は非平滑で
    OracleSuite（劣勾配・確率的劣勾配・ゼロ次）経由でのみ参照する。

    Attributes:
        L (float): h の平滑度
        mu (float): h の強凸度（0 可）
        nonsmooth (OracleSuite): f のオラクル
        shape (tuple): トレース記録時の状態の形（ペナルティ化問題では (m, n)）
        communicator (Optional[Communicator]): ∇h の通信ラウンド計数器
    """

    def __init__(self, smooth_value: Callable[[np.ndarray], float],
                 smooth_gradient: Callable[[np.ndarray], np.ndarray], L: float,
                 nonsmooth: OracleSuite, mu: float = 0.0, shape: Optional[tuple] = None,
                 communicator: Optional[Communicator] = None):
        self.smooth_value = smooth_value
        self._smooth_gradient = smooth_gradient
        self.L = RunGuard.validate_step("L", L)
        self.mu = mu
        self.nonsmooth = nonsmooth
        self.dim = nonsmooth.dim
        self.shape = shape or (self.dim,)
        self.communicator = communicator
        self.smooth_calls = 0

    @classmethod
    def from_functions(cls, smooth: NodeFunction, nonsmooth: OracleSuite) -> "Composite":
        """平滑な NodeFunction と非平滑部のオラクルから合成する。"""
        return cls(smooth.value, smooth.gradient, smooth.L, nonsmooth, mu=smooth.mu)

    def smooth_gradient(self, x: np.ndarray) -> np.ndarray:
        self.smooth_calls += 1
        return self._smooth_gradient(x)

    def value(self, x: np.ndarray) -> float:
        return float(self.smooth_value(x) + self.nonsmooth.function.value(x))

    @property
    def comm_rounds(self) -> int:
        return self.communicator.rounds if self.communicator is not None else 0


class PenaltyProblem(BaseModel):
    """
    ペナルティ化問題 min f(x) + (R_y²/ε)‖Ax‖²。

    Attributes:
        problem (ProblemInstance): 元の分散問題（f は積み上げた Σ f_i）
        A (np.ndarray): 制約行列（√W）
        gram (np.ndarray): AᵀA
        coefficient (float): ペナルティ係数 R_y²/ε
        L (float): h の平滑度 2(R_y²/ε)λ_max(AᵀA)
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    problem: ProblemInstance
    A: np.ndarray
    gram: np.ndarray
    coefficient: float = Field(gt=0.0)
    L: float = Field(gt=0.0)
    R_y: float
    eps: float

    def penalty_value(self, x: np.ndarray) -> float:
        """h(x) = (R_y²/ε)‖Ax‖²"""
        Ax = self.A @ x
        return self.coefficient * float(Ax @ Ax)

    def composite(self, sigma: float = 0.0, delta: float = 0.0, Delta: float = 0.0,
                  communicator: Optional[Communicator] = None) -> Composite:
        """
        Sliding 用の合成目的関数を作る。∇h = 2(R_y²/ε)AᵀAx の計算ごとに1通信ラウンド。
        """
        comm = communicator or Communicator(self.gram)
        coefficient = self.coefficient

        def gradient(x: np.ndarray) -> np.ndarray:
            return 2.0 * coefficient * comm.mix(x, comm.rounds)

        suite = OracleSuite(StackedFunction(self.problem), sigma=sigma, delta=delta, Delta=Delta)
        return Composite(self.penalty_value, gradient, self.L, suite,
                         shape=(self.problem.m, self.problem.dimension), communicator=comm)


def dual_radius_bound(M: float, m: int, lambda_min_plus: float) -> float:
    """
    双対解ノルムの上界 R_y = √(M²/(m λ⁺_min(W)))。

    Raises:
        ValueError: M が有限でない、または λ⁺_min ≤ 0。
    """
    if not math.isfinite(M) or lambda_min_plus <= 0.0:
        raise ValueError(f"R_y bound needs finite M and lambda_min_plus > 0 (got {M}, {lambda_min_plus})")
    return math.sqrt(M * M / (m * lambda_min_plus))


def make_penalty(problem: ProblemInstance, A: np.ndarray, R_y: Optional[float], eps: float) -> PenaltyProblem:
    """
    ペナルティ化問題を作る。R_y が None なら M と λ⁺_min(AᵀA) による上界を使う。

    Args:
        problem (ProblemInstance): 分散問題
        A (np.ndarray): √W（mn×mn、対称半正定値）
        R_y (Optional[float]): 双対解ノルム
        eps (float): 目標精度 ε > 0
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive (got {eps})")
    A = np.asarray(A, dtype=float)
    dim = problem.m * problem.dimension
    if A.shape != (dim, dim):
        raise ValueError(f"Penalty matrix must be {dim}x{dim} (got {A.shape})")
    gram = A.T @ A
    gram = (gram + gram.T) / 2.0
    summary = spectral_summary(gram, "laplacian")
    if R_y is None:
        R_y = dual_radius_bound(StackedFunction(problem).lipschitz, problem.m, summary.lambda_min_plus)
    coefficient = R_y * R_y / eps
    L = 2.0 * coefficient * summary.lambda_max
    logger.info(f"Penalty: R_y={R_y:.3e}, coefficient={coefficient:.3e}, L={L:.3e}")
    return PenaltyProblem(problem=problem, A=A, gram=gram, coefficient=coefficient, L=L, R_y=R_y, eps=eps)


# ----------------------------------------------------
# Schedules
# ----------------------------------------------------


class SlidingSchedule(BaseModel):
    """
    Sliding 系のパラメータ列。

        p_t = t/2,  θ_t = 2(t+1)/(t(t+3)),  β_k = 2L/k,  γ_k = 2/(k+1)
        T_k = ⌈C·N·Q·k²/(D̃·L²)⌉  （[1, cap] に丸める）

    Q は内側オラクルの2次モーメント項（1次: M² + σ²、ゼロ次: p*²(nM² + n²Δ²/r²)）。
    """
    L: float = Field(gt=0.0)
    N: int = Field(ge=1)
    D_tilde: float = Field(gt=0.0)
    Q: float = Field(ge=0.0)
    C: float = Field(default=DEFAULT_INNER_CONSTANT, gt=0.0)
    cap: int = Field(default=INNER_STEPS_CAP, ge=1)

    @staticmethod
    def p(t: int) -> float:
        return t / 2.0

    @staticmethod
    def theta(t: int) -> float:
        return 2.0 * (t + 1) / (t * (t + 3))

    def beta(self, k: int) -> float:
        return 2.0 * self.L / k

    @staticmethod
    def gamma(k: int) -> float:
        return 2.0 / (k + 1)

    def inner_steps(self, k: int) -> int:
        raw = self.C * self.N * self.Q * k * k / (self.D_tilde * self.L ** 2)
        return int(min(self.cap, max(1, math.ceil(raw))))


def sliding_iterations(L: float, D: float, eps: float) -> int:
    """外側反復数 N(ε) = ⌈√(12LD²/ε)⌉。"""
    return max(1, math.ceil(math.sqrt(12.0 * L * D * D / eps)))


# ----------------------------------------------------
# Core loop
# ----------------------------------------------------


InnerOracle = Callable[[np.ndarray], np.ndarray]


def _composite_tracer(algorithm: str, composite: Composite, f_star: Optional[float],
                      guard: Optional[RunGuard], eps: Optional[float]) -> RunTracer:
    return RunTracer(algorithm, lambda X: composite.value(np.ravel(X)),
                     0.0 if f_star is None else f_star, guard, eps)


class _SlidingRun:
    """Sliding 系の外側ループと PS 手続き。複数フェーズで1つのトレースを共有できる。"""

    def __init__(self, composite: Composite, geometry: BregmanGeometry, tracer: RunTracer,
                 zeroth_order: bool = False, on_step: Optional[StepObserver] = None):
        self.composite = composite
        self.geometry = geometry
        self.tracer = tracer
        self.zeroth_order = zeroth_order
        self.on_step = on_step
        self.iteration = 0

    def _log(self, x_bar: np.ndarray) -> bool:
        counters = self.composite.nonsmooth.counters
        inner = counters["zeroth_order"] if self.zeroth_order else \
            counters["gradient"] + counters["stochastic_gradient"]
        return self.tracer.log(
            self.iteration,
            np.reshape(x_bar, self.composite.shape),
            self.composite.comm_rounds,
            inner,
            zo_calls=counters["zeroth_order"],
            smooth_grad_calls=self.composite.smooth_calls,
        )

    def prox_sliding(self, linear_h: np.ndarray, x: np.ndarray, beta: float, T: int,
                     schedule: SlidingSchedule, inner: InnerOracle) -> tuple[np.ndarray, np.ndarray]:
        """PS 手続き。(u_T, ũ_T) を返す。"""
        u = x.copy()
        u_tilde = x.copy()
        for t in range(1, T + 1):
            g = inner(u)
            u = self.geometry.prox_step(linear_h + g, beta, x, schedule.p(t), u)
            theta = schedule.theta(t)
            u_tilde = (1.0 - theta) * u_tilde + theta * u
        return u, u_tilde

    def run(self, x0: np.ndarray, schedule: SlidingSchedule, inner: InnerOracle) -> tuple[np.ndarray, bool]:
        """
        外側ループを N 回実行し (x̄_N, 停止条件到達) を返す。
        """
        x = np.array(x0, dtype=float, copy=True)
        x_bar = x.copy()
        if self.iteration == 0 and not self.tracer.record.rows:
            if self._log(x_bar):
                return x_bar, True
        reached = False
        for k in range(1, schedule.N + 1):
            gamma = schedule.gamma(k)
            x_low = (1.0 - gamma) * x_bar + gamma * x
            linear_h = self.composite.smooth_gradient(x_low)
            x, x_tilde = self.prox_sliding(linear_h, x, schedule.beta(k), schedule.inner_steps(k),
                                           schedule, inner)
            x_bar = (1.0 - gamma) * x_bar + gamma * x_tilde
            self.iteration += 1
            if self.on_step:
                self.on_step(self.iteration, {"x": x, "x_bar": x_bar, "x_low": x_low})
            reached = self._log(x_bar)
            if reached:
                break
        return x_bar, reached


def _inner_moment(composite: Composite) -> float:
    M = composite.nonsmooth.function.lipschitz
    if not math.isfinite(M):
        raise ValueError("Sliding needs a finite subgradient bound M for the nonsmooth part")
    return M * M + composite.nonsmooth.sigma ** 2


def _distance_bound(geometry: BregmanGeometry, D: Optional[float]) -> float:
    D = geometry.divergence_diameter if D is None else D
    if not math.isfinite(D) or D <= 0.0:
        raise ValueError("Sliding on an unbounded domain needs an explicit distance bound D")
    return D


# ----------------------------------------------------
# First-order sliding family
# ----------------------------------------------------


def sliding(composite: Composite, geometry: BregmanGeometry, x0: np.ndarray, N: int,
            D: Optional[float] = None, C: float = DEFAULT_INNER_CONSTANT,
            f_star: Optional[float] = None, guard: Optional[RunGuard] = None,
            eps: Optional[float] = None, on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    Sliding 法。外側1反復で ∇h を1回、PS の内側1反復で f の劣勾配を1回呼ぶ。

    Args:
        composite (Composite): Ψ = h + f
        geometry (BregmanGeometry): prox 幾何
        x0 (np.ndarray): 初期点（Q 内）
        N (int): 外側反復数
        D (Optional[float]): 距離の上界（既定は幾何の D_{Q,V}）。D̃ = 3D²/4
        C (float): T_k の定数
        f_star (Optional[float]): Ψ* （None ならトレースの f_residual は Ψ そのもの）

    Returns:
        RunRecord: トレース（grad_calls は f の劣勾配呼び出し数）
    """
    return _first_order_sliding("sliding", composite, geometry, x0, N, D, C, f_star, guard, eps,
                                on_step, rng=None)


def s_sliding(composite: Composite, geometry: BregmanGeometry, x0: np.ndarray, N: int,
              seed: int = 0, batch: int = 1, D: Optional[float] = None,
              C: float = DEFAULT_INNER_CONSTANT, f_star: Optional[float] = None,
              guard: Optional[RunGuard] = None, eps: Optional[float] = None,
              on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    確率的 Sliding。PS ステップで確率的劣勾配（ノイズ水準は composite.nonsmooth.sigma）を使う。
    σ = 0 では乱数を消費せず sliding と同じ軌道になる。
    """
    rng = np.random.default_rng(seed)
    return _first_order_sliding("s_sliding", composite, geometry, x0, N, D, C, f_star, guard, eps,
                                on_step, rng=rng, batch=batch)


def _first_order_sliding(algorithm: str, composite: Composite, geometry: BregmanGeometry,
                         x0: np.ndarray, N: int, D: Optional[float], C: float,
                         f_star: Optional[float], guard: Optional[RunGuard], eps: Optional[float],
                         on_step: Optional[StepObserver], rng: Optional[np.random.Generator],
                         batch: int = 1) -> RunRecord:
    RunGuard.validate_budget("N", N)
    D = _distance_bound(geometry, D)
    schedule = SlidingSchedule(L=composite.L, N=N, D_tilde=0.75 * D * D, Q=_inner_moment(composite), C=C)
    suite = composite.nonsmooth
    if rng is None:
        inner = suite.gradient
    else:
        def inner(u: np.ndarray) -> np.ndarray:
            return suite.stochastic_gradient(u, rng, batch)

    tracer = _composite_tracer(algorithm, composite, f_star, guard, eps)
    runner = _SlidingRun(composite, geometry, tracer, on_step=on_step)
    x_bar, reached = runner.run(x0, schedule, inner)
    return tracer.finish(np.reshape(x_bar, composite.shape), reached)


def rs_phase_iterations(L: float, mu: float) -> int:
    """距離の2乗を半減させる1フェーズの反復数 ⌈√(48L/μ)⌉。"""
    return max(1, math.ceil(math.sqrt(48.0 * L / mu)))


def rs_sliding(composite: Composite, geometry: BregmanGeometry, x0: np.ndarray, phases: int,
               mu: Optional[float] = None, R0: Optional[float] = None, seed: int = 0, batch: int = 1,
               C: float = DEFAULT_INNER_CONSTANT, f_star: Optional[float] = None,
               guard: Optional[RunGuard] = None, eps: Optional[float] = None,
               phase_iterations: Optional[int] = None,
               on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    再始動付き確率的 Sliding。フェーズ j では距離上界 R_j² = R0²/2^j で s_sliding を
    N = ⌈√(48L/μ)⌉ 反復走らせ、出力 x̄ から次のフェーズを始める。

    Args:
        phases (int): フェーズ数
        mu (Optional[float]): 強凸度（既定 composite.mu）
        R0 (Optional[float]): 初期距離上界（既定は幾何の直径 D_Q）

    Raises:
        ValueError: μ ≤ 0 または領域が有界でない場合。
    """
    mu = composite.mu if mu is None else mu
    if mu <= 0.0:
        raise ValueError("rs_sliding needs mu > 0")
    R0 = _distance_bound(geometry, geometry.diameter if R0 is None else R0)
    RunGuard.validate_budget("phases", phases)
    N = phase_iterations or rs_phase_iterations(composite.L, mu)
    Q = _inner_moment(composite)
    rng = np.random.default_rng(seed)
    suite = composite.nonsmooth

    def inner(u: np.ndarray) -> np.ndarray:
        return suite.stochastic_gradient(u, rng, batch)

    tracer = _composite_tracer("rs_sliding", composite, f_star, guard, eps)
    runner = _SlidingRun(composite, geometry, tracer, on_step=on_step)
    x = np.array(x0, dtype=float, copy=True)
    reached = False
    for j in range(phases):
        D_j_sq = R0 * R0 / 2.0 ** j
        schedule = SlidingSchedule(L=composite.L, N=N, D_tilde=0.75 * D_j_sq, Q=Q, C=C)
        x, reached = runner.run(x, schedule, inner)
        tracer.record.phase_values.append(tracer.record.last.f_residual)
        logger.info(f"rs_sliding phase {j}: residual={tracer.record.last.f_residual:.3e}")
        if reached:
            break
    return tracer.finish(np.reshape(x, composite.shape), reached)


# ----------------------------------------------------
# Zeroth-order sliding family
# ----------------------------------------------------


def _zeroth_order_inner(composite: Composite, geometry: BregmanGeometry, r: float,
                        rng: np.random.Generator) -> InnerOracle:
    """
    二点推定による内側オラクル。境界付近では中心方向に (1 − r/D_Q) 倍縮めた点で評価する。
    """
    suite = composite.nonsmooth
    center = geometry.center(composite.dim)
    shrink = 1.0 - r / geometry.diameter if math.isfinite(geometry.diameter) else 1.0

    def inner(u: np.ndarray) -> np.ndarray:
        point = center + shrink * (u - center)
        return two_point_estimate(suite, point, r, rng).estimate

    return inner


def zo_inner_moment(composite: Composite, r: float, p_star: float) -> float:
    """Q = p*²(nM² + n²Δ²/r²)"""
    n = composite.dim
    M = composite.nonsmooth.function.lipschitz
    if not math.isfinite(M):
        raise ValueError("Zeroth-order sliding needs a finite subgradient bound M")
    Delta = composite.nonsmooth.Delta
    return p_star ** 2 * (n * M * M + (n * Delta / r) ** 2)


def _check_prox_geometry(geometry: Any) -> None:
    if not hasattr(geometry, "prox_step"):
        raise ValueError(f"Geometry {type(geometry).__name__} has no closed-form prox step")


def zo_sliding(composite: Composite, geometry: BregmanGeometry, x0: np.ndarray, N: int, r: float,
               seed: int = 0, D_tilde: Optional[float] = None, p_star: Optional[float] = None,
               C: float = DEFAULT_INNER_CONSTANT, f_star: Optional[float] = None,
               guard: Optional[RunGuard] = None, eps: Optional[float] = None,
               on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    ゼロ次 Sliding。PS の内側1反復で二点推定（ゼロ次オラクル2回、e_t と ξ_t は独立）を使う。

    Args:
        r (float): 平滑化半径
        D_tilde (Optional[float]): D̃（既定 3D²_{Q,V}/4）
        p_star (Optional[float]): p*（既定はモンテカルロ推定）
    """
    _check_prox_geometry(geometry)
    RunGuard.validate_step("r", r)
    RunGuard.validate_budget("N", N)
    if D_tilde is None:
        D_tilde = 0.75 * _distance_bound(geometry, None) ** 2
    if p_star is None:
        p_star = estimate_p_star(composite.dim, geometry.dual_norm)
    rng = np.random.default_rng(seed)
    schedule = SlidingSchedule(L=composite.L, N=N, D_tilde=D_tilde,
                               Q=zo_inner_moment(composite, r, p_star), C=C)
    tracer = _composite_tracer("zo_sliding", composite, f_star, guard, eps)
    runner = _SlidingRun(composite, geometry, tracer, zeroth_order=True, on_step=on_step)
    x_bar, reached = runner.run(x0, schedule, _zeroth_order_inner(composite, geometry, r, rng))
    return tracer.finish(np.reshape(x_bar, composite.shape), reached)


def m_zo_phase_iterations(L: float, mu: float) -> int:
    """N₀ = 2⌈√(5L/μ)⌉"""
    return 2 * math.ceil(math.sqrt(5.0 * L / mu))


def m_zo_sliding(composite: Composite, geometry: BregmanGeometry, x0: np.ndarray, phases: int,
                 r: float, mu: Optional[float] = None, rho0: Optional[float] = None,
                 f_star: Optional[float] = None, seed: int = 0, p_star: Optional[float] = None,
                 C: float = DEFAULT_INNER_CONSTANT, guard: Optional[RunGuard] = None,
                 eps: Optional[float] = None, on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    多段ゼロ次 Sliding。フェーズ i = 1..I で y_{i−1} から zo_sliding を N₀ 反復、
    D̃ = ρ₀/(μ2^i) で走らせる。各フェーズ終了時の Ψ(y_i) − Ψ* を phase_values に記録する。

    Args:
        phases (int): フェーズ数 I
        mu (Optional[float]): h の強凸度（Bregman 意味、既定 composite.mu）
        rho0 (Optional[float]): Ψ(y₀) − Ψ* の上界（既定は f_star から計算）

    Raises:
        ValueError: μ ≤ 0、または rho0 も f_star も与えられない場合。
    """
    _check_prox_geometry(geometry)
    mu = composite.mu if mu is None else mu
    if mu <= 0.0:
        raise ValueError("m_zo_sliding needs mu > 0")
    if rho0 is None:
        if f_star is None:
            raise ValueError("m_zo_sliding needs rho0 or a reference value f_star")
        rho0 = composite.value(np.asarray(x0, dtype=float)) - f_star
    rho0 = RunGuard.validate_step("rho0", rho0)
    RunGuard.validate_step("r", r)
    if p_star is None:
        p_star = estimate_p_star(composite.dim, geometry.dual_norm)
    N0 = m_zo_phase_iterations(composite.L, mu)
    Q = zo_inner_moment(composite, r, p_star)
    rng = np.random.default_rng(seed)
    inner = _zeroth_order_inner(composite, geometry, r, rng)

    tracer = _composite_tracer("m_zo_sliding", composite, f_star, guard, eps)
    runner = _SlidingRun(composite, geometry, tracer, zeroth_order=True, on_step=on_step)
    y = np.array(x0, dtype=float, copy=True)
    reached = False
    for i in range(1, phases + 1):
        schedule = SlidingSchedule(L=composite.L, N=N0, D_tilde=rho0 / (mu * 2.0 ** i), Q=Q, C=C)
        y, reached = runner.run(y, schedule, inner)
        tracer.record.phase_values.append(tracer.record.last.f_residual)
        logger.info(f"m_zo_sliding phase {i}: residual={tracer.record.last.f_residual:.3e}")
        if reached:
            break
    return tracer.finish(np.reshape(y, composite.shape), reached)
