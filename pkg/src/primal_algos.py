# src/primal_algos.py
import logging
import math
from typing import Any, Callable, Optional

import numpy as np

from src.consensus import (
    Communicator,
    MixingLike,
    consensus_error,
    estimate_contraction,
    mean_projection,
    run_consensus,
)
from src.errors import DivergenceError
from src.models import ConstantSummary, InexactOracleParams, ReferenceSolution, RunRecord, IterationRecord
from src.problems import ProblemInstance, compute_constants, solve_reference, stack_gradient
from src.run_guard import RunGuard

logger = logging.getLogger(__name__)

StepObserver = Callable[[int, dict[str, Any]], None]


# ----------------------------------------------------
# Trace recording
# ----------------------------------------------------


class RunTracer:
    """
    反復ごとの指標を RunRecord に記録し、発散ガードと停止判定を行う。

    objective は状態行列から目的関数値を返す関数（主問題系では平均点 x̄ での f）。
    """

    def __init__(self, algorithm: str, objective: Callable[[np.ndarray], float], f_star: float,
                 guard: Optional[RunGuard] = None, eps: Optional[float] = None):
        self.algorithm = algorithm
        self.objective = objective
        self.f_star = f_star
        self.guard = guard or RunGuard()
        self.eps = eps
        self.record = RunRecord(algorithm=algorithm)

    def log(self, k: int, X: np.ndarray, comm_rounds: int, grad_calls: int,
            zo_calls: Optional[int] = None, smooth_grad_calls: Optional[int] = None) -> bool:
        """
        1反復分を記録する。

        Returns:
            bool: 停止条件（f_residual ≤ eps かつ consensus_error ≤ eps）を満たしたか

        Raises:
            DivergenceError: 発散ガードに掛かった場合（それまでのトレースを添付）。
        """
        try:
            self.guard.check(X, k, self.algorithm, self.record)
        except DivergenceError:
            self.record.status = "DIVERGED"
            self.record.final_iterate = X
            raise
        cons = consensus_error(X) if X.ndim == 2 else 0.0
        row = IterationRecord(
            iter=k,
            comm_rounds=comm_rounds,
            grad_calls=grad_calls,
            f_residual=float(self.objective(X) - self.f_star),
            consensus_error=cons,
            zo_calls=zo_calls,
            smooth_grad_calls=smooth_grad_calls,
        )
        self.record.rows.append(row)
        return self.eps is not None and row.f_residual <= self.eps and row.consensus_error <= self.eps

    def finish(self, X: np.ndarray, converged: bool) -> RunRecord:
        self.record.final_iterate = X
        self.record.status = "CONVERGED" if converged else "BUDGET_EXHAUSTED"
        last = self.record.rows[-1]
        logger.info(
            f"{self.algorithm}: {self.record.status} after {last.iter} iterations "
            f"(f_residual={last.f_residual:.3e}, comm_rounds={last.comm_rounds})"
        )
        return self.record


def _primal_tracer(algorithm: str, problem: ProblemInstance, reference: Optional[ReferenceSolution],
                   guard: Optional[RunGuard], eps: Optional[float]) -> RunTracer:
    ref = reference if reference is not None else solve_reference(problem, strict=False)
    return RunTracer(algorithm, lambda X: problem.objective(X.mean(axis=0)), ref.f_star, guard, eps)


def _initial_state(problem: ProblemInstance, X0: Optional[np.ndarray]) -> np.ndarray:
    if X0 is None:
        return np.zeros((problem.m, problem.dimension))
    return np.array(X0, dtype=float, copy=True)


# ----------------------------------------------------
# DGD
# ----------------------------------------------------


def dgd(problem: ProblemInstance, M: MixingLike, alpha: Optional[float] = None,
        X0: Optional[np.ndarray] = None, budget: int = 1000,
        reference: Optional[ReferenceSolution] = None, guard: Optional[RunGuard] = None,
        eps: Optional[float] = None, communicator: Optional[Communicator] = None,
        on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    分散勾配降下 X^{k+1} = MX^k − α∇F(X^k)。
    固定ステップでは厳密解に収束せず、α に比例する水準で停滞する。

    Args:
        problem (ProblemInstance): 問題
        M (MixingLike): 混合行列（または時変の混合行列源）
        alpha (Optional[float]): ステップ幅（既定 1/(2L_l)、0 なら純粋な合意反復）
        X0 (Optional[np.ndarray]): 初期状態（既定 0）
        budget (int): 反復回数
        reference (Optional[ReferenceSolution]): 参照解（省略時は計算する）
        guard (Optional[RunGuard]): 発散ガード
        eps (Optional[float]): 停止精度（None なら予算まで回す）
        communicator (Optional[Communicator]): 通信ラウンド計数器
        on_step (Optional[StepObserver]): 反復ごとのコールバック

    Returns:
        RunRecord: 実行トレース
    """
    if alpha is None:
        alpha = 1.0 / (2.0 * compute_constants(problem).L_l)
    if alpha < 0.0 or not math.isfinite(alpha):
        raise ValueError(f"alpha must be non-negative (got {alpha})")
    RunGuard.validate_budget("budget", budget)
    comm = communicator or Communicator(M)
    tracer = _primal_tracer("dgd", problem, reference, guard, eps)
    X = _initial_state(problem, X0)
    grad_calls = 0
    reached = tracer.log(0, X, comm.rounds, grad_calls)

    for k in range(budget):
        if reached:
            break
        G = stack_gradient(problem, X)
        grad_calls += 1
        X = comm.mix(X, k) - alpha * G
        if on_step:
            on_step(k + 1, {"X": X})
        reached = tracer.log(k + 1, X, comm.rounds, grad_calls)
    return tracer.finish(X, reached)


# ----------------------------------------------------
# EXTRA
# ----------------------------------------------------


def extra(problem: ProblemInstance, M: MixingLike, alpha: Optional[float] = None,
          X0: Optional[np.ndarray] = None, budget: int = 1000,
          reference: Optional[ReferenceSolution] = None, guard: Optional[RunGuard] = None,
          eps: Optional[float] = None, communicator: Optional[Communicator] = None,
          on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    EXTRA（M̃ = (I+M)/2）。
    X¹ = MX⁰ − α∇F(X⁰)、
    X^{k+2} = (I+M)X^{k+1} − M̃X^k − α[∇F(X^{k+1}) − ∇F(X^k)]。
    MX^k を前の反復から持ち越すので1反復あたり1通信ラウンド。

    Args:
        alpha (Optional[float]): ステップ幅（既定 1/L_l）
        その他は dgd と同じ。
    """
    if alpha is None:
        alpha = 1.0 / compute_constants(problem).L_l
    alpha = RunGuard.validate_step("alpha", alpha)
    RunGuard.validate_budget("budget", budget)
    comm = communicator or Communicator(M)
    tracer = _primal_tracer("extra", problem, reference, guard, eps)

    X_prev = _initial_state(problem, X0)
    reached = tracer.log(0, X_prev, comm.rounds, 0)
    if reached:
        return tracer.finish(X_prev, True)

    G_prev = stack_gradient(problem, X_prev)
    MX_prev = comm.mix(X_prev, 0)
    X = MX_prev - alpha * G_prev
    grad_calls = 1
    if on_step:
        on_step(1, {"X": X, "grad": G_prev, "X_prev": X_prev})
    reached = tracer.log(1, X, comm.rounds, grad_calls)

    for k in range(1, budget):
        if reached:
            break
        G = stack_gradient(problem, X)
        grad_calls += 1
        MX = comm.mix(X, k)
        tilde = 0.5 * (X_prev + MX_prev)
        X_next = X + MX - tilde - alpha * (G - G_prev)
        X_prev, MX_prev, G_prev, X = X, MX, G, X_next
        if on_step:
            on_step(k + 1, {"X": X, "grad": G_prev, "X_prev": X_prev})
        reached = tracer.log(k + 1, X, comm.rounds, grad_calls)
    return tracer.finish(X, reached)


def extra_fixed_point_gap(problem: ProblemInstance, M: np.ndarray, X: np.ndarray, alpha: float) -> float:
    """
    EXTRA を累積形 X^{k+1} = MX^k − α∇F(X^k) − S^k, S^{k+1} = S^k + (M̃ − M)X^k で書いたときの
    不動点残差。S は 1ᵀS = 0 を満たす候補 −α(∇F(X) − 平均) を使う。
    残差 0 ⇔ X が合意状態かつ 1ᵀ∇F(X) = 0。

    Returns:
        float: max(‖X⁺ − X‖, ‖S⁺ − S‖)
    """
    G = stack_gradient(problem, X)
    S = -alpha * (G - mean_projection(G))
    MX = M @ X
    X_next = MX - alpha * G - S
    S_next = S + 0.5 * (X - MX)
    return max(float(np.linalg.norm(X_next - X)), float(np.linalg.norm(S_next - S)))


# ----------------------------------------------------
# Acc-DNGD
# ----------------------------------------------------


def acc_dngd(problem: ProblemInstance, M: MixingLike, eta: Optional[float] = None,
             X0: Optional[np.ndarray] = None, budget: int = 1000,
             reference: Optional[ReferenceSolution] = None, guard: Optional[RunGuard] = None,
             eps: Optional[float] = None, communicator: Optional[Communicator] = None,
             on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    勾配追跡付きの加速分散 Nesterov 法。α = √(μ_l η)、X⁰ = Y⁰ = V⁰、S⁰ = ∇F(X⁰)。

        X^{k+1} = MY^k − ηS^k
        V^{k+1} = (1 − α)MV^k + αMY^k − (η/α)S^k
        Y^{k+1} = (X^{k+1} + αV^{k+1})/(1 + α)
        S^{k+1} = MS^k + ∇F(Y^{k+1}) − ∇F(Y^k)

    M を4回掛けるので1反復4通信ラウンド。

    Args:
        eta (Optional[float]): ステップ幅（既定は tune_acc_dngd_step の結果）
    """
    constants = compute_constants(problem)
    if constants.mu_l <= 0.0:
        raise ValueError("acc_dngd needs mu_l > 0")
    if eta is None:
        eta = tune_acc_dngd_step(problem, M, X0=X0)
    eta = RunGuard.validate_step("eta", eta)
    RunGuard.validate_budget("budget", budget)
    alpha = math.sqrt(constants.mu_l * eta)
    comm = communicator or Communicator(M)
    tracer = _primal_tracer("acc_dngd", problem, reference, guard, eps)

    X = _initial_state(problem, X0)
    Y = X.copy()
    V = X.copy()
    G = stack_gradient(problem, Y)
    S = G.copy()
    grad_calls = 1
    reached = tracer.log(0, X, comm.rounds, grad_calls)

    for k in range(budget):
        if reached:
            break
        X_next = comm.mix(Y, k) - eta * S
        V = (1.0 - alpha) * comm.mix(V, k) + alpha * comm.mix(Y, k) - (eta / alpha) * S
        Y = (X_next + alpha * V) / (1.0 + alpha)
        G_next = stack_gradient(problem, Y)
        grad_calls += 1
        S = comm.mix(S, k) + G_next - G
        G, X = G_next, X_next
        if on_step:
            on_step(k + 1, {"X": X, "Y": Y, "V": V, "S": S, "grad": G})
        reached = tracer.log(k + 1, X, comm.rounds, grad_calls)
    return tracer.finish(X, reached)


def tune_acc_dngd_step(problem: ProblemInstance, M: MixingLike, X0: Optional[np.ndarray] = None,
                       trial: int = 200, max_halvings: int = 40) -> float:
    """
    η = 1/L_l から半減させ、trial 反復の試走で安定する最初の η を返す。
    安定 = 発散せず、最終の合意誤差と残差が初期値を上回らない。

    Raises:
        ValueError: max_halvings 回半減しても安定しない場合。
    """
    eta = 1.0 / compute_constants(problem).L_l
    reference = solve_reference(problem, strict=False)
    for _ in range(max_halvings):
        try:
            record = acc_dngd(problem, M, eta=eta, X0=X0, budget=trial, reference=reference)
        except DivergenceError:
            eta /= 2.0
            continue
        first, last = record.rows[0], record.last
        if abs(last.f_residual) <= max(abs(first.f_residual), 1e-12) and \
                last.consensus_error <= 1e3 * max(first.consensus_error, 1.0):
            logger.info(f"Acc-DNGD step tuned: eta={eta:.3e}")
            return eta
        eta /= 2.0
    raise ValueError("Could not find a stable Acc-DNGD step size")


# ----------------------------------------------------
# DIGing
# ----------------------------------------------------


def diging(problem: ProblemInstance, Ms: MixingLike, alpha: float,
           X0: Optional[np.ndarray] = None, budget: int = 1000,
           reference: Optional[ReferenceSolution] = None, guard: Optional[RunGuard] = None,
           eps: Optional[float] = None, communicator: Optional[Communicator] = None,
           on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    DIGing（時変グラフ上の勾配追跡）。Y⁰ = ∇F(X⁰)。

        X^{k+1} = M^k X^k − αY^k
        Y^{k+1} = M^k Y^k + ∇F(X^{k+1}) − ∇F(X^k)

    1反復2通信ラウンド。ラウンド k の行列は列の k 番目のグラフの Metropolis 行列。
    """
    alpha = RunGuard.validate_step("alpha", alpha)
    RunGuard.validate_budget("budget", budget)
    comm = communicator or Communicator(Ms)
    tracer = _primal_tracer("diging", problem, reference, guard, eps)

    X = _initial_state(problem, X0)
    G = stack_gradient(problem, X)
    Y = G.copy()
    grad_calls = 1
    reached = tracer.log(0, X, comm.rounds, grad_calls)

    for k in range(budget):
        if reached:
            break
        X = comm.mix(X, k) - alpha * Y
        G_next = stack_gradient(problem, X)
        grad_calls += 1
        Y = comm.mix(Y, k) + G_next - G
        G = G_next
        if on_step:
            on_step(k + 1, {"X": X, "Y": Y, "grad": G})
        reached = tracer.log(k + 1, X, comm.rounds, grad_calls)
    return tracer.finish(X, reached)


# ----------------------------------------------------
# Decentralized AGD with consensus subroutine
# ----------------------------------------------------


def dagd_step_coefficient(A: float, L: float, mu: float) -> float:
    """
    (A + α)(1 + Aμ) = Lα² の大きい方の根。

    Raises:
        ValueError: 判別式が負（L ≤ 0 の場合のみ起こり得る）。
    """
    c = 1.0 + A * mu
    disc = c * c + 4.0 * L * A * c
    if L <= 0.0 or disc < 0.0:
        raise ValueError(f"Degenerate step-size equation (L={L}, A={A}, mu={mu})")
    return (c + math.sqrt(disc)) / (2.0 * L)


def inexact_oracle_params(problem: ProblemInstance, eps: float, delta_prime: Optional[float] = None,
                          mixing: Optional[MixingLike] = None,
                          reference: Optional[ReferenceSolution] = None,
                          u0: Optional[np.ndarray] = None) -> InexactOracleParams:
    """
    合意精度 δ′ と不正確オラクルのパラメータを計算する。

        δ = (1/2m)(L_l²/L_g + 2L_l²/μ_g + L_l − μ_l)δ′
        δ′（既定）= (mε/32)·μ_g^{3/2}/(L_g^{1/2} L_l²)
        T = ⌈(τ/2λ) log(D/δ′)⌉

    T は mixing と reference が与えられた場合のみ計算する（D が x* に依存するため）。

    Args:
        problem (ProblemInstance): 問題
        eps (float): 目標精度 ε > 0
        delta_prime (Optional[float]): 合意精度（既定は上式）
        mixing (Optional[MixingLike]): (τ, λ) 推定用の混合行列源
        reference (Optional[ReferenceSolution]): 参照解
        u0 (Optional[np.ndarray]): 初期平均点 ū⁰（既定 0）

    Returns:
        InexactOracleParams: パラメータ一式
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive (got {eps})")
    c: ConstantSummary = compute_constants(problem)
    m = problem.m
    if delta_prime is None:
        delta_prime = (m * eps / 32.0) * c.mu_g ** 1.5 / (math.sqrt(c.L_g) * c.L_l ** 2)
    delta = (c.L_l ** 2 / c.L_g + 2.0 * c.L_l ** 2 / c.mu_g + c.L_l - c.mu_l) * delta_prime / (2.0 * m)
    L_model, mu_model = 2.0 * c.L_g, c.mu_g / 2.0
    params = InexactOracleParams(delta=delta, L_model=L_model, mu_model=mu_model, delta_prime=delta_prime)

    if mixing is None or reference is None or delta_prime <= 0.0:
        return params

    tau, lam = estimate_contraction(mixing)
    x_star = reference.x_star
    u0 = np.zeros(problem.dimension) if u0 is None else np.asarray(u0, dtype=float)
    X_star = np.tile(x_star, (m, 1))
    grad_norm = float(np.linalg.norm(stack_gradient(problem, X_star)))
    s = math.sqrt(L_model * mu_model)
    sqrt_D = (
        (2.0 * c.L_l / s + 1.0) * math.sqrt(delta_prime)
        + (c.L_l / mu_model) * math.sqrt(m) * math.sqrt(float(np.sum((u0 - x_star) ** 2)) + 8.0 * delta_prime / s)
        + 2.0 * grad_norm / s
    )
    D = sqrt_D ** 2
    T = max(1, math.ceil(tau / (2.0 * lam) * math.log(max(D / delta_prime, 1.0))))
    return params.model_copy(update={"T": T, "tau": float(tau), "lam": lam, "D": D})


def dagd_iteration_estimate(problem: ProblemInstance, eps: float, x0_distance: float) -> int:
    """
    外側反復数の目安 2√(L_g/μ_g)·log(L_g R²/ε)。R は初期点と x* の距離。
    """
    c = compute_constants(problem)
    ratio = max(c.L_g * x0_distance ** 2 / eps, math.e)
    return math.ceil(2.0 * math.sqrt(c.L_g / c.mu_g) * math.log(ratio))


def dagd_consensus(problem: ProblemInstance, Ms: MixingLike, L: Optional[float] = None,
                   mu: Optional[float] = None, X0: Optional[np.ndarray] = None,
                   consensus_T: Optional[int] = None, budget: int = 1000,
                   reference: Optional[ReferenceSolution] = None, guard: Optional[RunGuard] = None,
                   eps: Optional[float] = None, delta_prime: Optional[float] = None,
                   communicator: Optional[Communicator] = None,
                   on_step: Optional[StepObserver] = None) -> RunRecord:
    """
    合意サブルーチン付き分散加速勾配法。

        α^{k+1}: (A^k + α)(1 + A^kμ) = Lα² の大きい方の根,  A^{k+1} = A^k + α^{k+1}
        Y^{k+1} = (α^{k+1}U^k + A^kX^k)/A^{k+1}
        V^{k+1} = (μY^{k+1} + (1 + A^kμ)U^k)/(1 + A^kμ + μ) − α^{k+1}/(1 + A^kμ + μ)·∇F(Y^{k+1})
        U^{k+1} = Consensus(V^{k+1}, T)
        X^{k+1} = (α^{k+1}U^{k+1} + A^kX^k)/A^{k+1}

    Args:
        problem (ProblemInstance): 問題
        Ms (MixingLike): 混合行列源（静的・時変）
        L (Optional[float]): モデル平滑度（既定 2L_g）
        mu (Optional[float]): モデル強凸度（既定 μ_g/2）
        X0 (Optional[np.ndarray]): 合意状態の初期点（既定 0）
        consensus_T (Optional[int]): 外側1反復あたりの合意反復数。None なら δ′ から計算
        budget (int): 外側反復数
        eps (Optional[float]): 停止精度（T の計算にも使い、既定 1e-6）
        delta_prime (Optional[float]): 合意精度 δ′ の上書き

    Raises:
        ValueError: X0 が合意状態でない、または L ≥ μ > 0 でない場合。
    """
    c = compute_constants(problem)
    L = 2.0 * c.L_g if L is None else L
    mu = c.mu_g / 2.0 if mu is None else mu
    if not (L >= mu > 0.0):
        raise ValueError(f"dagd_consensus needs L >= mu > 0 (got L={L}, mu={mu})")
    RunGuard.validate_budget("budget", budget)
    ref = reference if reference is not None else solve_reference(problem, strict=False)

    X = _initial_state(problem, X0)
    if consensus_error(X) > 1e-12 * max(1.0, float(np.linalg.norm(X))):
        raise ValueError("dagd_consensus needs a consensual initial point")
    if consensus_T is None:
        params = inexact_oracle_params(problem, eps if eps is not None else 1e-6, delta_prime,
                                       mixing=Ms, reference=ref, u0=X[0])
        consensus_T = params.T
        logger.info(f"dagd_consensus: T={consensus_T} from delta'={params.delta_prime:.3e}")
    RunGuard.validate_budget("consensus_T", consensus_T)

    comm = communicator or Communicator(Ms)
    tracer = RunTracer("dagd_consensus", lambda Z: problem.objective(Z.mean(axis=0)), ref.f_star, guard, eps)
    U = X.copy()
    A = 0.0
    grad_calls = 0
    reached = tracer.log(0, X, comm.rounds, grad_calls)

    for k in range(budget):
        if reached:
            break
        alpha = dagd_step_coefficient(A, L, mu)
        A_next = A + alpha
        Y = (alpha * U + A * X) / A_next
        denom = 1.0 + A * mu + mu
        V = (mu * Y + (1.0 + A * mu) * U) / denom - (alpha / denom) * stack_gradient(problem, Y)
        grad_calls += 1
        U, _ = run_consensus(comm.source, V, consensus_T, communicator=comm, start_round=comm.rounds)
        X = (alpha * U + A * X) / A_next
        A = A_next
        if on_step:
            on_step(k + 1, {"X": X, "U": U, "V": V, "Y": Y, "A": A, "alpha": alpha})
        reached = tracer.log(k + 1, X, comm.rounds, grad_calls)
    return tracer.finish(X, reached)
