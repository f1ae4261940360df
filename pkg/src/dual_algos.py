# src/dual_algos.py
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Optional, Union

import numpy as np

from src.consensus import Communicator
from src.errors import DivergenceError, NotDualFriendlyError
from src.models import CertificateResult, DualIterationRecord, DualRunRecord
from src.netgraph import kron_lift, spectral_summary, sqrt_psd
from src.primal_algos import StepObserver
from src.problems import ProblemInstance, compute_constants, conjugate_argmax, stack_gradient, stack_value
from src.run_guard import RunGuard

logger = logging.getLogger(__name__)

# A = 0 とみなす λ_max(AᵀA) の閾値
DEGENERATE_CONSTRAINT_TOL = 1e-12

BatchSchedule = Union[int, Callable[[int], int]]
GradientFn = Callable[[np.ndarray], np.ndarray]


# ----------------------------------------------------
# Dual problem
# ----------------------------------------------------


class DualProblem:
    """
    min_x f(x) s.t. Ax = 0 の双対問題 min_y ψ(y),  ψ(y) = ⟨Aᵀy, x(Aᵀy)⟩ − f(x(Aᵀy))。

    2つの座標系を持つ。
      - 非持ち上げ（lifted=False）: 変数は y。∇ψ(y) = A x(Aᵀy)。
      - 持ち上げ（lifted=True）: 変数は s = √W y。勾配は W x(s) で、W の乗算1回 = 1通信ラウンド。
    アルゴリズムの更新は変数と勾配の線形結合だけなので、同じコードがどちらの形でも動く。

    確率的共役オラクル: x̃(y, ξ) = x(y) + δ_x·1/√d + ζ,  ζ ~ N(0, (σ_x/√d)² I)。r 個の平均を使う。

    Attributes:
        problem (ProblemInstance): 双対可能な分散問題
        A (np.ndarray): 制約行列（分散設定では √W）
        W (np.ndarray): AᵀA
        L_psi (float): λ_max(AᵀA)/μ
        mu_psi (float): λ⁺_min(AᵀA)/L（部分空間上の強凸度）
        conj_calls (int): 共役オラクル呼び出し数（バッチの各サンプルを1回と数える）
    """

    def __init__(self, problem: ProblemInstance, A: np.ndarray, lifted: bool = False,
                 sigma_x: float = 0.0, delta_x: float = 0.0,
                 communicator: Optional[Communicator] = None):
        if not problem.dual_friendly:
            raise NotDualFriendlyError(
                f"Dual methods need strongly convex nodes with a conjugate oracle ('{problem.name}')"
            )
        if min(sigma_x, delta_x) < 0.0:
            raise ValueError("Conjugate-oracle noise levels must be non-negative")
        self.problem = problem
        self.shape = (problem.m, problem.dimension)
        self.dim = problem.m * problem.dimension
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[1] != self.dim:
            raise ValueError(f"Constraint matrix must have {self.dim} columns (got {A.shape})")
        self.A = A
        self.W = A.T @ A
        if float(np.abs(self.W).max()) <= DEGENERATE_CONSTRAINT_TOL:
            raise ValueError("Constraint matrix is zero: Ker A must be a proper subspace")
        if lifted and A.shape[0] != self.dim:
            raise ValueError("The lifted form needs a square constraint matrix")
        summary = spectral_summary((self.W + self.W.T) / 2.0, "laplacian")
        constants = compute_constants(problem)
        self.lambda_max = summary.lambda_max
        self.lambda_min_plus = summary.lambda_min_plus
        self.L_psi = summary.lambda_max / constants.mu_l
        self.mu_psi = summary.lambda_min_plus / constants.L_l
        self.lifted = lifted
        self.sigma_x = sigma_x
        self.delta_x = delta_x
        self.communicator = communicator or Communicator(self.W)
        self.conj_calls = 0
        self.gradient_calls = 0
        self._lock = threading.Lock()

    @property
    def noiseless(self) -> bool:
        return self.sigma_x == 0.0 and self.delta_x == 0.0

    @property
    def sigma_psi(self) -> float:
        """σ_ψ = √λ_max(AᵀA)·σ_x"""
        return math.sqrt(self.lambda_max) * self.sigma_x

    @property
    def var_dim(self) -> int:
        return self.dim if self.lifted else self.A.shape[0]

    @property
    def comm_rounds(self) -> int:
        """
        通信ラウンド数。持ち上げ形式は W の乗算回数、非持ち上げ形式は Aᵀ と A の乗算で勾配1回につき2。
        """
        if self.lifted:
            return self.communicator.rounds
        return 2 * self.gradient_calls

    def zeros(self) -> np.ndarray:
        return np.zeros(self.var_dim)

    # --- 評価（計数しない） ---

    def primal_input(self, v: np.ndarray) -> np.ndarray:
        """共役オラクルの引数 Aᵀy（持ち上げ形式では s そのもの）。"""
        return v if self.lifted else self.A.T @ v

    def primal(self, v: np.ndarray) -> np.ndarray:
        """x(Aᵀy) を長さ mn のベクトルで返す。"""
        S = np.reshape(self.primal_input(v), self.shape)
        return conjugate_argmax(self.problem, S).ravel()

    def f_value(self, x: np.ndarray) -> float:
        return stack_value(self.problem, np.reshape(x, self.shape))

    def value(self, v: np.ndarray) -> float:
        """ψ(y)"""
        s = self.primal_input(v)
        x = self.primal(v)
        return float(s @ x) - self.f_value(x)

    def ax_norm(self, x: np.ndarray) -> float:
        """‖Ax‖ = √⟨x, Wx⟩"""
        return math.sqrt(max(float(x @ (self.W @ x)), 0.0))

    def grad_norm(self, v: np.ndarray) -> float:
        """真の ‖∇ψ(y)‖。どちらの座標系でも ‖A x(Aᵀy)‖ に等しい。"""
        return self.ax_norm(self.primal(v))

    def exact_gradient(self, v: np.ndarray) -> np.ndarray:
        """変数座標での勾配（計数しない）。"""
        x = self.primal(v)
        return self.W @ x if self.lifted else self.A @ x

    # --- オラクル（計数する） ---

    def _noisy_primal(self, v: np.ndarray, rng: Optional[np.random.Generator], batch: int) -> np.ndarray:
        x = self.primal(v)
        if self.noiseless:
            return x
        x = x + self.delta_x / math.sqrt(self.dim)
        if self.sigma_x > 0.0:
            if rng is None:
                raise ValueError("Stochastic conjugate oracle with sigma_x > 0 needs an RNG")
            noise = rng.normal(0.0, self.sigma_x / math.sqrt(self.dim), size=(batch, self.dim))
            x = x + noise.mean(axis=0)
        return x

    def stochastic_gradient(self, v: np.ndarray, rng: Optional[np.random.Generator] = None,
                            batch: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """
        バッチ化した確率的勾配 ∇̃Ψ(y, ξ) と対応する主変数 x̃(Aᵀy, ξ) を返す。
        ノイズなしでは乱数を消費せず、バッチサイズによらず1回の乗算で済む。

        Returns:
            tuple[np.ndarray, np.ndarray]: (勾配, x̃)
        """
        batch = RunGuard.validate_budget("batch", batch)
        x = self._noisy_primal(v, rng, batch)
        with self._lock:
            self.conj_calls += batch
            self.gradient_calls += 1
            if self.lifted:
                g = self.communicator.mix(x, self.communicator.rounds)
            else:
                g = self.A @ x
        return g, x

    def counters(self) -> dict[str, int]:
        return {"conj_calls": self.conj_calls, "comm_rounds": self.comm_rounds}


def make_dual(problem: ProblemInstance, laplacian: np.ndarray, lifted: bool = False,
              sigma_x: float = 0.0, delta_x: float = 0.0) -> DualProblem:
    """
    グラフのラプラシアン W̄ から分散双対問題（A = √(W̄ ⊗ I_n)）を作る。
    """
    W = kron_lift(np.asarray(laplacian, dtype=float), problem.dimension)
    return DualProblem(problem, sqrt_psd(W), lifted=lifted, sigma_x=sigma_x, delta_x=delta_x)


def decentralized_lift(dual: DualProblem, communicator: Optional[Communicator] = None) -> DualProblem:
    """
    双対問題を持ち上げ形式に変換する。変数を s = √W·y で持ち、各更新は W の乗算（1ラウンド）だけで済む。

    Args:
        dual (DualProblem): 元の双対問題（A = √W の正方行列）
        communicator (Optional[Communicator]): W の乗算を数える通信器（未指定なら新規）

    Returns:
        DualProblem: 持ち上げ形式の双対問題（ノイズ設定は引き継ぐ）
    """
    if dual.lifted and communicator is None:
        return dual
    return DualProblem(dual.problem, dual.A, lifted=True, sigma_x=dual.sigma_x,
                       delta_x=dual.delta_x, communicator=communicator)


def to_lifted(dual: DualProblem, y: np.ndarray) -> np.ndarray:
    """非持ち上げ座標の y を持ち上げ座標 s = Aᵀy に写す。"""
    return dual.A.T @ y


def kernel_component(dual: DualProblem, v: np.ndarray) -> float:
    """
    変数の Ker(Aᵀ) 成分のノルム。0 なら v ∈ (Ker Aᵀ)^⊥ = Im A。
    持ち上げ形式では Ker W（各ブロックの一致方向）への射影を使う。
    """
    M = dual.A @ dual.A.T if not dual.lifted else dual.W
    w, V = np.linalg.eigh((M + M.T) / 2.0)
    scale = max(float(np.abs(w).max()), 1.0)
    kernel = V[:, w <= 1e-9 * scale]
    return float(np.linalg.norm(kernel.T @ v))


# ----------------------------------------------------
# Trace recording
# ----------------------------------------------------


class _DualTracer:
    """双対法の反復指標を DualRunRecord に記録する。指標計算はオラクル計数に含めない。"""

    def __init__(self, algorithm: str, dual: DualProblem, guard: Optional[RunGuard]):
        self.dual = dual
        self.guard = guard or RunGuard()
        self.record = DualRunRecord(algorithm=algorithm)

    def log(self, k: int, v: np.ndarray, x_tilde: np.ndarray) -> DualIterationRecord:
        try:
            self.guard.check(v, k, self.record.algorithm, self.record)
        except DivergenceError:
            self.record.status = "DIVERGED"
            self.record.y_final = v
            raise
        psi = self.dual.value(v)
        row = DualIterationRecord(
            iter=k,
            comm_rounds=self.dual.comm_rounds,
            conj_calls=self.dual.conj_calls,
            grad_norm=self.dual.grad_norm(v),
            psi=psi,
            gap=self.dual.f_value(x_tilde) + psi,
            ax_norm=self.dual.ax_norm(x_tilde),
        )
        self.record.rows.append(row)
        return row

    def finish(self, v: np.ndarray, x_tilde: np.ndarray, eps: Optional[float]) -> DualRunRecord:
        self.record.y_final = v
        self.record.x_final = x_tilde
        last = self.record.last
        reached = eps is not None and last.gap <= eps and last.ax_norm <= eps
        self.record.status = "CONVERGED" if reached else "BUDGET_EXHAUSTED"
        logger.info(
            f"{self.record.algorithm}: {self.record.status} after {last.iter} iterations "
            f"(gap={last.gap:.3e}, grad_norm={last.grad_norm:.3e}, conj_calls={last.conj_calls})"
        )
        return self.record


def _batch_at(batch: BatchSchedule, k: int) -> int:
    return batch(k) if callable(batch) else int(batch)


# ----------------------------------------------------
# SPDSTM
# ----------------------------------------------------


def spdstm_coefficient(A: float, L_tilde: float) -> float:
    """2L̃α² = A + α の正根。A = 0 なら 1/(2L̃)。"""
    return (1.0 + math.sqrt(1.0 + 8.0 * L_tilde * A)) / (4.0 * L_tilde)


def spdstm_batch_schedule(dual: DualProblem, N: int, eps: float, beta: float = 0.1,
                          C_hat: float = 1.0) -> Callable[[int], int]:
    """
    r_k = max{1, σ_ψ² α̃_k ln(N/β)/(Ĉε)},  α̃_k = (k+1)/(2L̃)。ノイズなしでは常に 1。
    """
    L_tilde = 2.0 * dual.L_psi
    sigma2 = dual.sigma_psi ** 2

    def schedule(k: int) -> int:
        if sigma2 == 0.0:
            return 1
        alpha_k = (k + 1) / (2.0 * L_tilde)
        return max(1, math.ceil(sigma2 * alpha_k * math.log(N / beta) / (C_hat * eps)))

    return schedule


def spdstm(dual: DualProblem, N: int, batch: BatchSchedule = 1, seed: int = 0,
           guard: Optional[RunGuard] = None, eps: Optional[float] = None,
           on_step: Optional[StepObserver] = None) -> DualRunRecord:
    """
    確率的主双対相似三角形法。y⁰ = z⁰ = 0 から N 反復し、主解は重み α_k の加重平均
    x̃^N = (1/A_N) Σ α_k x̃(Aᵀỹ^k, ξ^k) でオンラインに保持する。

    Args:
        dual (DualProblem): 双対問題
        N (int): 反復数
        batch (BatchSchedule): バッチサイズ（整数または k → r_k）
        seed (int): 乱数シード

    Returns:
        DualRunRecord: gap 列は f(x̃^k) + ψ(y^k)
    """
    RunGuard.validate_budget("N", N)
    rng = np.random.default_rng(seed)
    L_tilde = 2.0 * dual.L_psi
    y = dual.zeros()
    z = dual.zeros()
    A = 0.0
    x_sum = np.zeros(dual.dim)
    x_tilde = np.zeros(dual.dim)

    tracer = _DualTracer("spdstm", dual, guard)
    tracer.log(0, y, dual.primal(y))
    for k in range(N):
        alpha = spdstm_coefficient(A, L_tilde)
        A_next = A + alpha
        y_tilde = (A * y + alpha * z) / A_next
        g, x_k = dual.stochastic_gradient(y_tilde, rng, _batch_at(batch, k))
        z = z - alpha * g
        y = (A * y + alpha * z) / A_next
        x_sum += alpha * x_k
        A = A_next
        x_tilde = x_sum / A
        if on_step:
            on_step(k + 1, {"y": y, "z": z, "y_tilde": y_tilde, "A": A, "alpha": alpha})
        tracer.log(k + 1, y, x_tilde)
    return tracer.finish(y, x_tilde, eps)


# ----------------------------------------------------
# AC-SA family
# ----------------------------------------------------


def ac_sa(gradient: GradientFn, z0: np.ndarray, iterations: int, lam: float, L_tilde: float,
          on_step: Optional[StepObserver] = None) -> np.ndarray:
    """
    λ-強凸・L̃-平滑な目的関数に対する AC-SA。

        α_t = 2/(t+1),  γ_t = 4L̃/(t(t+1))

    Args:
        gradient (GradientFn): 目的関数の（バッチ化）確率的勾配
        z0 (np.ndarray): 初期点
        iterations (int): 反復数
        lam (float): 強凸度 λ > 0
        L_tilde (float): 平滑度

    Returns:
        np.ndarray: y_ag
    """
    RunGuard.validate_step("lam", lam)
    y_ag = np.array(z0, dtype=float, copy=True)
    z = y_ag.copy()
    for t in range(1, iterations + 1):
        alpha, gamma = ac_sa_coefficients(t, L_tilde)
        denom = gamma + (1.0 - alpha ** 2) * lam
        y_md = ((1.0 - alpha) * (lam + gamma) / denom) * y_ag \
            + (alpha * ((1.0 - alpha) * lam + gamma) / denom) * z
        g = gradient(y_md)
        z = (alpha * lam / (lam + gamma)) * y_md \
            + (((1.0 - alpha) * lam + gamma) / (lam + gamma)) * z \
            - (alpha / (lam + gamma)) * g
        y_ag = alpha * z + (1.0 - alpha) * y_ag
        if on_step:
            on_step(t, {"y_md": y_md, "z": z, "y_ag": y_ag, "alpha": alpha, "gamma": gamma})
    return y_ag


def ac_sa_coefficients(t: int, L_tilde: float) -> tuple[float, float]:
    return 2.0 / (t + 1), 4.0 * L_tilde / (t * (t + 1))


def ac_sa2(gradient: GradientFn, z0: np.ndarray, iterations: int, lam: float, L_tilde: float,
           on_step: Optional[StepObserver] = None) -> np.ndarray:
    """AC-SA を m/2 回ずつ2度走らせ、2度目は1度目の出力から始める。"""
    half = max(1, iterations // 2)
    y1 = ac_sa(gradient, z0, half, lam, L_tilde, on_step)
    return ac_sa(gradient, y1, half, lam, L_tilde, on_step)


def rrma_stages(L_tilde: float, lam: float) -> int:
    """T = ⌊log₂(L̃_ψ/λ)⌋"""
    return max(0, math.floor(math.log2(L_tilde / lam) + 1e-12))


def default_regularization(L_psi: float, N: int) -> float:
    """λ = L_ψ ln²N / N²"""
    return L_psi * math.log(N) ** 2 / N ** 2


def regularized_gradient(base: GradientFn, lam: float, y0: np.ndarray,
                         centers: list[np.ndarray]) -> GradientFn:
    """
    ψ_k(y) = ψ(y) + (λ/2)‖y − y⁰‖² + λΣ 2^{l−1}‖y − ŷ^l‖² の勾配。
    """
    def gradient(y: np.ndarray) -> np.ndarray:
        g = base(y) + lam * (y - y0)
        for l, center in enumerate(centers, start=1):
            g = g + lam * 2.0 ** l * (y - center)
        return g

    return gradient


def rrma_ac_sa2(dual: DualProblem, y0: np.ndarray, N: int, lam: Optional[float] = None,
                batch: int = 1, rng: Optional[np.random.Generator] = None,
                on_stage: Optional[StepObserver] = None) -> np.ndarray:
    """
    再帰正則化メタアルゴリズム＋AC-SA²。正則化した ψ̃ に対して T 段を回し、
    k 段目は ψ_{k−1}（強凸度 λ(2^k − 1)）を N/T 反復で最適化して ŷ^k を得る。

    Args:
        dual (DualProblem): 双対問題
        y0 (np.ndarray): 初期点
        N (int): 総反復数
        lam (Optional[float]): 正則化 λ（既定 L_ψ ln²N/N²）
        batch (int): 各反復のバッチサイズ

    Returns:
        np.ndarray: ŷ^T（T = 0 なら ψ̃ に AC-SA² を1度だけ適用した出力）
    """
    RunGuard.validate_budget("N", N)
    lam = default_regularization(dual.L_psi, max(N, 2)) if lam is None else lam
    lam = RunGuard.validate_step("lam", lam)
    y0 = np.array(y0, dtype=float, copy=True)

    def base(y: np.ndarray) -> np.ndarray:
        return dual.stochastic_gradient(y, rng, batch)[0]

    T = rrma_stages(dual.L_psi + lam, lam)
    if T == 0:
        logger.info("rrma_ac_sa2: lambda >= L_psi, running a single AC-SA^2 pass")
        return ac_sa2(regularized_gradient(base, lam, y0, []), y0, N, lam, dual.L_psi + lam)

    per_stage = max(2, N // T)
    centers: list[np.ndarray] = []
    y_hat = y0
    for k in range(1, T + 1):
        modulus = lam * (2.0 ** k - 1.0)
        y_hat = ac_sa2(regularized_gradient(base, lam, y0, centers), y_hat, per_stage,
                       modulus, dual.L_psi + modulus)
        centers.append(y_hat)
        if on_stage:
            on_stage(k, {"y_hat": y_hat, "modulus": modulus})
    return y_hat


def rrma_run(dual: DualProblem, N: int, lam: Optional[float] = None, batch: int = 1, seed: int = 0,
             y0: Optional[np.ndarray] = None, guard: Optional[RunGuard] = None,
             eps: Optional[float] = None) -> DualRunRecord:
    """rrma_ac_sa2 を1度走らせ、段ごとの指標を記録する。"""
    rng = np.random.default_rng(seed)
    v0 = dual.zeros() if y0 is None else np.asarray(y0, dtype=float)
    tracer = _DualTracer("rrma_ac_sa2", dual, guard)
    tracer.log(0, v0, dual.primal(v0))

    def on_stage(k: int, state: dict) -> None:
        tracer.log(k, state["y_hat"], dual.primal(state["y_hat"]))

    y_hat = rrma_ac_sa2(dual, v0, N, lam, batch, rng, on_stage)
    return tracer.finish(y_hat, dual.primal(y_hat), eps)


# ----------------------------------------------------
# Restarted RRMA with amplification
# ----------------------------------------------------


def restart_iterations(L_psi: float, mu_psi: float, C: float = 1.0, limit: int = 10_000_000) -> int:
    """C L_ψ² ln⁴N̄ / (μ_ψ² N̄⁴) ≤ 1/32 を満たす最小の整数 N̄ > 1。"""
    kappa2 = C * (L_psi / mu_psi) ** 2
    N = 2
    while kappa2 * math.log(N) ** 4 / N ** 4 > 1.0 / 32.0:
        N += 1
        if N > limit:
            raise ValueError(f"No restart length below {limit} for L_psi/mu_psi={L_psi / mu_psi:.3e}")
    return N


def restart_phases(grad_norm0: float, R_y: float, eps: float) -> int:
    """l = max{1, ⌈log₂(2R_y²‖∇ψ(y⁰)‖²/ε²)⌉}"""
    arg = 2.0 * R_y ** 2 * grad_norm0 ** 2 / eps ** 2
    return max(1, math.ceil(math.log2(arg))) if arg > 1.0 else 1


def restart_batches(dual: DualProblem, eps: float, R_y: float, phases: int,
                    beta: float) -> tuple[int, int, int]:
    """(r̂_k, p_k, r̄_k)。ノイズなしでは (1, 1, 1)。"""
    s2 = dual.sigma_psi ** 2
    if s2 == 0.0:
        return 1, 1, 1
    r_hat = max(1, math.ceil(4.0 * s2 * (1.0 + math.sqrt(3.0 * math.log(phases / beta))) ** 2
                             * R_y ** 2 / eps ** 2))
    p = max(1, math.ceil(math.log2(phases / beta)))
    r_bar = max(1, math.ceil(128.0 * s2 * (1.0 + math.sqrt(3.0 * math.log(phases * p / beta))) ** 2
                             * R_y ** 2 / eps ** 2))
    return r_hat, p, r_bar


def restarted_rrma(dual: DualProblem, eps: float, R_y: float, y0: Optional[np.ndarray] = None,
                   beta: float = 0.1, C: float = 1.0, N_bar: Optional[int] = None,
                   phases: Optional[int] = None, seed: int = 0, workers: int = 1,
                   guard: Optional[RunGuard] = None) -> DualRunRecord:
    """
    再始動付き RRMA-AC-SA²。各フェーズで
      1. 現在点の勾配ノルムをバッチ r̂_k で推定し、
      2. r_k = max{1, 64Cσ_ψ² ln⁶N̄ / (N̄‖∇Ψ‖²)} を決め、
      3. 独立な p_k 本の RRMA 軌道を N̄ 反復ずつ走らせ、
      4. バッチ r̄_k で推定した勾配ノルムが最小の出力を選ぶ（同値は添字の小さい方）。
    選択は常に推定ノルムで行う。軌道ごとの乱数は SeedSequence から決定的に分岐する。

    Args:
        dual (DualProblem): 双対問題
        eps (float): 目標 ‖∇ψ(ȳ)‖ ≤ ε/R_y
        R_y (float): 双対解ノルムの上界
        beta (float): 失敗確率 β
        C (float): N̄ と r_k の定数
        N_bar (Optional[int]): フェーズあたりの反復数（既定は restart_iterations）
        phases (Optional[int]): フェーズ数（既定は restart_phases）
        workers (int): 増幅軌道のスレッド数

    Returns:
        DualRunRecord: フェーズごとの行と phase_grad_norms
    """
    eps = RunGuard.validate_step("eps", eps)
    R_y = RunGuard.validate_step("R_y", R_y)
    N_bar = N_bar or restart_iterations(dual.L_psi, dual.mu_psi, C)
    lam = default_regularization(dual.L_psi, N_bar)
    root = np.random.SeedSequence(seed)
    rng0 = np.random.default_rng(root.spawn(1)[0])
    y = dual.zeros() if y0 is None else np.array(y0, dtype=float, copy=True)

    tracer = _DualTracer("restarted_rrma", dual, guard)
    tracer.log(0, y, dual.primal(y))
    r_hat, p, r_bar = restart_batches(dual, eps, R_y, phases or 1, beta)
    g0 = float(np.linalg.norm(dual.stochastic_gradient(y, rng0, r_hat)[0]))
    if phases is None:
        phases = restart_phases(g0, R_y, eps)
        r_hat, p, r_bar = restart_batches(dual, eps, R_y, phases, beta)
    logger.info(f"restarted_rrma: phases={phases}, N_bar={N_bar}, p={p}, lambda={lam:.3e}")

    x = dual.primal(y)
    for k in range(1, phases + 1):
        phase_seq = root.spawn(1)[0]
        estimate = g0 if k == 1 else float(np.linalg.norm(
            dual.stochastic_gradient(y, np.random.default_rng(phase_seq.spawn(1)[0]), r_hat)[0]))
        if dual.sigma_psi == 0.0 or estimate == 0.0:
            r_k = 1
        else:
            r_k = max(1, math.ceil(64.0 * C * dual.sigma_psi ** 2 * math.log(N_bar) ** 6
                                   / (N_bar * estimate ** 2)))
        streams = phase_seq.spawn(p)

        def trajectory(idx: int) -> tuple[int, np.ndarray, float, np.ndarray]:
            rng = np.random.default_rng(streams[idx])
            out = rrma_ac_sa2(dual, y, N_bar, lam, r_k, rng)
            g, x_out = dual.stochastic_gradient(out, rng, r_bar)
            return idx, out, float(np.linalg.norm(g)), x_out

        if p == 1 or workers <= 1:
            results = [trajectory(i) for i in range(p)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(trajectory, i) for i in range(p)]
                results = [f.result() for f in as_completed(futures)]
        idx, y, norm, x = min(results, key=lambda item: (item[2], item[0]))
        tracer.record.phase_grad_norms.append(norm)
        tracer.log(k, y, x)
        logger.info(f"restarted_rrma phase {k}: selected trajectory {idx}, estimated grad norm {norm:.3e}")

    record = tracer.finish(y, x, None)
    reached = record.last.grad_norm <= eps / R_y
    record.status = "CONVERGED" if reached else "BUDGET_EXHAUSTED"
    return record


# ----------------------------------------------------
# SSTM_sc
# ----------------------------------------------------


def sstm_ratio(u: float, L: float, mu: float) -> float:
    """
    τ = α_{k+1}/A_{k+1} を u = 1/A_k から求める。A_{k+1}(1 + A_kμ) = α²_{k+1}L を
    A_k で割った Lτ² + (u + μ)τ − (u + μ) = 0 の正根。A_k 自体は持たない。
    """
    c = u + mu
    return (math.sqrt(c * c + 4.0 * L * c) - c) / (2.0 * L)


def sstm_sc(dual: DualProblem, N: int, batch: BatchSchedule = 1, seed: int = 0,
            y0: Optional[np.ndarray] = None, L: Optional[float] = None, mu: Optional[float] = None,
            guard: Optional[RunGuard] = None, eps: Optional[float] = None,
            on_step: Optional[StepObserver] = None) -> DualRunRecord:
    """
    強凸版の確率的相似三角形法。z^{k+1} は g̃_{k+1} の最小点を累積和から陽に計算する:

        z^{k+1} = (z⁰ − Σ α_l ∇̃Ψ(ỹ^l) + μ Σ α_l ỹ^l) / (1 + A_{k+1}μ)

    μ > 0 では A_k が指数的に増えるので、累積和は A_k で割った形（Ŝ_g, Ŝ_y）で持ち、
    u = 1/A_k と比 τ = α/A_{k+1} だけで更新する:

        z^{k+1} = (u z⁰ − Ŝ_g + μŜ_y) / (u + μ)

    主解は最終点で x̃(Aᵀy^N, ξ, r_N) を1回呼んで回復する。

    Args:
        dual (DualProblem): 双対問題
        N (int): 反復数
        L (Optional[float]): 平滑度（既定 L_ψ）
        mu (Optional[float]): 強凸度（既定 μ_ψ）
    """
    RunGuard.validate_budget("N", N)
    L = dual.L_psi if L is None else L
    mu = dual.mu_psi if mu is None else mu
    if mu < 0.0:
        raise ValueError(f"mu must be non-negative (got {mu})")
    if L <= 0.0:
        raise ValueError(f"L must be positive (got {L})")
    rng = np.random.default_rng(seed)
    z0 = dual.zeros() if y0 is None else np.array(y0, dtype=float, copy=True)
    y = z0.copy()
    z = z0.copy()
    u = L
    g0, _ = dual.stochastic_gradient(y, rng, _batch_at(batch, 0))
    sum_g = g0
    sum_y = y.copy()

    tracer = _DualTracer("sstm_sc", dual, guard)
    tracer.log(0, y, dual.primal(y))
    for k in range(N):
        tau = sstm_ratio(u, L, mu)
        y_tilde = (1.0 - tau) * y + tau * z
        g, _ = dual.stochastic_gradient(y_tilde, rng, _batch_at(batch, k + 1))
        sum_g = (1.0 - tau) * sum_g + tau * g
        sum_y = (1.0 - tau) * sum_y + tau * y_tilde
        u *= 1.0 - tau
        z = (u * z0 - sum_g + mu * sum_y) / (u + mu)
        y = (1.0 - tau) * y + tau * z
        if on_step:
            on_step(k + 1, {"y": y, "z": z, "z0": z0, "y_tilde": y_tilde, "u": u,
                            "sum_g": sum_g, "sum_y": sum_y, "mu": mu})
        tracer.log(k + 1, y, dual.primal(y))

    _, x_final = dual.stochastic_gradient(y, rng, _batch_at(batch, N))
    return tracer.finish(y, x_final, eps)


# ----------------------------------------------------
# Primal recovery certificates
# ----------------------------------------------------


def _replicate(dual: DualProblem, x_star: np.ndarray) -> np.ndarray:
    x_star = np.asarray(x_star, dtype=float)
    if x_star.shape == (dual.problem.dimension,):
        return np.tile(x_star, (dual.problem.m, 1))
    return np.reshape(x_star, dual.shape)


def minimal_norm_dual_solution(dual: DualProblem, x_star: np.ndarray) -> tuple[np.ndarray, float]:
    """
    最小ノルム双対解 y* = (Aᵀ)⁺∇F(X*) と R_y = ‖y*‖ を返す。
    持ち上げ形式では s* = Aᵀy* を返す（R_y は常に y* のノルム）。

    Args:
        x_star (np.ndarray): 主問題の解（(n,) なら全ノードに複製）
    """
    G = stack_gradient(dual.problem, _replicate(dual, x_star)).ravel()
    y_star = np.linalg.pinv(dual.A.T) @ G
    R_y = float(np.linalg.norm(y_star))
    return (to_lifted(dual, y_star) if dual.lifted else y_star), R_y


def key_inequality_gap(dual: DualProblem, y: np.ndarray, f_star: float) -> float:
    """
    ⟨A x(Aᵀy), y⟩ − (f(x(Aᵀy)) − f*)。弱双対性から非負。非持ち上げ座標の y を取る。
    """
    x = dual.primal(to_lifted(dual, y) if dual.lifted else y)
    return float((dual.A @ x) @ y) - (dual.f_value(x) - f_star)


def primal_recovery_certificate(dual: DualProblem, y: np.ndarray, eps: float, R_y: float, f_star: float,
                         tol: float = 1e-9) -> CertificateResult:
    """
    ‖∇ψ(y)‖ ≤ ε/R_y かつ ‖y‖ ≤ 2R_y なら、x = x(Aᵀy) は f(x) − f* ≤ 2ε, ‖Ax‖ ≤ ε/R_y を満たす。
    両仮定と両結論を評価する。y は非持ち上げ座標。

    Args:
        tol (float): 結論側の丸め誤差の許容（相対）
    """
    x = dual.primal(to_lifted(dual, y) if dual.lifted else y)
    grad_norm = dual.ax_norm(x)
    y_norm = float(np.linalg.norm(y))
    f_gap = dual.f_value(x) - f_star
    hypotheses = grad_norm <= eps / R_y and y_norm <= 2.0 * R_y
    slack = tol * max(1.0, abs(f_star))
    conclusions = f_gap <= 2.0 * eps + slack and grad_norm <= eps / R_y + tol
    return CertificateResult(
        grad_norm=grad_norm, y_norm=y_norm, R_y=R_y, eps=eps, f_gap=f_gap, ax_norm=grad_norm,
        hypotheses_hold=hypotheses, conclusions_hold=conclusions,
    )
