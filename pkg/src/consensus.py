# src/consensus.py
import logging
import math
from typing import Iterator, Optional, Union

import numpy as np

from src.errors import ShapeMismatchError
from src.interfaces import MixingSource
from src.models import ConsensusReport, GraphSequence
from src.netgraph import metropolis_weights, spectral_summary

logger = logging.getLogger(__name__)


# ----------------------------------------------------
# Mixing sources
# ----------------------------------------------------


class StaticMixing:
    """全ラウンドで同じ行列を返す混合行列源。"""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeMismatchError(f"Mixing matrix must be square, got {matrix.shape}")
        self.matrix = matrix
        self.size = matrix.shape[0]

    def matrix_at(self, k: int) -> np.ndarray:
        return self.matrix


class SequenceMixing:
    """
    時変グラフ列の各ラウンドの Metropolis 行列を返す混合行列源。
    予算が列の長さを超える場合は巡回使用する（巡回ウィンドウも B連結を認証済み）。
    """

    def __init__(self, sequence: GraphSequence):
        self.sequence = sequence
        self.matrices = [metropolis_weights(g) for g in sequence.graphs]
        self.size = sequence.node_count

    def matrix_at(self, k: int) -> np.ndarray:
        return self.matrices[k % len(self.matrices)]


class InstrumentedMixing:
    """
    行列の取り出し回数を数えるラッパー。
    Communicator は1回の乗算ごとに1回だけ matrix_at を呼ぶので、乗算回数の独立な計測になる。
    """

    def __init__(self, source: MixingSource):
        self.source = source
        self.size = source.size
        self.multiplications = 0

    def matrix_at(self, k: int) -> np.ndarray:
        self.multiplications += 1
        return self.source.matrix_at(k)


MixingLike = Union[np.ndarray, GraphSequence, MixingSource]


def as_mixing_source(mixing: MixingLike) -> MixingSource:
    """行列・グラフ列・混合行列源のいずれかを MixingSource に揃える。"""
    if isinstance(mixing, np.ndarray):
        return StaticMixing(mixing)
    if isinstance(mixing, GraphSequence):
        return SequenceMixing(mixing)
    return mixing


class Communicator:
    """
    通信ラウンドの計数付きで混合行列を掛ける。1回の乗算 = 1通信ラウンド。

    Attributes:
        source (MixingSource): 混合行列源
        rounds (int): これまでの乗算回数
    """

    def __init__(self, mixing: MixingLike):
        self.source = as_mixing_source(mixing)
        self.rounds = 0

    def mix(self, X: np.ndarray, k: int) -> np.ndarray:
        """
        ラウンド k の行列 M^k を掛けて M^k X を返す。

        Raises:
            ShapeMismatchError: 行数が行列サイズと一致しない場合。
        """
        M = self.source.matrix_at(k)
        if X.shape[0] != M.shape[1]:
            raise ShapeMismatchError(f"Cannot mix state with {X.shape[0]} rows by a {M.shape} matrix")
        self.rounds += 1
        return M @ X


# ----------------------------------------------------
# Basic operations
# ----------------------------------------------------


def mean_projection(X: np.ndarray) -> np.ndarray:
    """X̄ = (1/m)11ᵀX。全ての行を行平均で置き換える。"""
    X = np.asarray(X, dtype=float)
    return np.broadcast_to(X.mean(axis=0, keepdims=True), X.shape).copy()


def consensus_error(X: np.ndarray) -> float:
    """‖X − X̄‖_F"""
    X = np.asarray(X, dtype=float)
    return float(np.linalg.norm(X - X.mean(axis=0, keepdims=True)))


def consensus_step(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """
    1回の合意ステップ X' = MX。

    Raises:
        ShapeMismatchError: 次元が一致しない場合。
    """
    M = np.asarray(M, dtype=float)
    X = np.asarray(X, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or X.shape[0] != M.shape[0]:
        raise ShapeMismatchError(f"consensus_step: matrix {M.shape} vs state {X.shape}")
    return M @ X


def run_consensus(mixing: MixingLike, X0: np.ndarray, T: int,
                  communicator: Optional[Communicator] = None,
                  start_round: int = 0) -> tuple[np.ndarray, ConsensusReport]:
    """
    T 回の合意反復 X^{t+1} = M^t X^t を実行する。

    Args:
        mixing (MixingLike): 静的行列または時変の混合行列源
        X0 (np.ndarray): 初期状態 (m, n)
        T (int): 反復回数 (T ≥ 0)
        communicator (Optional[Communicator]): 外部のラウンド計数器（外側ループと共有する場合）
        start_round (int): 時変列で使う最初のラウンド番号

    Returns:
        tuple[np.ndarray, ConsensusReport]: 最終状態とレポート
    """
    if T < 0:
        raise ValueError(f"T must be non-negative (got {T})")
    comm = communicator if communicator is not None else Communicator(mixing)
    X = np.array(X0, dtype=float, copy=True)
    X_bar0 = mean_projection(X)
    prev = float(np.linalg.norm(X - X_bar0))
    errors = [prev]
    ratios = []
    rounds_before = comm.rounds

    for t in range(T):
        X = comm.mix(X, start_round + t)
        err = float(np.linalg.norm(X - X_bar0))
        ratios.append(err / prev if prev > 0.0 else 0.0)
        errors.append(err)
        prev = err

    report = ConsensusReport(
        iterations_run=T,
        final_error=consensus_error(X),
        per_step_ratio=ratios,
        errors=errors,
        communication_rounds=comm.rounds - rounds_before,
    )
    return X, report


# ----------------------------------------------------
# Accelerated consensus
# ----------------------------------------------------


def accelerated_consensus_trajectory(W: np.ndarray, X0: np.ndarray, T: int) -> Iterator[np.ndarray]:
    """
    ラプラシアン上の Nesterov 加速合意の反復列 X^1..X^T を順に返す。
    β = (√λmax − √λ⁺min)/(√λmax + √λ⁺min)、X^{-1} = X^0。
    """
    summary = spectral_summary(W, "laplacian")
    sq_max = math.sqrt(summary.lambda_max)
    sq_min = math.sqrt(summary.lambda_min_plus)
    beta = (sq_max - sq_min) / (sq_max + sq_min)
    step = 1.0 / summary.lambda_max

    X_prev = np.array(X0, dtype=float, copy=True)
    X = X_prev.copy()
    for _ in range(T):
        Y = X + beta * (X - X_prev)
        X_prev = X
        X = Y - step * (W @ Y)
        yield X


def accelerated_consensus(W: np.ndarray, X0: np.ndarray, T: int) -> np.ndarray:
    """
    加速合意を T 回実行する。

    Args:
        W (np.ndarray): 連結グラフのラプラシアン
        X0 (np.ndarray): 初期状態 (m, n)
        T (int): 反復回数 (T ≥ 1)

    Returns:
        np.ndarray: X^T
    """
    if T < 1:
        raise ValueError(f"accelerated_consensus needs T >= 1 (got {T})")
    X = np.asarray(X0, dtype=float)
    for X in accelerated_consensus_trajectory(W, X0, T):
        pass
    return X


def rounds_to_tolerance(kind: str, matrix: np.ndarray, X0: np.ndarray,
                        tol: float, max_rounds: int = 100_000) -> Optional[int]:
    """
    相対合意誤差 ‖X−X̄‖/‖X0−X̄0‖ が tol 以下になるまでの通信ラウンド数。

    Args:
        kind (str): "plain"（matrix は混合行列）または "accelerated"（matrix はラプラシアン）
        matrix (np.ndarray): 行列
        X0 (np.ndarray): 初期状態
        tol (float): 相対誤差の目標
        max_rounds (int): 上限

    Returns:
        Optional[int]: 到達ラウンド数。上限内に到達しなければ None。
    """
    base = consensus_error(X0)
    if base == 0.0:
        return 0
    if kind == "plain":
        X = np.array(X0, dtype=float, copy=True)
        for k in range(1, max_rounds + 1):
            X = matrix @ X
            if consensus_error(X) <= tol * base:
                return k
        return None
    if kind == "accelerated":
        for k, X in enumerate(accelerated_consensus_trajectory(matrix, X0, max_rounds), start=1):
            if consensus_error(X) <= tol * base:
                return k
        return None
    raise ValueError(f"Unknown consensus kind: {kind}")


# ----------------------------------------------------
# Contraction estimate for time-varying sources
# ----------------------------------------------------


def estimate_contraction(mixing: MixingLike, tau: Optional[int] = None,
                         horizon: Optional[int] = None, max_tau: int = 50) -> tuple[int, float]:
    """
    ウィンドウ縮小パラメータ (τ, λ) を推定する。
    1−λ は全開始位置 s での ‖M^{s+τ−1}⋯M^{s}(I − 11ᵀ/m)‖₂ の最大値。
    静的行列では τ=1, λ = 1 − λ₂(M)。

    Args:
        mixing (MixingLike): 混合行列源
        tau (Optional[int]): ウィンドウ長。None なら縮小が得られる最小の τ を探す
        horizon (Optional[int]): 開始位置の数（既定は列の長さ、静的なら 1）
        max_tau (int): τ 探索の上限

    Returns:
        tuple[int, float]: (τ, λ)

    Raises:
        ValueError: max_tau までに縮小しない場合。
    """
    source = as_mixing_source(mixing)
    m = source.size
    if horizon is None:
        horizon = len(source.matrices) if isinstance(source, SequenceMixing) else 1
    centering = np.eye(m) - np.full((m, m), 1.0 / m)

    def worst_ratio(t: int) -> float:
        worst = 0.0
        for s in range(horizon):
            P = centering.copy()
            for k in range(s, s + t):
                P = source.matrix_at(k) @ P
            worst = max(worst, float(np.linalg.norm(P, 2)))
        return worst

    candidates = [tau] if tau is not None else range(1, max_tau + 1)
    for t in candidates:
        ratio = worst_ratio(t)
        if ratio < 1.0:
            return t, 1.0 - ratio
    raise ValueError(f"Mixing source does not contract within tau <= {max_tau}")
