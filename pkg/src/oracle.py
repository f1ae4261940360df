# src/oracle.py
import logging
import math
import threading
from typing import Optional

import numpy as np

from src.interfaces import NodeFunction
from src.models import TwoPointEstimate

logger = logging.getLogger(__name__)

ORACLE_KINDS = ("value", "gradient", "stochastic_gradient", "zeroth_order")


class OracleSuite:
    """
    1つの凸関数に対するオラクル群（決定的1次・確率的1次・ゼロ次）と呼び出しカウンタ。

    確率的1次オラクル: ∇f(x) + b + ζ,  ζ ~ N(0, (σ/√n)² I),  b = δ·1/√n（‖b‖ = δ）
    ゼロ次オラクル:   f̃(x, ξ) = f(x) + ⟨ξ, x⟩ + Δ(x),  ξ ~ N(0, (σ/√n)² I),  Δ(x) = Δ·sign(sin Σx_i)

    カウンタは排他ロック下で更新されるため、スレッド間で共有してよい。
    """

    def __init__(self, function: NodeFunction, sigma: float = 0.0,
                 delta: float = 0.0, Delta: float = 0.0):
        """
        Args:
            function (NodeFunction): 対象関数
            sigma (float): ノイズ水準 σ ≥ 0
            delta (float): 確率的勾配のバイアス水準 δ ≥ 0
            Delta (float): ゼロ次オラクルの敵対的ノイズ上界 Δ ≥ 0
        """
        if min(sigma, delta, Delta) < 0.0:
            raise ValueError("Noise levels must be non-negative")
        self.function = function
        self.dim = function.dim
        self.sigma = sigma
        self.delta = delta
        self.Delta = Delta
        self.bias = np.full(self.dim, delta / math.sqrt(self.dim))
        self.counters = {kind: 0 for kind in ORACLE_KINDS}
        self._lock = threading.Lock()

    def _count(self, kind: str, calls: int = 1) -> None:
        with self._lock:
            self.counters[kind] += calls

    @property
    def noiseless(self) -> bool:
        return self.sigma == 0.0 and self.delta == 0.0

    # --- 1次オラクル ---

    def value(self, x: np.ndarray) -> float:
        self._count("value")
        return float(self.function.value(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        self._count("gradient")
        return self.function.gradient(x)

    def stochastic_gradient(self, x: np.ndarray, rng: Optional[np.random.Generator] = None,
                            batch: int = 1) -> np.ndarray:
        """
        バッチ平均した確率的勾配を返す。σ=δ=0 では乱数を消費せず決定的勾配と一致する。

        Args:
            x (np.ndarray): 評価点
            rng (Optional[np.random.Generator]): 乱数生成器（σ>0 なら必須）
            batch (int): バッチサイズ r

        Returns:
            np.ndarray: 推定勾配
        """
        self._count("stochastic_gradient", batch)
        g = self.function.gradient(x)
        if self.noiseless:
            return g
        g = g + self.bias
        if self.sigma > 0.0:
            if rng is None:
                raise ValueError("stochastic_gradient with sigma > 0 needs an RNG")
            noise = rng.normal(0.0, self.sigma / math.sqrt(self.dim), size=(batch, self.dim))
            g = g + noise.mean(axis=0)
        return g

    # --- ゼロ次オラクル ---

    def draw_xi(self, rng: Optional[np.random.Generator]) -> Optional[np.ndarray]:
        """ゼロ次オラクルの確率変数 ξ を引く。σ=0 なら None。"""
        if self.sigma == 0.0:
            return None
        if rng is None:
            raise ValueError("zeroth-order oracle with sigma > 0 needs an RNG")
        return rng.normal(0.0, self.sigma / math.sqrt(self.dim), size=self.dim)

    def adversarial_noise(self, x: np.ndarray) -> float:
        """有界な非ランダムノイズ Δ(x) = Δ·sign(sin Σx_i)。"""
        if self.Delta == 0.0:
            return 0.0
        return self.Delta * float(np.sign(math.sin(float(np.sum(x)))))

    def zeroth_value(self, x: np.ndarray, rng: Optional[np.random.Generator] = None,
                     xi: Optional[np.ndarray] = None) -> float:
        """
        f̃(x, ξ) を返す。xi を渡した場合はそれを使い、乱数は消費しない。
        """
        self._count("zeroth_order")
        if xi is None and rng is not None:
            xi = self.draw_xi(rng)
        val = float(self.function.value(x))
        if xi is not None:
            val += float(xi @ x)
        return val + self.adversarial_noise(x)


# ----------------------------------------------------
# Estimators
# ----------------------------------------------------


def sphere_sample(dim: int, rng: np.random.Generator) -> np.ndarray:
    """
    単位球面上の一様分布からサンプルする（ガウス正規化）。

    Args:
        dim (int): 次元 n ≥ 1
        rng (np.random.Generator): 乱数生成器

    Returns:
        np.ndarray: ‖e‖₂ = 1 のベクトル
    """
    if dim < 1:
        raise ValueError(f"Sphere dimension must be >= 1 (got {dim})")
    while True:
        g = rng.standard_normal(dim)
        norm = float(np.linalg.norm(g))
        if norm > 0.0:
            e = g / norm
            # 丸め誤差で単位長からずれた場合に再正規化
            return e / np.linalg.norm(e)


def two_point_estimate(suite: OracleSuite, x: np.ndarray, r: float,
                       rng: np.random.Generator,
                       direction: Optional[np.ndarray] = None) -> TwoPointEstimate:
    """
    二点推定 (n/2r)(f̃(x+re, ξ) − f̃(x−re, ξ)) e。両方の評価で同じ ξ を使う。
    ゼロ次オラクルを2回呼ぶ。

    Args:
        suite (OracleSuite): オラクル
        x (np.ndarray): 評価点（x ± re が実行可能であることは呼び出し側が保証）
        r (float): 平滑化半径 r > 0
        rng (np.random.Generator): 乱数生成器
        direction (Optional[np.ndarray]): 方向 e を固定する場合に指定

    Returns:
        TwoPointEstimate: 方向・半径・推定値
    """
    if r <= 0.0:
        raise ValueError(f"Smoothing radius must be positive (got {r})")
    n = suite.dim
    e = sphere_sample(n, rng) if direction is None else np.asarray(direction, dtype=float)
    xi = suite.draw_xi(rng)
    f_plus = suite.zeroth_value(x + r * e, xi=xi)
    f_minus = suite.zeroth_value(x - r * e, xi=xi)
    estimate = (n / (2.0 * r)) * (f_plus - f_minus) * e
    return TwoPointEstimate(direction=e, radius=r, estimate=estimate)


def full_finite_diff(suite: OracleSuite, x: np.ndarray, r: float,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    座標方向の中心差分 (1/2r)Σ(f̃(x+rh_i, ξ) − f̃(x−rh_i, ξ))h_i。
    ゼロ次オラクルを 2n 回呼ぶ。1/2 係数付きなので二次関数では厳密。
    """
    if r <= 0.0:
        raise ValueError(f"Smoothing radius must be positive (got {r})")
    n = suite.dim
    xi = suite.draw_xi(rng)
    grad = np.zeros(n)
    for i in range(n):
        h = np.zeros(n)
        h[i] = r
        grad[i] = (suite.zeroth_value(x + h, xi=xi) - suite.zeroth_value(x - h, xi=xi)) / (2.0 * r)
    return grad


def smoothed_value_stats(suite: OracleSuite, x: np.ndarray, r: float, samples: int,
                         rng: np.random.Generator) -> tuple[float, float]:
    """
    平滑化関数 F(x) = E_e[f(x + re)] のモンテカルロ推定と標準誤差。
    真の関数値を使い、オラクルのカウンタは増やさない（テスト専用）。

    Returns:
        tuple[float, float]: (平均, 標準誤差)
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = suite.dim
    g = rng.standard_normal((samples, n))
    e = g / np.linalg.norm(g, axis=1, keepdims=True)
    vals = np.array([suite.function.value(x + r * ei) for ei in e])
    stderr = float(vals.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return float(vals.mean()), stderr


def smoothed_value_mc(suite: OracleSuite, x: np.ndarray, r: float, samples: int,
                      rng: np.random.Generator) -> float:
    """F(x) のモンテカルロ推定値。"""
    return smoothed_value_stats(suite, x, r, samples, rng)[0]


def estimate_p_star(dim: int, dual_norm: str = "l2", samples: int = 20_000,
                    rng: Optional[np.random.Generator] = None) -> float:
    """
    p* = (E‖e‖*⁴)^{1/4} をモンテカルロで推定する。

    Args:
        dim (int): 次元
        dual_norm (str): "l2"（ユークリッド、厳密に 1）または "linf"（単体/ℓ1 設定）
        samples (int): サンプル数
        rng (Optional[np.random.Generator]): 乱数生成器

    Returns:
        float: p*
    """
    if dual_norm == "l2":
        return 1.0
    if dual_norm != "linf":
        raise ValueError(f"Unknown dual norm: {dual_norm}")
    rng = rng if rng is not None else np.random.default_rng(0)
    g = rng.standard_normal((samples, dim))
    e = g / np.linalg.norm(g, axis=1, keepdims=True)
    norms = np.abs(e).max(axis=1)
    return float(np.mean(norms ** 4) ** 0.25)
