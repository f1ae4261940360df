# src/interfaces.py
from typing import Protocol, runtime_checkable

import numpy as np

# ----------------------------------------------------
# A. Node Function Protocol
# ----------------------------------------------------


@runtime_checkable
class NodeFunction(Protocol):
    """
    ノード i の局所目的関数 f_i を抽象化するインターフェース。
    具体的な関数族（二次・ロジスティック・非平滑）は src/adapters/ に実装する。

    Attributes:
        dim (int): 変数の次元 n。
        mu (float): 強凸性定数 μ_i（0 可）。
        L (float): 平滑性定数 L_i（非平滑なら 0）。
        lipschitz (float): 劣勾配ノルムの上界 M。
    """
    dim: int
    mu: float
    L: float
    lipschitz: float

    def value(self, x: np.ndarray) -> float:
        """
        関数値 f_i(x) を返す。

        Args:
            x (np.ndarray): 評価点 (n,)

        Returns:
            float: 関数値
        """
        ...

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """
        勾配（非平滑関数では中点選択の劣勾配）を返す。

        Args:
            x (np.ndarray): 評価点 (n,)

        Returns:
            np.ndarray: 勾配ベクトル (n,)
        """
        ...


@runtime_checkable
class DualFriendlyFunction(NodeFunction, Protocol):
    """共役オラクル x(y) = argmax{⟨y,x⟩ − f(x)} を持つ強凸関数。"""

    def conjugate_argmax(self, y: np.ndarray) -> np.ndarray:
        """
        共役問題の最大化点を返す。

        Args:
            y (np.ndarray): 双対変数 (n,)

        Returns:
            np.ndarray: x(y)

        Raises:
            ConvergenceError: 内部ソルバーが反復上限に達した場合。
        """
        ...


# ----------------------------------------------------
# B. Mixing Source Protocol
# ----------------------------------------------------


class MixingSource(Protocol):
    """
    ラウンド k の混合行列を返す情報源（静的・時変の両方）。
    """
    size: int

    def matrix_at(self, k: int) -> np.ndarray:
        """
        ラウンド k の m×m 混合行列を返す。

        Args:
            k (int): ラウンド番号（0始まり）

        Returns:
            np.ndarray: 混合行列
        """
        ...


# ----------------------------------------------------
# C. Bregman Geometry Protocol
# ----------------------------------------------------


class BregmanGeometry(Protocol):
    """
    スライディング系の prox ステップで使う幾何（距離生成関数と領域）。

    Attributes:
        kind (str): "euclidean" または "entropy"。
        diameter (float): ノルムでの直径 D_Q（有界でなければ inf）。
        divergence_diameter (float): D_{Q,V}。
        dual_norm (str): 勾配側の双対ノルム名 ("l2" / "linf")。
    """
    kind: str
    diameter: float
    divergence_diameter: float
    dual_norm: str

    def divergence(self, x: np.ndarray, u: np.ndarray) -> float:
        """Bregman ダイバージェンス V(x, u)。"""
        ...

    def prox_step(self, linear: np.ndarray, beta: float, x: np.ndarray,
                  p: float, u_prev: np.ndarray) -> np.ndarray:
        """
        argmin_u ⟨linear, u⟩ + β V(x,u) + β p V(u_prev, u) を閉形式で解く。

        Args:
            linear (np.ndarray): 線形項の係数
            beta (float): β > 0
            x (np.ndarray): 外側の中心
            p (float): 内側の重み p_t > 0
            u_prev (np.ndarray): 直前の内側反復

        Returns:
            np.ndarray: 実行可能な解 u
        """
        ...

    def center(self, dim: int) -> np.ndarray:
        """領域の解析的中心（縮小操作の基準点）。"""
        ...

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        """x が領域内にあるか。"""
        ...
