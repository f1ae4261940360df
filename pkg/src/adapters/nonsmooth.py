# src/adapters/nonsmooth.py
import logging

import numpy as np

from src.errors import ShapeMismatchError

logger = logging.getLogger(__name__)


class L1RegressionNode:
    """
    ℓ1 回帰 f(x) = scale·Σ_j |a_jᵀx − b_j|。
    劣勾配は劣微分区間の中点を選ぶ（残差 0 では sign(0) = 0）。
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, scale: float = 1.0):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise ShapeMismatchError(f"L1RegressionNode: A {A.shape} and b {b.shape} do not match")
        self.A = A
        self.b = b
        self.scale = float(scale)
        self.dim = A.shape[1]
        self.mu = 0.0
        self.L = 0.0
        self.lipschitz = self.scale * float(np.linalg.norm(A, axis=1).sum())

    def value(self, x: np.ndarray) -> float:
        return self.scale * float(np.abs(self.A @ x - self.b).sum())

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.scale * (self.A.T @ np.sign(self.A @ x - self.b))


class HingeNode:
    """
    正則化ヒンジ損失 f(x) = (1/s)Σ_j max(0, 1 − y_j z_jᵀx) + (reg/2)‖x‖²。
    マージンがちょうど 1 の点では劣微分区間の中点（重み 1/2）を選ぶ。
    """

    def __init__(self, Z: np.ndarray, labels: np.ndarray, reg: float = 0.0):
        Z = np.asarray(Z, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if Z.ndim != 2 or labels.shape != (Z.shape[0],):
            raise ShapeMismatchError(f"HingeNode: Z {Z.shape} and labels {labels.shape} do not match")
        self.Z = Z
        self.labels = labels
        self.reg = float(reg)
        self.samples, self.dim = Z.shape
        self.mu = self.reg
        self.L = 0.0
        self.lipschitz = float(np.linalg.norm(Z, axis=1).max())

    def value(self, x: np.ndarray) -> float:
        margins = self.labels * (self.Z @ x)
        return float(np.maximum(0.0, 1.0 - margins).mean() + 0.5 * self.reg * x @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        margins = self.labels * (self.Z @ x)
        weights = np.where(margins < 1.0, 1.0, np.where(margins == 1.0, 0.5, 0.0))
        return -(self.Z.T @ (weights * self.labels)) / self.samples + self.reg * x
