# src/adapters/quadratic.py
import logging
import math

import numpy as np

from src.errors import NotDualFriendlyError, ShapeMismatchError

logger = logging.getLogger(__name__)


class QuadraticNode:
    """
    二次関数 f(x) = ½xᵀAx − bᵀx（A は対称半正定値）。
    μ, L は A の固有値の最小・最大から厳密に求める。
    """

    def __init__(self, A: np.ndarray, b: np.ndarray):
        """
        Args:
            A (np.ndarray): n×n 対称半正定値行列
            b (np.ndarray): n ベクトル
        """
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise ShapeMismatchError(f"QuadraticNode: A {A.shape} and b {b.shape} do not match")
        self.A = (A + A.T) / 2.0
        self.b = b
        self.dim = A.shape[0]
        eig = np.linalg.eigvalsh(self.A)
        if eig[0] < -1e-10 * max(1.0, abs(eig[-1])):
            raise ValueError(f"QuadraticNode: A is not positive semidefinite (min eigenvalue {eig[0]:.3e})")
        self.mu = max(float(eig[0]), 0.0)
        self.L = float(eig[-1])
        # 全空間では勾配は有界でない
        self.lipschitz = math.inf

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.A @ x - self.b @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x - self.b

    def conjugate_argmax(self, y: np.ndarray) -> np.ndarray:
        """
        x(y) = A⁻¹(y + b)。

        Raises:
            NotDualFriendlyError: A が正則でない（μ = 0）場合。
        """
        if self.mu <= 0.0:
            raise NotDualFriendlyError("Conjugate argmax needs a strongly convex quadratic")
        return np.linalg.solve(self.A, y + self.b)
