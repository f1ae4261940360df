# src/adapters/logistic.py
import logging

import numpy as np

from src.errors import ConvergenceError, NotDualFriendlyError, ShapeMismatchError

logger = logging.getLogger(__name__)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    # tanh 形式はオーバーフローしない
    return 0.5 * (1.0 + np.tanh(0.5 * t))


class LogisticNode:
    """
    ℓ2 正則化ロジスティック損失
    f(x) = (1/s) Σ_j log(1 + exp(−y_j z_jᵀx)) + (reg/2)‖x‖²。

    L = reg + λmax(ZᵀZ)/(4s)、μ = reg。
    lipschitz は損失部分の勾配ノルム上界 max_j ‖z_j‖。
    """

    NEWTON_MAX_ITER = 100

    def __init__(self, Z: np.ndarray, labels: np.ndarray, reg: float):
        Z = np.asarray(Z, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if Z.ndim != 2 or labels.shape != (Z.shape[0],):
            raise ShapeMismatchError(f"LogisticNode: Z {Z.shape} and labels {labels.shape} do not match")
        if reg < 0.0:
            raise ValueError("reg must be non-negative")
        self.Z = Z
        self.labels = labels
        self.reg = float(reg)
        self.samples, self.dim = Z.shape
        top = float(np.linalg.eigvalsh(Z.T @ Z)[-1]) if Z.size else 0.0
        self.L = self.reg + top / (4.0 * self.samples)
        self.mu = self.reg
        self.lipschitz = float(np.linalg.norm(Z, axis=1).max()) if Z.size else 0.0

    def _margins(self, x: np.ndarray) -> np.ndarray:
        return self.labels * (self.Z @ x)

    def value(self, x: np.ndarray) -> float:
        loss = np.logaddexp(0.0, -self._margins(x)).mean()
        return float(loss + 0.5 * self.reg * x @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        weights = _sigmoid(-self._margins(x))
        return -(self.Z.T @ (self.labels * weights)) / self.samples + self.reg * x

    def hessian(self, x: np.ndarray) -> np.ndarray:
        s = _sigmoid(self._margins(x))
        curvature = s * (1.0 - s)
        return (self.Z.T * curvature) @ self.Z / self.samples + self.reg * np.eye(self.dim)

    def conjugate_argmax(self, y: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """
        x(y) = argmax{⟨y,x⟩ − f(x)} を減衰ニュートン法で解く。
        停止条件は ‖∇f(x) − y‖ ≤ tol·max(1, ‖y‖)。

        Raises:
            NotDualFriendlyError: reg = 0（強凸でない）場合。
            ConvergenceError: 反復上限に達した場合。
        """
        if self.reg <= 0.0:
            raise NotDualFriendlyError("Conjugate argmax needs reg > 0")
        target = tol * max(1.0, float(np.linalg.norm(y)))
        x = y / self.L

        def phi(z: np.ndarray) -> float:
            return self.value(z) - float(y @ z)

        for _ in range(self.NEWTON_MAX_ITER):
            g = self.gradient(x) - y
            g_norm = float(np.linalg.norm(g))
            if g_norm <= target:
                return x
            d = np.linalg.solve(self.hessian(x), g)
            t = 1.0
            if g_norm > 1e-6:
                # 最適点近傍では関数値の差が丸め誤差に埋もれるため直線探索しない
                base = phi(x)
                slope = float(g @ d)
                while phi(x - t * d) > base - 1e-4 * t * slope and t > 1e-10:
                    t *= 0.5
            x = x - t * d

        raise ConvergenceError(f"Logistic conjugate Newton solve did not converge in {self.NEWTON_MAX_ITER} iterations")
