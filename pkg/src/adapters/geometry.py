# src/adapters/geometry.py
import logging
import math

import numpy as np

from src.models import Domain

logger = logging.getLogger(__name__)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """確率単体へのユークリッド射影（ソートによる閾値計算）。"""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, n + 1)
    cond = u - (css - 1.0) / idx > 0
    rho = int(idx[cond][-1])
    theta = (css[rho - 1] - 1.0) / rho
    return np.maximum(v - theta, 0.0)


def _split_blocks(dim: int, blocks: int) -> int:
    if blocks < 1 or dim % blocks != 0:
        raise ValueError(f"Dimension {dim} cannot be split into {blocks} equal blocks")
    return dim // blocks


class EuclideanGeometry:
    """
    ν(x) = ½‖x‖²、V(x,u) = ½‖u − x‖² の幾何。領域は全空間・箱・単体。
    prox ステップは無制約解の射影で閉形式に解ける。

    単体は blocks 個の単体の直積として扱う（積み上げた m ノード分の変数で blocks = m）。
    """

    kind = "euclidean"
    dual_norm = "l2"

    def __init__(self, domain: Domain, dim: int, blocks: int = 1):
        self.domain = domain
        self.dim = dim
        self.blocks = blocks
        self.block_size = _split_blocks(dim, blocks)
        if domain.kind == "all":
            self.diameter = math.inf
        elif domain.kind == "box":
            self.diameter = (domain.upper - domain.lower) * math.sqrt(dim)
        else:
            self.diameter = math.sqrt(2.0 * blocks)
        # max V = D²/2 なので D_{Q,V} = D_Q
        self.divergence_diameter = self.diameter

    def divergence(self, x: np.ndarray, u: np.ndarray) -> float:
        d = u - x
        return 0.5 * float(d @ d)

    def project(self, v: np.ndarray) -> np.ndarray:
        if self.domain.kind == "box":
            return np.clip(v, self.domain.lower, self.domain.upper)
        if self.domain.kind == "simplex":
            rows = np.reshape(v, (self.blocks, self.block_size))
            return np.concatenate([project_simplex(row) for row in rows])
        return v

    def prox_step(self, linear: np.ndarray, beta: float, x: np.ndarray,
                  p: float, u_prev: np.ndarray) -> np.ndarray:
        unconstrained = (beta * (x + p * u_prev) - linear) / (beta * (1.0 + p))
        return self.project(unconstrained)

    def center(self, dim: int) -> np.ndarray:
        if self.domain.kind == "simplex":
            return np.full(dim, 1.0 / self.block_size)
        if self.domain.kind == "box":
            return np.full(dim, 0.5 * (self.domain.lower + self.domain.upper))
        return np.zeros(dim)

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        if self.domain.kind == "box":
            return bool(np.all(x >= self.domain.lower - tol) and np.all(x <= self.domain.upper + tol))
        if self.domain.kind == "simplex":
            sums = np.reshape(x, (self.blocks, self.block_size)).sum(axis=1)
            return bool(np.all(x >= -tol) and np.all(np.abs(sums - 1.0) <= tol))
        return bool(np.all(np.isfinite(x)))


class EntropyGeometry:
    """
    単体（の直積）上のエントロピー幾何。V(x,u) = Σ u_i ln(u_i/x_i)（KL の和）。

    ノルムはブロックごとの ℓ1 ノルムを ℓ2 で束ねたもの（blocks = 1 なら ℓ1）。
    KL の和はこのノルムに関して 1-強凸で、D_Q = 2√blocks、D_{Q,V} = √(2·blocks·ln n_b)。
    prox ステップはブロックごとの乗法的更新で閉形式に解ける。
    """

    kind = "entropy"
    dual_norm = "linf"

    def __init__(self, domain: Domain, dim: int, blocks: int = 1):
        if domain.kind != "simplex":
            raise ValueError(f"Entropy geometry has a closed-form prox only on the simplex (got {domain.kind})")
        self.domain = domain
        self.dim = dim
        self.blocks = blocks
        self.block_size = _split_blocks(dim, blocks)
        self.diameter = 2.0 * math.sqrt(blocks)
        n_b = self.block_size
        self.divergence_diameter = math.sqrt(2.0 * blocks * math.log(n_b)) if n_b > 1 else 1.0

    def norm(self, d: np.ndarray) -> float:
        per_block = np.abs(np.reshape(d, (self.blocks, self.block_size))).sum(axis=1)
        return float(np.sqrt(np.sum(per_block ** 2)))

    def divergence(self, x: np.ndarray, u: np.ndarray) -> float:
        mask = u > 0.0
        return float(np.sum(u[mask] * (np.log(u[mask]) - np.log(x[mask]))))

    def prox_step(self, linear: np.ndarray, beta: float, x: np.ndarray,
                  p: float, u_prev: np.ndarray) -> np.ndarray:
        log_x = np.log(np.maximum(x, 1e-300))
        log_prev = np.log(np.maximum(u_prev, 1e-300))
        logits = (log_x + p * log_prev - linear / beta) / (1.0 + p)
        logits = np.reshape(logits, (self.blocks, self.block_size))
        logits = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return np.ravel(w / w.sum(axis=1, keepdims=True))

    def project(self, v: np.ndarray) -> np.ndarray:
        rows = np.reshape(v, (self.blocks, self.block_size))
        return np.concatenate([project_simplex(row) for row in rows])

    def center(self, dim: int) -> np.ndarray:
        return np.full(dim, 1.0 / self.block_size)

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        sums = np.reshape(x, (self.blocks, self.block_size)).sum(axis=1)
        return bool(np.all(x >= -tol) and np.all(np.abs(sums - 1.0) <= tol))


GEOMETRIES = ("euclidean", "entropy")


def make_geometry(kind: str, domain: Domain, dim: int, blocks: int = 1):
    """
    名前から幾何を構築する。

    Raises:
        ValueError: 未知の種類、または閉形式 prox がない組み合わせ。
    """
    if kind == "euclidean":
        return EuclideanGeometry(domain, dim, blocks)
    if kind == "entropy":
        return EntropyGeometry(domain, dim, blocks)
    raise ValueError(f"Unknown geometry: {kind}")
