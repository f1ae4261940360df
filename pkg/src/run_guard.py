# src/run_guard.py
import logging
import math
from typing import Any, Optional

import numpy as np

from src.errors import DivergenceError

logger = logging.getLogger(__name__)

DEFAULT_DIVERGENCE_THRESHOLD = 1e10


class RunGuard:
    """
    反復の健全性を監視し、発散した実行を打ち切るクラス。
    全アルゴリズムが毎反復 check() を呼ぶ。
    """

    def __init__(self, config: Optional[dict] = None):
        """
        RunGuardを初期化する。

        Args:
            config (Optional[dict]): ガード設定（divergence_threshold）
        """
        config = config or {}
        self.threshold = config.get("divergence_threshold", DEFAULT_DIVERGENCE_THRESHOLD)
        # 設定欠落時は既定値に戻す
        if self.threshold is None or self.threshold <= 0:
            self.threshold = DEFAULT_DIVERGENCE_THRESHOLD

    def check(self, X: np.ndarray, iteration: int, algorithm: str, record: Any = None) -> None:
        """
        状態のノルムを検査する。

        Args:
            X (np.ndarray): 状態行列
            iteration (int): 反復番号
            algorithm (str): アルゴリズム名
            record (Any): それまでのトレース（例外に添付）

        Raises:
            DivergenceError: 非有限値またはノルムが閾値を超えた場合。
        """
        norm = float(np.linalg.norm(X))
        if not math.isfinite(norm) or norm > self.threshold:
            logger.error(f"Divergence guard: {algorithm} at iteration {iteration}, norm={norm:.3e}")
            raise DivergenceError(algorithm, iteration, norm, record)

    @staticmethod
    def validate_step(name: str, value: float) -> float:
        """
        ステップサイズ等の正値パラメータを検証する。

        Raises:
            ValueError: 値が正の有限数でない場合。
        """
        if value is None or not math.isfinite(value) or value <= 0.0:
            raise ValueError(f"{name} must be a positive finite number (got {value})")
        return float(value)

    @staticmethod
    def validate_budget(name: str, value: int) -> int:
        if value < 1:
            raise ValueError(f"{name} must be >= 1 (got {value})")
        return int(value)
