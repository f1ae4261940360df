# src/errors.py
from typing import Any, Optional


class DecoptError(Exception):
    """パッケージ内で送出される例外の基底クラス。"""


class GraphError(DecoptError, ValueError):
    """
    グラフ構造が不正な場合の例外。
    自己ループ・重複辺・非連結グラフ、および時変グラフ列のB連結性が認証できなかった場合に送出する。
    """


class ShapeMismatchError(DecoptError, ValueError):
    """行列・状態行列の次元が一致しない場合の例外。"""


class ConfigError(DecoptError, ValueError):
    """
    実験設定の検証エラー。

    Attributes:
        fields (list[str]): 問題のあるフィールドのパス一覧。
    """

    def __init__(self, message: str, fields: Optional[list[str]] = None):
        super().__init__(message)
        self.fields = fields or []


class NotDualFriendlyError(DecoptError, ValueError):
    """共役オラクルを持たない（強凸でない）問題に双対法を適用しようとした場合の例外。"""


class DivergenceError(DecoptError, RuntimeError):
    """
    反復が発散した場合の例外（‖X‖ が閾値を超えた、または非有限値が出現した）。

    Attributes:
        algorithm (str): アルゴリズム名。
        iteration (int): 発散を検出した反復番号。
        value (float): 検出時のノルム値。
        record (Any): 発散直前までのトレース（RunRecord 等）。
    """

    def __init__(self, algorithm: str, iteration: int, value: float, record: Any = None):
        super().__init__(f"{algorithm} diverged at iteration {iteration} (norm={value:.3e})")
        self.algorithm = algorithm
        self.iteration = iteration
        self.value = value
        self.record = record


class CertificationError(DecoptError, RuntimeError):
    """参照解が要求精度で認証できなかった場合の例外。"""


class ConvergenceError(DecoptError, RuntimeError):
    """内部ソルバー（共役計算のニュートン法など）が反復上限に達した場合の例外。"""
