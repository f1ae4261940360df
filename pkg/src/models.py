# src/models.py
from typing import Any, Literal, Optional

import networkx as nx
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# CSVトレースのスキーマバージョン（列構成を変えたら上げる）
SCHEMA_VERSION = 1

# --- Network Models ---


class Graph(BaseModel):
    """
    無向グラフ（ノードは 0 始まりの整数）。

    Attributes:
        node_count (int): ノード数 m。
        edges (tuple[tuple[int, int], ...]): 辺集合。i < j に正規化済み、ソート済み。
    """
    model_config = ConfigDict(frozen=True)

    node_count: int = Field(ge=1, description="ノード数 m")
    edges: tuple[tuple[int, int], ...] = Field(default=(), description="正規化済み辺集合 (i<j, 0始まり)")

    @model_validator(mode="before")
    @classmethod
    def _normalize_edges(cls, data: Any) -> Any:
        if isinstance(data, dict) and "edges" in data:
            pairs = [tuple(sorted((int(i), int(j)))) for i, j in data["edges"]]
            data = {**data, "edges": tuple(sorted(pairs))}
        return data

    @model_validator(mode="after")
    def _check_edges(self) -> "Graph":
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise ValueError(f"edge ({i},{j}) out of range for {self.node_count} nodes")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i},{j})")
            seen.add((i, j))
        return self

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.node_count))
        g.add_edges_from(self.edges)
        return g

    @property
    def connected(self) -> bool:
        """辺集合から走査で判定した連結性フラグ。"""
        return nx.is_connected(self.to_networkx())

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


class GraphSequence(BaseModel):
    """
    時変グラフ列。任意の連続する window 個のグラフの和集合が連結（B連結性）。

    Attributes:
        graphs (tuple[Graph, ...]): ラウンド k ごとのグラフ。
        window (int): ウィンドウ長 B。
    """
    model_config = ConfigDict(frozen=True)

    graphs: tuple[Graph, ...] = Field(description="ラウンドごとのグラフ")
    window: int = Field(ge=1, description="B連結性のウィンドウ長 B")

    @property
    def rounds(self) -> int:
        return len(self.graphs)

    @property
    def node_count(self) -> int:
        return self.graphs[0].node_count


MatrixKind = Literal[
    "laplacian",  # グラフラプラシアン W̄
    "mixing",     # 二重確率混合行列 M
]


class SpectralSummary(BaseModel):
    """
    ラプラシアンまたは混合行列のスペクトル要約。

    Attributes:
        kind (MatrixKind): 行列の種類。
        lambda_max (float): 最大固有値（混合行列では I−M の値）。
        lambda_min_plus (float): 最小の非零固有値（混合行列では I−M の値）。
        lambda2_mix (float): 混合行列の第2絶対固有値（ラプラシアンでは I−W̄/λmax の値）。
        chi (float): グラフ条件数 χ。
        eigenvalues (list[float]): 昇順の全固有値。
    """
    kind: MatrixKind
    lambda_max: float
    lambda_min_plus: float
    lambda2_mix: float
    chi: float = Field(description="ラプラシアン: λmax/λ⁺min, 混合行列: 1/(1−λ₂)")
    eigenvalues: list[float] = Field(default_factory=list)


# --- Consensus Models ---


class ConsensusReport(BaseModel):
    """
    合意反復の実行レポート。

    Attributes:
        iterations_run (int): 実行ステップ数。
        final_error (float): 最終の ‖X−X̄‖_F。
        per_step_ratio (list[float]): 各ステップの縮小率 ‖X^{k+1}−X̄⁰‖/‖X^k−X̄⁰‖。
        errors (list[float]): ステップ 0..T の合意誤差。
        communication_rounds (int): 混合行列の乗算回数。
    """
    iterations_run: int = Field(ge=0)
    final_error: float = Field(ge=0.0)
    per_step_ratio: list[float] = Field(default_factory=list)
    errors: list[float] = Field(default_factory=list)
    communication_rounds: int = Field(default=0, ge=0)

    def to_frame(self) -> pd.DataFrame:
        """(step, error, ratio) 列の DataFrame。step 0 の ratio は NaN。"""
        ratios = [float("nan")] + list(self.per_step_ratio)
        return pd.DataFrame({
            "step": list(range(len(self.errors))),
            "error": self.errors,
            "ratio": ratios[: len(self.errors)],
        })


# --- Oracle Models ---


class TwoPointEstimate(BaseModel):
    """
    二点ゼロ次勾配推定の結果。

    Attributes:
        direction (np.ndarray): 単位球面上の方向 e。
        radius (float): 平滑化半径 r。
        estimate (np.ndarray): 推定ベクトル。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    direction: np.ndarray
    radius: float = Field(gt=0.0)
    estimate: np.ndarray

    @field_validator("direction")
    @classmethod
    def _unit_direction(cls, v: np.ndarray) -> np.ndarray:
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-12:
            raise ValueError("direction must be a unit vector")
        return v


# --- Problem Models ---

DomainKind = Literal[
    "all",      # 全空間
    "box",      # [lower, upper]^n
    "simplex",  # 確率単体
]


class Domain(BaseModel):
    """実行可能領域 Q の記述子。"""
    kind: DomainKind = "all"
    lower: float = Field(default=-1.0, description="box の下限")
    upper: float = Field(default=1.0, description="box の上限")

    @model_validator(mode="after")
    def _check_bounds(self) -> "Domain":
        if self.kind == "box" and not self.lower < self.upper:
            raise ValueError("box domain needs lower < upper")
        return self


class ConstantSummary(BaseModel):
    """
    局所・大域定数の要約。

    Attributes:
        mu_l (float): min μ_i。
        L_l (float): max L_i。
        mu_g (float): mean μ_i。
        L_g (float): mean L_i。
        kappa_l (float): L_l/μ_l（μ_l=0 なら inf）。
        kappa_g (float): L_g/μ_g（μ_g=0 なら inf）。
        lipschitz (float): 各ノードの劣勾配ノルム上界 M の最大値。
    """
    mu_l: float
    L_l: float
    mu_g: float
    L_g: float
    kappa_l: float
    kappa_g: float
    lipschitz: float = 0.0


class ReferenceSolution(BaseModel):
    """
    集中型の高精度参照解。

    Attributes:
        x_star (np.ndarray): 最適解。
        f_star (float): 最適値 Σ f_i(x*)。
        method_note (str): 求解方法。
        tolerance (float): 達成した残差。
        certified (bool): 要求精度を満たしたか。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x_star: np.ndarray
    f_star: float
    method_note: str
    tolerance: float
    certified: bool = True


# --- Run Records ---

RunStatus = Literal[
    "CONVERGED",         # 停止条件を満たした
    "BUDGET_EXHAUSTED",  # 反復予算を使い切った
    "DIVERGED",          # 発散ガードで中断
]

PRIMAL_COLUMNS = ["iter", "comm_rounds", "grad_calls", "f_residual", "consensus_error"]
PRIMAL_EXTRA_COLUMNS = ["zo_calls", "smooth_grad_calls"]
DUAL_COLUMNS = ["iter", "comm_rounds", "conj_calls", "grad_norm", "psi", "gap", "ax_norm"]


class IterationRecord(BaseModel):
    """主問題系アルゴリズムの1反復分の指標。"""
    iter: int
    comm_rounds: int
    grad_calls: int
    f_residual: float
    consensus_error: float
    zo_calls: Optional[int] = None
    smooth_grad_calls: Optional[int] = None


class RunRecord(BaseModel):
    """
    主問題系アルゴリズムの実行トレース。

    Attributes:
        algorithm (str): アルゴリズムID。
        rows (list[IterationRecord]): 反復ごとの指標。
        final_iterate (Optional[np.ndarray]): 最終反復点。
        status (RunStatus): 終了ステータス。
        phase_values (list[float]): 多段法の各フェーズ終了時の残差。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    algorithm: str
    rows: list[IterationRecord] = Field(default_factory=list)
    final_iterate: Optional[np.ndarray] = None
    status: RunStatus = "BUDGET_EXHAUSTED"
    phase_values: list[float] = Field(default_factory=list)

    @property
    def last(self) -> IterationRecord:
        return self.rows[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def first_reaching(self, eps: float) -> Optional[IterationRecord]:
        """f_residual ≤ eps かつ consensus_error ≤ eps を初めて満たす行。"""
        for row in self.rows:
            if row.f_residual <= eps and row.consensus_error <= eps:
                return row
        return None

    def rounds_to_eps(self, eps: float) -> Optional[int]:
        """ε 到達時点の通信ラウンド数（未到達なら None）。"""
        row = self.first_reaching(eps)
        return row.comm_rounds if row is not None else None

    def to_frame(self) -> pd.DataFrame:
        columns = list(PRIMAL_COLUMNS)
        for extra in PRIMAL_EXTRA_COLUMNS:
            if any(getattr(r, extra) is not None for r in self.rows):
                columns.append(extra)
        data = [r.model_dump() for r in self.rows]
        return pd.DataFrame(data, columns=columns)


class DualIterationRecord(BaseModel):
    """双対法の1反復分の指標。"""
    iter: int
    comm_rounds: int
    conj_calls: int
    grad_norm: float
    psi: float
    gap: float
    ax_norm: float


class DualRunRecord(BaseModel):
    """
    双対法の実行トレース。

    Attributes:
        algorithm (str): アルゴリズムID。
        rows (list[DualIterationRecord]): 反復ごとの指標。
        y_final (Optional[np.ndarray]): 最終双対点（持ち上げ形式では Aᵀy）。
        x_final (Optional[np.ndarray]): 回復した主解 x̃。
        status (RunStatus): 終了ステータス。
        phase_grad_norms (list[float]): 再始動法の各フェーズ終了時の勾配ノルム。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    algorithm: str
    rows: list[DualIterationRecord] = Field(default_factory=list)
    y_final: Optional[np.ndarray] = None
    x_final: Optional[np.ndarray] = None
    status: RunStatus = "BUDGET_EXHAUSTED"
    phase_grad_norms: list[float] = Field(default_factory=list)

    @property
    def last(self) -> DualIterationRecord:
        return self.rows[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows], columns=DUAL_COLUMNS)


# --- Algorithm Parameter Models ---


class InexactOracleParams(BaseModel):
    """
    合意サブルーチン付き分散AGDの不正確オラクル・パラメータ。

    Attributes:
        delta (float): オラクルの不正確さ δ。
        L_model (float): モデルの平滑度 2L_g。
        mu_model (float): モデルの強凸度 μ_g/2。
        delta_prime (float): 合意精度 δ′。
        T (Optional[int]): 外側1反復あたりの合意反復回数。
        tau (Optional[float]): 縮小ウィンドウ長 τ。
        lam (Optional[float]): ウィンドウあたりの縮小量 λ。
        D (Optional[float]): 合意誤差の上界定数。
    """
    delta: float
    L_model: float
    mu_model: float
    delta_prime: float
    T: Optional[int] = None
    tau: Optional[float] = None
    lam: Optional[float] = None
    D: Optional[float] = None


class CertificateResult(BaseModel):
    """双対点から主解の精度を保証する証明書の評価結果。"""
    grad_norm: float
    y_norm: float
    R_y: float
    eps: float
    f_gap: float
    ax_norm: float
    hypotheses_hold: bool
    conclusions_hold: bool

    @property
    def passed(self) -> bool:
        return (not self.hypotheses_hold) or self.conclusions_hold


# --- Experiment Models ---

ProblemFamily = Literal["quadratic", "logistic", "l1_regression", "hinge"]
GraphFamily = Literal["path", "cycle", "star", "complete", "erdos_renyi"]
MixingKind = Literal["metropolis", "laplacian"]


class ProblemSpec(BaseModel):
    """問題インスタンスの生成設定。"""
    model_config = ConfigDict(extra="forbid")

    family: ProblemFamily = "quadratic"
    m: int = Field(ge=1)
    n: int = Field(default=4, ge=1)
    kappa: float = Field(default=10.0, ge=1.0)
    samples_per_node: int = Field(default=20, ge=1)
    reg_mu: float = Field(default=0.1, ge=0.0)
    domain: Domain = Field(default_factory=Domain, description="非平滑族のノードごとの実行可能領域 Q")
    seed: Optional[int] = Field(default=None, description="未指定なら root seed から派生")


class GraphSpec(BaseModel):
    """通信グラフの生成設定。"""
    model_config = ConfigDict(extra="forbid")

    family: GraphFamily = "path"
    m: int = Field(ge=2)
    mixing: MixingKind = "metropolis"
    drop_prob: float = Field(default=0.0, ge=0.0, lt=1.0)
    window: int = Field(default=1, ge=1, description="B連結性のウィンドウ長 B")
    rounds: Optional[int] = Field(default=None, ge=1, description="時変列の長さ（巡回使用）")
    edge_prob: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    seed: Optional[int] = None


class AlgorithmSpec(BaseModel):
    """アルゴリズムIDとパラメータ。"""
    model_config = ConfigDict(extra="forbid")

    id: str
    params: dict[str, Any] = Field(default_factory=dict)


class ExperimentConfig(BaseModel):
    """
    1回の実験の全設定。

    Attributes:
        problem (ProblemSpec): 問題設定。
        graph (GraphSpec): グラフ設定。
        algorithm (AlgorithmSpec): アルゴリズム設定。
        budget (int): 反復予算。
        eps (float): 目標精度 ε。
        output_dir (str): 出力ディレクトリ。
        seed (int): ルートシード（64bit）。
    """
    model_config = ConfigDict(extra="forbid")

    problem: ProblemSpec
    graph: GraphSpec
    algorithm: AlgorithmSpec
    budget: int = Field(default=1000, ge=1)
    eps: float = Field(default=1e-6, gt=0.0)
    output_dir: str = "runs/default"
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_node_counts(self) -> "ExperimentConfig":
        if self.problem.m != self.graph.m:
            raise ValueError(
                f"problem.m ({self.problem.m}) and graph.m ({self.graph.m}) must be equal"
            )
        return self


ExperimentStatus = Literal[
    "OK",        # 正常終了
    "DIVERGED",  # 発散（終了コード2）
    "ERROR",     # その他の失敗
]


class ExperimentResult(BaseModel):
    """run_experiment の結果。"""
    status: ExperimentStatus
    algorithm: str
    summary: dict[str, Any] = Field(default_factory=dict)
    trace_path: Optional[str] = None
    summary_path: Optional[str] = None
    message: str = ""


SweepVariable = Literal["eps", "chi", "kappa"]


class SlopeFit(BaseModel):
    """1指標の両対数回帰の結果。"""
    metric: str
    slope: float
    theory_slope: Optional[float] = None
    tolerance: float = 0.35
    passed: Optional[bool] = None


class ScalingReport(BaseModel):
    """
    スイープ実験のスケーリングレポート。

    Attributes:
        variable (SweepVariable): 掃引変数。
        values (list[float]): 設定値。
        x (list[float]): 回帰の横軸（実測の χ・κ または ε）。
        metrics (dict[str, list[float]]): 指標ごとの測定値。
        fits (list[SlopeFit]): 指標ごとの傾き。
        failures (list[str]): 失敗したメンバーの説明。
    """
    variable: SweepVariable
    algorithm: str
    values: list[float]
    x: list[float] = Field(default_factory=list)
    metrics: dict[str, list[float]] = Field(default_factory=dict)
    fits: list[SlopeFit] = Field(default_factory=list)
    failures: list[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(f.passed is not False for f in self.fits)
