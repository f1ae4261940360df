# src/netgraph.py
import logging
import math
from pathlib import Path
from typing import Iterable, Optional

import networkx as nx
import numpy as np
import pandas as pd

from src.errors import GraphError, ShapeMismatchError
from src.models import Graph, GraphSequence, MatrixKind, SpectralSummary

logger = logging.getLogger(__name__)

GRAPH_FAMILIES = ("path", "cycle", "star", "complete", "erdos_renyi")

# 非零固有値とみなす相対閾値（λmax に対する比）
EIGEN_REL_THRESHOLD = 1e-9
# 不定値とみなす負の固有値の相対閾値
INDEFINITE_REL_THRESHOLD = 1e-8


# --- Graph construction ---


def make_graph(m: int, edges: Iterable[tuple[int, int]]) -> Graph:
    """
    0 始まりの辺リストから Graph を構築する。

    Args:
        m (int): ノード数
        edges (Iterable[tuple[int, int]]): 辺

    Returns:
        Graph: 検証済みグラフ

    Raises:
        GraphError: 自己ループ・重複辺・範囲外ノードを含む場合。
    """
    pairs = [(int(i), int(j)) for i, j in edges]
    normalized = [tuple(sorted(p)) for p in pairs]
    for i, j in normalized:
        if i == j:
            raise GraphError(f"Self-loop at node {i}")
        if not (0 <= i < m and 0 <= j < m):
            raise GraphError(f"Edge ({i},{j}) out of range for {m} nodes")
    if len(set(normalized)) != len(normalized):
        raise GraphError("Duplicate edges in edge list")
    return Graph(node_count=m, edges=tuple(normalized))


def _from_networkx(g: nx.Graph) -> Graph:
    return make_graph(g.number_of_nodes(), g.edges())


def is_connected(g: Graph) -> bool:
    """幅優先探索で連結性を判定する。"""
    if g.node_count == 1:
        return True
    return nx.is_connected(g.to_networkx())


def generate_graph(family: str, m: int, seed: int = 0,
                   edge_prob: Optional[float] = None, max_attempts: int = 200) -> Graph:
    """
    指定された族の連結グラフを生成する。

    Args:
        family (str): path / cycle / star / complete / erdos_renyi
        m (int): ノード数 (m ≥ 2)
        seed (int): 乱数シード（erdos_renyi のみ使用）
        edge_prob (Optional[float]): erdos_renyi の辺確率。未指定なら min(1, 2 ln m / m)
        max_attempts (int): erdos_renyi の再試行上限

    Returns:
        Graph: 連結グラフ

    Raises:
        GraphError: m < 2、未知の族、または再試行上限で連結にならない場合。
    """
    if m < 2:
        raise GraphError(f"Graph needs at least 2 nodes (got m={m})")

    if family == "path":
        return _from_networkx(nx.path_graph(m))
    if family == "cycle":
        if m < 3:
            # 2ノードの閉路は単純グラフでは辺1本
            return _from_networkx(nx.path_graph(m))
        return _from_networkx(nx.cycle_graph(m))
    if family == "star":
        return _from_networkx(nx.star_graph(m - 1))
    if family == "complete":
        return _from_networkx(nx.complete_graph(m))
    if family == "erdos_renyi":
        p = edge_prob if edge_prob is not None else min(1.0, 2.0 * math.log(m) / m)
        for attempt in range(max_attempts):
            g = nx.erdos_renyi_graph(m, p, seed=seed + attempt)
            if nx.is_connected(g):
                if attempt > 0:
                    logger.info(f"Erdos-Renyi graph connected after {attempt + 1} attempts (p={p:.3f})")
                return _from_networkx(g)
        raise GraphError(f"Could not draw a connected Erdos-Renyi graph (m={m}, p={p}) in {max_attempts} attempts")

    raise GraphError(f"Unknown graph family: {family}")


# --- Matrices ---


def build_laplacian(g: Graph) -> np.ndarray:
    """
    グラフラプラシアン W̄（対角=次数、辺=-1）を返す。

    Args:
        g (Graph): グラフ

    Returns:
        np.ndarray: m×m 対称半正定値行列
    """
    adjacency = nx.to_numpy_array(g.to_networkx(), nodelist=range(g.node_count))
    return np.diag(adjacency.sum(axis=1)) - adjacency


def metropolis_mixing(g: Graph) -> np.ndarray:
    """
    Metropolis 重みの混合行列を返す。辺 (i,j) に 1/(1+max(d_i,d_j))、対角は残り。

    Args:
        g (Graph): 連結グラフ

    Returns:
        np.ndarray: 対称二重確率行列

    Raises:
        GraphError: グラフが非連結の場合。
    """
    if not is_connected(g):
        raise GraphError("Metropolis mixing requires a connected graph")
    return metropolis_weights(g)


def metropolis_weights(g: Graph) -> np.ndarray:
    # 時変列の各ラウンドは単独では非連結でもよいので連結性は検査しない
    m = g.node_count
    deg = g.degrees()
    M = np.zeros((m, m))
    for i, j in g.edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        M[i, j] = w
        M[j, i] = w
    M[np.diag_indices(m)] = 1.0 - M.sum(axis=1)
    return M


def laplacian_mixing(W: np.ndarray) -> np.ndarray:
    """
    M = I − W̄/λmax(W̄) を返す（非加速合意はラプラシアン上の勾配降下と等価）。

    Raises:
        ValueError: 零行列の場合。
    """
    _check_square(W)
    lam_max = float(np.linalg.eigvalsh(W).max())
    if lam_max <= 0.0:
        raise ValueError("Laplacian mixing undefined for the zero matrix")
    return np.eye(W.shape[0]) - W / lam_max


def _check_square(A: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatchError(f"Expected a square matrix, got shape {A.shape}")


def _check_symmetric(A: np.ndarray) -> None:
    _check_square(A)
    scale = max(1.0, float(np.abs(A).max()))
    if float(np.abs(A - A.T).max()) > 1e-10 * scale:
        raise ValueError("Matrix is not symmetric")


def spectral_summary(matrix: np.ndarray, kind: MatrixKind) -> SpectralSummary:
    """
    固有値分解からスペクトル要約を計算する。

    ラプラシアンでは χ = λmax/λ⁺min。
    混合行列では 1 に最も近い固有値を除いた絶対値最大を λ₂ とし、χ = 1/(1−λ₂)。
    混合行列の lambda_max / lambda_min_plus は I−M の値を返す。

    Args:
        matrix (np.ndarray): 対称行列
        kind (MatrixKind): "laplacian" または "mixing"

    Returns:
        SpectralSummary: 要約

    Raises:
        ValueError: 非対称、または不明な種類の場合。
        GraphError: ラプラシアンが零（辺なし）の場合。
    """
    _check_symmetric(matrix)
    eig = np.linalg.eigvalsh(matrix)

    if kind == "laplacian":
        lam_max = float(eig.max())
        if lam_max <= 0.0:
            raise GraphError("Laplacian has no positive eigenvalue (edgeless graph)")
        positive = eig[eig > EIGEN_REL_THRESHOLD * lam_max]
        lam_min_plus = float(positive.min())
        return SpectralSummary(
            kind=kind,
            lambda_max=lam_max,
            lambda_min_plus=lam_min_plus,
            lambda2_mix=1.0 - lam_min_plus / lam_max,
            chi=lam_max / lam_min_plus,
            eigenvalues=eig.tolist(),
        )

    if kind == "mixing":
        rest = np.delete(eig, int(np.argmin(np.abs(eig - 1.0))))
        lam2 = float(np.abs(rest).max()) if rest.size else 0.0
        gaps = 1.0 - rest
        gap_max = float(gaps.max()) if rest.size else 0.0
        positive = gaps[gaps > EIGEN_REL_THRESHOLD * max(gap_max, 1.0)]
        return SpectralSummary(
            kind=kind,
            lambda_max=gap_max,
            lambda_min_plus=float(positive.min()) if positive.size else 0.0,
            lambda2_mix=lam2,
            chi=1.0 / (1.0 - lam2) if lam2 < 1.0 else math.inf,
            eigenvalues=eig.tolist(),
        )

    raise ValueError(f"Unknown matrix kind: {kind}")


def kron_lift(W: np.ndarray, n: int) -> np.ndarray:
    """W = W̄ ⊗ I_n を返す。Wx = 0 は全ブロックの一致と同値。"""
    if n < 1:
        raise ValueError(f"Block dimension must be >= 1 (got {n})")
    _check_square(W)
    return np.kron(W, np.eye(n))


def sqrt_psd(W: np.ndarray) -> np.ndarray:
    """
    対称半正定値行列の平方根 √W を固有値分解で計算する。
    閾値未満の固有値は 0 に丸めるため、核は W と一致する。

    Args:
        W (np.ndarray): 対称半正定値行列

    Returns:
        np.ndarray: 対称半正定値 S（SS = W）

    Raises:
        ValueError: 非対称、または固有値 < −1e-8·λmax（不定値）の場合。
    """
    _check_symmetric(W)
    w, V = np.linalg.eigh((W + W.T) / 2.0)
    scale = float(np.abs(w).max()) if w.size else 0.0
    if scale == 0.0:
        return np.zeros_like(W, dtype=float)
    if float(w.min()) < -INDEFINITE_REL_THRESHOLD * scale:
        raise ValueError(f"Matrix is indefinite (min eigenvalue {w.min():.3e})")
    clamped = np.where(w < EIGEN_REL_THRESHOLD * scale, 0.0, w)
    if np.any((w < 0.0) & (w >= -INDEFINITE_REL_THRESHOLD * scale)):
        logger.debug("sqrt_psd: clamped small negative eigenvalues to zero")
    S = (V * np.sqrt(clamped)) @ V.T
    return (S + S.T) / 2.0


# --- Time-varying sequences ---


def _window_indices(rounds: int, window: int, cyclic: bool) -> list[list[int]]:
    if rounds <= window:
        return [list(range(rounds))]
    starts = range(rounds) if cyclic else range(rounds - window + 1)
    return [[(s + t) % rounds for t in range(window)] for s in starts]


def window_connected(seq: GraphSequence, cyclic: bool = True) -> bool:
    """
    連続する window 個のグラフの和集合が全て連結か走査で確認する。

    Args:
        seq (GraphSequence): グラフ列
        cyclic (bool): 末尾から先頭へ巡回するウィンドウも検査するか

    Returns:
        bool: B連結なら True
    """
    m = seq.node_count
    for idx in _window_indices(seq.rounds, seq.window, cyclic):
        union = nx.Graph()
        union.add_nodes_from(range(m))
        for k in idx:
            union.add_edges_from(seq.graphs[k].edges)
        if not nx.is_connected(union):
            return False
    return True


def generate_time_varying(base: Graph, rounds: int, drop_prob: float, window: int,
                          seed: int = 0, max_retries: int = 20) -> GraphSequence:
    """
    各ラウンドで辺を確率 drop_prob で独立に落とし、B ウィンドウの和集合が
    非連結になる箇所はウィンドウ末尾のラウンドに基底グラフの辺を戻して修復する。
    列は巡回使用されるため、末尾から先頭に跨るウィンドウも認証する。

    Args:
        base (Graph): 連結な基底グラフ
        rounds (int): ラウンド数
        drop_prob (float): 辺の脱落確率 [0, 1)
        window (int): ウィンドウ長 B
        seed (int): 乱数シード
        max_retries (int): 認証失敗時の再生成回数上限

    Returns:
        GraphSequence: B連結なグラフ列

    Raises:
        GraphError: 基底が非連結、パラメータ不正、または認証できない場合。
    """
    if not is_connected(base):
        raise GraphError("Base graph must be connected")
    if not 0.0 <= drop_prob < 1.0:
        raise GraphError(f"drop_prob must lie in [0, 1) (got {drop_prob})")
    if rounds < 1 or window < 1:
        raise GraphError("rounds and window must be positive")

    rng = np.random.default_rng(seed)
    m = base.node_count
    base_edges = list(base.edges)

    for attempt in range(max_retries):
        per_round = [
            {e for e in base_edges if rng.random() >= drop_prob}
            for _ in range(rounds)
        ]
        repaired = 0
        for idx in _window_indices(rounds, window, cyclic=True):
            union = nx.Graph()
            union.add_nodes_from(range(m))
            for k in idx:
                union.add_edges_from(per_round[k])
            if nx.is_connected(union):
                continue
            missing = [e for e in base_edges if not union.has_edge(*e)]
            order = rng.permutation(len(missing))
            for pos in order:
                i, j = missing[pos]
                if not nx.has_path(union, i, j):
                    per_round[idx[-1]].add((i, j))
                    union.add_edge(i, j)
                    repaired += 1
                    if nx.is_connected(union):
                        break

        seq = GraphSequence(
            graphs=tuple(Graph(node_count=m, edges=tuple(sorted(r))) for r in per_round),
            window=window,
        )
        if window_connected(seq, cyclic=True):
            if repaired:
                logger.info(f"Time-varying sequence: re-added {repaired} edges to certify B={window} connectivity")
            return seq
        logger.warning(f"B-connectivity certification failed (attempt {attempt + 1}/{max_retries})")

    raise GraphError(f"Could not certify B={window} connectivity after {max_retries} attempts")


# --- Serialization ---


def graph_to_edge_list(g: Graph) -> str:
    """1始まりの "i j" 行形式で辺リストを出力する。"""
    return "".join(f"{i + 1} {j + 1}\n" for i, j in g.edges)


def graph_from_edge_list(text: str, m: int) -> Graph:
    """
    1始まりの "i j" 行形式から Graph を読み込む。空行と # 行は無視する。

    Raises:
        GraphError: 行の書式が不正な場合。
    """
    edges = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"Malformed edge line {lineno}: {line!r}")
        edges.append((int(parts[0]) - 1, int(parts[1]) - 1))
    return make_graph(m, edges)


def save_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    """行列をヘッダなし CSV として保存する。"""
    pd.DataFrame(np.atleast_2d(matrix)).to_csv(path, header=False, index=False, float_format="%.17g")


def load_matrix_csv(path: str | Path) -> np.ndarray:
    """ヘッダなし CSV から行列を読み込む。"""
    return pd.read_csv(path, header=None).to_numpy(dtype=float)
