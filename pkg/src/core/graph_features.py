"""
Graph-filter features, centrality and sensor placement.

Features for a node i stack [S^k x]_i for k = 0..K-1 (x = V, P, Q per bus)
followed by two rows of incident-line statistics [sum, mean, max] of the
active and reactive branch flows. Shifts are applied through a padded
neighbour table; each node sums its neighbours in value-sorted order so the
result does not depend on how the buses are numbered.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from config.settings import FEATURE_CONFIG
from core.errors import CentralityConvergenceError, DisconnectedNetworkError
from core.grid_io import GridCase, GridGraph, to_networkx

logger = logging.getLogger(__name__)

N_FEATURES = 3


@dataclass(frozen=True, eq=False)
class GraphSignals:
    x: np.ndarray
    line_p: np.ndarray
    line_q: np.ndarray
    branch_ends: np.ndarray


@dataclass(frozen=True, eq=False)
class AggFeatures:
    z: np.ndarray
    k_len: int
    nodes: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class CentralityScores:
    closeness: np.ndarray
    eigenvector: np.ndarray


def graph_signals(case: GridCase, source) -> GraphSignals:
    """Signals of an OperatingPoint, or of any record with the same fields."""
    x = np.column_stack([
        np.asarray(source.v_mag, dtype=float),
        np.asarray(source.p_net, dtype=float),
        np.asarray(source.q_net, dtype=float),
    ])
    if x.shape[0] != case.n_buses:
        raise ValueError(f"signals have {x.shape[0]} rows for a {case.n_buses}-bus case")
    return GraphSignals(
        x=x,
        line_p=np.asarray(source.line_p, dtype=float),
        line_q=np.asarray(source.line_q, dtype=float),
        branch_ends=case.branch_ends(),
    )


# --- aggregation ----------------------------------------------------------------------

def _signal_matrix(signals) -> np.ndarray:
    x = signals.x if isinstance(signals, GraphSignals) else np.asarray(signals, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def apply_shift(graph: GridGraph, x: np.ndarray) -> np.ndarray:
    """One application of the shift operator, S @ x, without forming S."""
    padded = np.vstack([x, np.zeros((1, x.shape[1]))])
    gathered = np.sort(padded[graph.neighbours], axis=1)
    return gathered.sum(axis=1)


def shift_powers(graph: GridGraph, signals, k_len: int) -> np.ndarray:
    """(K, N, F) stack of S^k x for k = 0..K-1."""
    x = _signal_matrix(signals)
    if k_len < 1:
        raise ValueError(f"aggregation length must be >= 1, got {k_len}")
    if x.shape[0] != graph.n:
        raise ValueError(f"signals have {x.shape[0]} rows for a {graph.n}-node graph")
    out = np.empty((k_len,) + x.shape)
    out[0] = x
    for k in range(1, k_len):
        out[k] = apply_shift(graph, out[k - 1])
    return out


def aggregate(graph: GridGraph, signals, node: int, k_len: int) -> np.ndarray:
    """K x F matrix whose row k is [S^k x] at ``node``."""
    if not 0 <= node < graph.n:
        raise ValueError(f"node {node} outside graph of {graph.n} nodes")
    return shift_powers(graph, signals, k_len)[:, node, :]


def _incident_stats(values: np.ndarray) -> List[float]:
    if values.size == 0:
        return [0.0, 0.0, 0.0]
    return [float(values.sum()), float(values.mean()), float(values.max())]


def append_line_flow_rows(agg: np.ndarray, case: GridCase, flows, node: int) -> np.ndarray:
    """
    Append incident-line statistics to an aggregation block.

    Args:
        agg: K x 3 output of ``aggregate`` at ``node``
        case: case defining branch endpoints
        flows: anything exposing per-branch ``line_p`` and ``line_q``
        node: node index

    Returns:
        (K+2) x 3 matrix; row K holds [sum, mean, max] of line_p over branches
        incident to ``node`` and row K+1 the same for line_q
    """
    agg = np.asarray(agg, dtype=float)
    if agg.ndim != 2 or agg.shape[1] != N_FEATURES:
        raise ValueError(f"expected a K x {N_FEATURES} block, got shape {agg.shape}")
    ends = getattr(flows, "branch_ends", None)
    ends = case.branch_ends() if ends is None else ends
    incident = np.flatnonzero((ends[:, 0] == node) | (ends[:, 1] == node)) if len(ends) else np.array([], int)
    line_p = np.asarray(flows.line_p, dtype=float)[incident]
    line_q = np.asarray(flows.line_q, dtype=float)[incident]
    return np.vstack([agg, _incident_stats(line_p), _incident_stats(line_q)])


def build_features(case: GridCase, graph: GridGraph, signals: GraphSignals, k_len: int,
                   nodes: Sequence[int]) -> AggFeatures:
    """Stacked (K+2) x F x n_nodes features for the given aggregation nodes."""
    powers = shift_powers(graph, signals, k_len)
    blocks = [append_line_flow_rows(powers[:, node, :], case, signals, node) for node in nodes]
    return AggFeatures(z=np.stack(blocks, axis=-1), k_len=k_len, nodes=tuple(int(n) for n in nodes))


def build_feature_matrix(case: GridCase, graph: GridGraph, records: Iterable, k_len: int,
                         nodes: Sequence[int], observed: Optional[Iterable[int]] = None) -> np.ndarray:
    """(M, K+2, F, n_nodes) tensor for a sequence of stored records."""
    blocks = []
    for record in records:
        signals = graph_signals(case, record)
        if observed is not None:
            signals = mask_unobserved(signals, observed)
        blocks.append(build_features(case, graph, signals, k_len, nodes).z)
    if not blocks:
        return np.zeros((0, k_len + 2, N_FEATURES, len(nodes)))
    return np.stack(blocks)


def mask_unobserved(signals: GraphSignals, observed: Iterable[int]) -> GraphSignals:
    """Zero every unobserved bus and every branch with both ends unobserved."""
    n = signals.x.shape[0]
    seen = np.zeros(n, dtype=bool)
    idx = np.fromiter((int(i) for i in observed), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("observed set contains nodes outside the graph")
    seen[idx] = True

    x = signals.x.copy()
    x[~seen] = 0.0
    line_p, line_q = signals.line_p.copy(), signals.line_q.copy()
    ends = signals.branch_ends
    if len(ends):
        dark = ~seen[ends[:, 0]] & ~seen[ends[:, 1]]
        line_p[dark] = 0.0
        line_q[dark] = 0.0
    return replace(signals, x=x, line_p=line_p, line_q=line_q)


# --- centrality --------------------------------------------------------------------------

def _connected_nx(graph: GridGraph) -> nx.Graph:
    g = to_networkx(graph)
    if graph.n == 0 or not nx.is_connected(g):
        raise DisconnectedNetworkError("centrality needs a connected graph")
    return g


def closeness_centrality(graph: GridGraph) -> np.ndarray:
    """1 / (sum of hop distances) per node."""
    g = _connected_nx(graph)
    scores = np.zeros(graph.n)
    for node in range(graph.n):
        total = sum(nx.single_source_shortest_path_length(g, node).values())
        scores[node] = 1.0 / total if total > 0 else 0.0
    return scores


def eigenvector_centrality(graph: GridGraph, tol: Optional[float] = None,
                           max_iter: Optional[int] = None) -> np.ndarray:
    """
    Dominant adjacency eigenvector by power iteration from all-ones, max-normalized.

    The networkx estimate is refined with power steps on S + I until
    ||S c - rho c|| <= tol * ||c||, rho being the Rayleigh quotient.
    """
    tol = FEATURE_CONFIG["eig_tol"] if tol is None else tol
    max_iter = FEATURE_CONFIG["eig_max_iter"] if max_iter is None else max_iter
    g = _connected_nx(graph)
    try:
        scores = nx.eigenvector_centrality(g, max_iter=max_iter, tol=tol,
                                           nstart={i: 1.0 for i in range(graph.n)})
    except nx.PowerIterationFailedConvergence as exc:
        raise CentralityConvergenceError(f"eigenvector centrality did not converge in {max_iter} iterations") from exc
    vec = np.abs(np.array([scores[i] for i in range(graph.n)]))
    vec /= np.linalg.norm(vec)
    for _ in range(max_iter + 1):
        image = graph.shift @ vec
        rho = float(vec @ image)
        if np.linalg.norm(image - rho * vec) <= tol:
            return vec / vec.max()
        vec = image + vec
        vec /= np.linalg.norm(vec)
    raise CentralityConvergenceError(f"eigenvector residual above {tol} after {max_iter} refinement steps")


def centrality_scores(graph: GridGraph) -> CentralityScores:
    return CentralityScores(closeness=closeness_centrality(graph), eigenvector=eigenvector_centrality(graph))


def edge_betweenness(graph: GridGraph) -> Dict[Tuple[int, int], float]:
    """Unnormalized edge betweenness keyed by (low, high) node pair."""
    raw = nx.edge_betweenness_centrality(to_networkx(graph), normalized=False)
    return {(min(u, v), max(u, v)): float(b) for (u, v), b in raw.items()}


def detect_communities(graph: GridGraph, target: int) -> List[List[int]]:
    """Girvan-Newman split into ``target`` components, ordered by smallest member."""
    if not 1 <= target <= graph.n:
        raise ValueError(f"community count must be in [1, {graph.n}], got {target}")
    g = _connected_nx(graph)
    if target == 1:
        return [list(range(graph.n))]

    partition = None
    for level in nx.community.girvan_newman(g):
        if len(level) >= target:
            partition = level
            break
    communities = [sorted(c) for c in partition]
    return sorted(communities, key=lambda c: c[0])


def rank_nodes(graph: GridGraph, closeness: Optional[np.ndarray] = None) -> List[int]:
    """Nodes by descending closeness, then descending degree, then index."""
    closeness = closeness_centrality(graph) if closeness is None else closeness
    return sorted(range(graph.n), key=lambda i: (-closeness[i], -int(graph.degree[i]), i))


def select_aggregation_nodes(graph: GridGraph, n_nodes: int) -> List[int]:
    """One most-central node per community."""
    if not 1 <= n_nodes <= graph.n:
        raise ValueError(f"aggregation node count must be in [1, {graph.n}], got {n_nodes}")
    ranking = rank_nodes(graph)
    if n_nodes == 1:
        return [ranking[0]]
    position = {node: r for r, node in enumerate(ranking)}
    chosen = [min(community, key=position.__getitem__) for community in detect_communities(graph, n_nodes)]
    logger.info(f"aggregation nodes: {chosen}")
    return chosen


def pmu_placement(graph: GridGraph, budget: float) -> List[int]:
    """The ceil(budget * N) most central nodes, sorted by index."""
    if not 0 < budget <= 1:
        raise ValueError(f"placement budget must be in (0, 1], got {budget}")
    count = min(graph.n, math.ceil(budget * graph.n - 1e-9))
    return sorted(rank_nodes(graph)[:count])


def unobserved_nodes(graph: GridGraph, placement: Sequence[int], fraction: float,
                     closeness: Optional[np.ndarray] = None, protected: Iterable[int] = ()) -> List[int]:
    """
    The round(fraction * N) least central nodes outside the placement.

    ``protected`` nodes (the aggregation nodes) are never hidden. The count is
    capped by the number of remaining candidates.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"missing fraction must be in [0, 1), got {fraction}")
    placed = set(int(p) for p in placement) | set(int(p) for p in protected)
    candidates = [i for i in reversed(rank_nodes(graph, closeness)) if i not in placed]
    count = int(round(fraction * graph.n))
    if count > len(candidates):
        logger.warning(f"only {len(candidates)} unplaced nodes, cannot hide {count}")
        count = len(candidates)
    return sorted(candidates[:count])


def preserves_locality(graph: GridGraph, case: GridCase, nodes: Sequence[int], unobserved: Iterable[int],
                       k_len: int) -> bool:
    """True when masking ``unobserved`` cannot change the features at ``nodes``."""
    hidden = set(int(u) for u in unobserved)
    if not hidden:
        return True
    g = to_networkx(graph)
    ends = case.branch_ends()
    for node in nodes:
        near = nx.single_source_shortest_path_length(g, node, cutoff=k_len - 1)
        if hidden.intersection(near):
            return False
        if len(ends):
            incident = ends[(ends[:, 0] == node) | (ends[:, 1] == node)]
            if hidden.intersection(incident.ravel().tolist()):
                return False
    return True
