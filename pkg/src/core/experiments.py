"""
Pipeline operations behind the CLI: dataset generation, metrics, the
aggregation-length and aggregation-node sweeps, the missing-measurement
study, latency benchmarks and online assessment.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import spearmanr
from sklearn.metrics import accuracy_score, confusion_matrix, recall_score
from threadpoolctl import threadpool_limits

from config.settings import DATASET_CONFIG, SMALL_SIGNAL_CONFIG
from core.errors import (
    DataError,
    DrawCapExceededError,
    NumericalError,
    SingularJacobianError,
    SpecMismatchError,
)
from core.graph_features import (
    build_feature_matrix,
    build_features,
    centrality_scores,
    closeness_centrality,
    detect_communities,
    graph_signals,
    pmu_placement,
    preserves_locality,
    select_aggregation_nodes,
    unobserved_nodes,
)
from core.grid_io import GridCase, build_graph, case_hash
from core.learner import (
    Dataset,
    ModelParams,
    ModelSpec,
    TrainConfig,
    predict_batch,
    split_indices,
    train,
)
from core.small_signal import contingency_set, label_operating_point
from core.steady_state import OperatingPoint, check_limits, scale_profile, solve_power_flow
from db.storage import DatasetHeader, DatasetRecord, write_dataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    specificity: Optional[float]
    recall: Optional[float]
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def confusion(self) -> Tuple[int, int, int, int]:
        return self.tp, self.tn, self.fp, self.fn

    def to_row(self) -> Dict[str, object]:
        return {"accuracy": self.accuracy, "specificity": self.specificity, "recall": self.recall,
                "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass
class ExperimentReport:
    name: str
    config: Dict[str, object]
    rows: List[Dict[str, object]]
    timings_ms: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class GenerationConfig:
    n_points: int
    scale_range: Tuple[float, float] = DATASET_CONFIG["scale_range"]
    threshold: float = SMALL_SIGNAL_CONFIG["threshold"]
    seed: int = 0
    contingencies: str = DATASET_CONFIG["contingencies"]
    k_len: int = 3
    n_nodes: int = 1
    nodes: Optional[Tuple[int, ...]] = None
    draw_cap_factor: int = DATASET_CONFIG["draw_cap_factor"]
    workers: int = 1
    resolve_post_outage: bool = SMALL_SIGNAL_CONFIG["resolve_post_outage"]


# --- metrics -------------------------------------------------------------------------------

def _defined(value) -> Optional[float]:
    value = float(value)
    return None if np.isnan(value) else value


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> Metrics:
    """Confusion counts with secure (1) as the positive class; undefined ratios are None."""
    preds = np.asarray(predictions).astype(int).ravel()
    truth = np.asarray(labels).astype(int).ravel()
    if preds.size == 0:
        raise ValueError("metrics of an empty prediction set")
    if preds.shape != truth.shape:
        raise ValueError(f"{preds.size} predictions for {truth.size} labels")
    tn, fp, fn, tp = (int(c) for c in confusion_matrix(truth, preds, labels=[0, 1]).ravel())
    return Metrics(
        accuracy=float(accuracy_score(truth, preds)),
        specificity=_defined(recall_score(truth, preds, pos_label=0, zero_division=np.nan)),
        recall=_defined(recall_score(truth, preds, pos_label=1, zero_division=np.nan)),
        tp=tp, tn=tn, fp=fp, fn=fn,
    )


# --- dataset generation ------------------------------------------------------------------------

def _draw(args) -> Tuple[int, str, Optional[DatasetRecord]]:
    case, contingencies, cfg, draw = args
    scaled, _ = scale_profile(case, cfg.scale_range, [cfg.seed, draw])
    try:
        op = solve_power_flow(scaled)
    except SingularJacobianError:
        return draw, "singular_jacobian", None
    if not op.converged:
        return draw, "non_convergence", None
    if check_limits(scaled, op):
        return draw, "limit_violation", None
    label = label_operating_point(scaled, op, contingencies, cfg.threshold,
                                  resolve_post_outage=cfg.resolve_post_outage)
    record = DatasetRecord(
        draw=draw, v_mag=op.v_mag, v_ang=op.v_ang, p_net=op.p_net, q_net=op.q_net,
        line_p=op.line_p, line_q=op.line_q, label=int(label.secure), min_zeta=label.min_zeta,
        per_contingency=label.per_contingency,
    )
    return draw, "kept", record


def _draw_results(case: GridCase, contingencies: List[int], cfg: GenerationConfig,
                  cap: int) -> Iterator[Tuple[int, str, Optional[DatasetRecord]]]:
    """Draw outcomes in draw order, whatever the worker count."""
    jobs = ((case, contingencies, cfg, draw) for draw in range(cap))
    if cfg.workers <= 1:
        yield from map(_draw, jobs)
        return
    chunk = 4 * cfg.workers
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        for start in range(0, cap, chunk):
            batch = [(case, contingencies, cfg, d) for d in range(start, min(cap, start + chunk))]
            yield from pool.map(_draw, batch)


def resolve_nodes(case: GridCase, n_nodes: int = 1, nodes: Optional[Sequence[int]] = None) -> Tuple[int, ...]:
    if nodes:
        bad = [n for n in nodes if not 0 <= int(n) < case.n_buses]
        if bad:
            raise DataError(f"aggregation nodes {bad} outside the {case.n_buses}-bus case")
        return tuple(int(n) for n in nodes)
    return tuple(select_aggregation_nodes(build_graph(case), n_nodes))


def generate_dataset(case: GridCase, cfg: GenerationConfig, out_path: Optional[Union[str, Path]] = None,
                     case_file: str = "") -> Tuple[DatasetHeader, List[DatasetRecord]]:
    """
    Sample, solve, screen and label operating points until ``n_points`` are kept.

    Raises:
        NumericalError: the unscaled base case does not solve
        DrawCapExceededError: ``draw_cap_factor * n_points`` draws were not enough
    """
    if cfg.n_points < 1:
        raise ValueError("n_points must be positive")
    base = solve_power_flow(case)
    if not base.converged:
        raise NumericalError("base case power flow does not converge")

    contingencies = contingency_set(case, cfg.contingencies)
    nodes = resolve_nodes(case, cfg.n_nodes, cfg.nodes)
    cap = cfg.draw_cap_factor * cfg.n_points
    logger.info(f"generating {cfg.n_points} points over {len(contingencies)} contingencies "
                f"(draw cap {cap}, {cfg.workers} worker(s))")

    records: List[DatasetRecord] = []
    discarded: Dict[str, int] = {}
    step = max(1, cfg.n_points // 10)
    for draw, outcome, record in _draw_results(case, contingencies, cfg, cap):
        if outcome != "kept":
            discarded[outcome] = discarded.get(outcome, 0) + 1
            logger.debug(f"draw {draw} discarded: {outcome}")
            continue
        records.append(record)
        if len(records) % step == 0:
            logger.info(f"kept {len(records)}/{cfg.n_points} after {draw + 1} draws")
        if len(records) == cfg.n_points:
            break
    if len(records) < cfg.n_points:
        raise DrawCapExceededError(len(records), cfg.n_points, discarded)

    secure = sum(r.label for r in records) / len(records)
    if max(secure, 1 - secure) > DATASET_CONFIG["imbalance_warning"]:
        logger.warning(f"class balance is degenerate: {secure:.1%} secure")
    header = DatasetHeader(
        case_hash=case_hash(case), k_len=cfg.k_len, aggregation_nodes=nodes, threshold=cfg.threshold,
        seed=cfg.seed, scale_range=tuple(cfg.scale_range), contingencies=cfg.contingencies,
        n_contingencies=len(contingencies), kept=len(records), discarded=dict(sorted(discarded.items())),
        class_balance={"secure": secure, "insecure": 1 - secure}, case_file=case_file,
    )
    logger.info(f"dataset ready: {len(records)} points, {secure:.1%} secure, discarded {header.discarded}")
    if out_path is not None:
        write_dataset(out_path, header, records)
    return header, records


def check_dataset_case(case: GridCase, header: DatasetHeader) -> None:
    if case_hash(case) != header.case_hash:
        raise SpecMismatchError("dataset was generated from a different case")


def load_features(case: GridCase, records: Sequence[DatasetRecord], k_len: int, nodes: Sequence[int],
                  observed: Optional[Iterable[int]] = None) -> Dataset:
    """Rebuild features from raw records at any K, node set or observation mask."""
    graph = build_graph(case)
    features = build_feature_matrix(case, graph, records, k_len, nodes, observed)
    labels = np.array([r.label for r in records], dtype=float)
    return Dataset(features, labels)


# --- evaluation --------------------------------------------------------------------------------------

def holdout_indices(n: int, config: TrainConfig) -> np.ndarray:
    return split_indices(n, config.split, config.seed)[2]


def evaluate_model(params: ModelParams, dataset: Dataset, config: TrainConfig) -> Metrics:
    """Metrics on the test split defined by ``config.split`` and ``config.seed``."""
    idx = holdout_indices(len(dataset), config)
    if idx.size == 0:
        raise DataError("test split is empty")
    probs = predict_batch(params, dataset.features[idx])
    return compute_metrics((probs >= config.decision_threshold).astype(int), dataset.labels[idx])


def _mean_std(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
    return mean, std


def k_sweep(case: GridCase, records: Sequence[DatasetRecord], k_values: Sequence[int], repeats: int,
            spec: ModelSpec, config: TrainConfig) -> ExperimentReport:
    """Train ``repeats`` models per aggregation length and report test metrics."""
    if not k_values:
        raise ValueError("k_values must not be empty")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    rows = []
    for k_len in k_values:
        k_spec = replace(spec, k_len=int(k_len))
        dataset = load_features(case, records, k_spec.k_len, k_spec.aggregation_nodes)
        accs, specs, recs = [], [], []
        for r in range(repeats):
            run_cfg = replace(config, seed=config.seed + r)
            params, _ = train(dataset, k_spec, run_cfg)
            m = evaluate_model(params, dataset, run_cfg)
            accs.append(m.accuracy)
            specs.append(m.specificity)
            recs.append(m.recall)
        acc_mean, acc_std = _mean_std(accs)
        row = {"k_len": k_spec.k_len, "n_params": k_spec.n_params(), "accuracy_mean": acc_mean,
               "accuracy_std": acc_std, "specificity_mean": _mean_std(specs)[0],
               "recall_mean": _mean_std(recs)[0], "repeats": repeats}
        logger.info(f"K={k_spec.k_len}: {row['n_params']} parameters, accuracy {acc_mean:.4f}")
        rows.append(row)
    cfg = {"k_values": [int(k) for k in k_values], "repeats": repeats, "spec": spec.to_dict(),
           "lr": config.lr, "epochs": config.epochs, "batch_size": config.batch_size,
           "seed": config.seed, "split": list(config.split)}
    return ExperimentReport("sweep_k", cfg, rows)


def missing_data_experiment(params: ModelParams, case: GridCase, records: Sequence[DatasetRecord],
                            budget: float, fractions: Sequence[float], config: TrainConfig) -> ExperimentReport:
    """
    Test-split metrics with the least central unplaced buses hidden.

    Every row also says whether the hidden set keeps the aggregation-node
    features untouched and whether the predictions match the clean run.
    """
    spec = params.spec
    graph = build_graph(case)
    closeness = closeness_centrality(graph)
    placement = pmu_placement(graph, budget)
    idx = holdout_indices(len(records), config)
    if idx.size == 0:
        raise DataError("test split is empty")
    test_records = [records[i] for i in idx]
    labels = np.array([r.label for r in test_records])

    clean = load_features(case, test_records, spec.k_len, spec.aggregation_nodes)
    clean_preds = (predict_batch(params, clean.features) >= config.decision_threshold).astype(int)

    rows = []
    for fraction in fractions:
        hidden = unobserved_nodes(graph, placement, fraction, closeness, protected=spec.aggregation_nodes)
        observed = [i for i in range(graph.n) if i not in set(hidden)]
        masked = load_features(case, test_records, spec.k_len, spec.aggregation_nodes, observed)
        preds = (predict_batch(params, masked.features) >= config.decision_threshold).astype(int)
        m = compute_metrics(preds, labels)
        rows.append({
            "fraction": float(fraction),
            "n_unobserved": len(hidden),
            "unobserved": hidden,
            **{k: v for k, v in m.to_row().items() if k in ("accuracy", "specificity", "recall")},
            "locality_preserved": preserves_locality(graph, case, spec.aggregation_nodes, hidden, spec.k_len),
            "identical_to_clean": bool(np.array_equal(preds, clean_preds)),
        })
    cfg = {"budget": budget, "placement": placement, "fractions": [float(f) for f in fractions],
           "aggregation_nodes": list(spec.aggregation_nodes), "k_len": spec.k_len, "seed": config.seed}
    return ExperimentReport("missing_data", cfg, rows)



def _rank_correlation(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    if len(x) < 2:
        return None
    rho, _ = spearmanr(x, y)
    return _defined(rho)


def node_sweep(case: GridCase, records: Sequence[DatasetRecord], nodes: Sequence[int],
               spec: ModelSpec, config: TrainConfig) -> ExperimentReport:
    """
    Train one single-node model per candidate aggregation node.

    Rows carry the test metrics and the centrality of each node; the config
    block holds the accuracy distribution and its Spearman correlation with
    closeness and eigenvector centrality (None when a ranking is constant).
    """
    if not nodes:
        raise ValueError("nodes must not be empty")
    bad = [n for n in nodes if not 0 <= int(n) < case.n_buses]
    if bad:
        raise DataError(f"aggregation nodes {bad} outside the {case.n_buses}-bus case")
    graph = build_graph(case)
    scores = centrality_scores(graph)

    rows = []
    for node in (int(n) for n in nodes):
        node_spec = replace(spec, aggregation_nodes=(node,))
        dataset = load_features(case, records, node_spec.k_len, node_spec.aggregation_nodes)
        params, _ = train(dataset, node_spec, config)
        m = evaluate_model(params, dataset, config)
        rows.append({
            "node": node,
            "bus": case.buses[node].id,
            "accuracy": m.accuracy,
            "specificity": m.specificity,
            "recall": m.recall,
            "closeness": float(scores.closeness[node]),
            "eigenvector": float(scores.eigenvector[node]),
            "degree": int(graph.degree[node]),
        })
        logger.info(f"node {node} (bus {case.buses[node].id}): accuracy {m.accuracy:.4f}")

    accs = [r["accuracy"] for r in rows]
    acc_mean, acc_std = _mean_std(accs)
    cfg = {
        "nodes": [r["node"] for r in rows], "spec": spec.to_dict(), "lr": config.lr, "epochs": config.epochs,
        "batch_size": config.batch_size, "seed": config.seed, "split": list(config.split),
        "accuracy_mean": acc_mean, "accuracy_std": acc_std, "accuracy_min": min(accs), "accuracy_max": max(accs),
        "spearman_closeness": _rank_correlation(accs, [r["closeness"] for r in rows]),
        "spearman_eigenvector": _rank_correlation(accs, [r["eigenvector"] for r in rows]),
    }
    return ExperimentReport("sweep_nodes", cfg, rows)


# --- timing --------------------------------------------------------------------------------------------

def _scaled_case(case: GridCase, header: DatasetHeader, record: DatasetRecord) -> GridCase:
    scaled, _ = scale_profile(case, header.scale_range, [header.seed, record.draw])
    return scaled


def record_point(record: DatasetRecord) -> OperatingPoint:
    return OperatingPoint(
        v_mag=record.v_mag, v_ang=record.v_ang, p_net=record.p_net, q_net=record.q_net,
        line_p=record.line_p, line_q=record.line_q, converged=True, iterations=0,
    )


def benchmark_inference(params: ModelParams, case: GridCase, header: DatasetHeader,
                        records: Sequence[DatasetRecord], batch_size: int, repeats: int,
                        exact_repeats: int = 3) -> ExperimentReport:
    """
    Latency of feature aggregation plus forward pass, after three warm-up runs.

    BLAS is held to one thread while timing. The exact-labelling column times
    the full N-1 eigen-analysis of one point.
    """
    if not records:
        raise DataError("benchmark needs at least one record")
    if batch_size < 1 or repeats < 1:
        raise ValueError("batch_size and repeats must be positive")
    spec = params.spec
    graph = build_graph(case)
    batch = [records[i % len(records)] for i in range(batch_size)]

    def run() -> Tuple[float, float]:
        t0 = time.perf_counter()
        z = np.stack([build_features(case, graph, graph_signals(case, r), spec.k_len, spec.aggregation_nodes).z
                      for r in batch])
        t1 = time.perf_counter()
        predict_batch(params, z)
        t2 = time.perf_counter()
        return (t1 - t0) * 1e3, (t2 - t1) * 1e3

    contingencies = contingency_set(case, header.contingencies)
    scaled = _scaled_case(case, header, records[0])
    op = record_point(records[0])
    exact_ms = []
    with threadpool_limits(limits=1):
        for _ in range(3):
            run()
        feats, fwds = zip(*(run() for _ in range(repeats)))
        for _ in range(max(1, exact_repeats)):
            t0 = time.perf_counter()
            label_operating_point(scaled, op, contingencies, header.threshold)
            exact_ms.append((time.perf_counter() - t0) * 1e3)
    totals = np.add(feats, fwds)

    row = {
        "batch_size": batch_size,
        "repeats": repeats,
        "median_ms": float(np.median(totals)),
        "p95_ms": float(np.percentile(totals, 95)),
        "per_sample_ms": float(np.median(totals)) / batch_size,
        "feature_ms_per_sample": float(np.median(feats)) / batch_size,
        "forward_ms_per_sample": float(np.median(fwds)) / batch_size,
        "exact_labelling_ms_per_point": float(np.median(exact_ms)),
        "n_params": params.n_params,
    }
    return ExperimentReport("bench", {"batch_size": batch_size, "repeats": repeats, "threads": 1}, [row],
                            timings_ms={"median": row["median_ms"], "p95": row["p95_ms"]})


# --- online assessment -------------------------------------------------------------------------------------

def check_model_compatible(spec: ModelSpec, case: GridCase, k_len: Optional[int] = None,
                           nodes: Optional[Sequence[int]] = None) -> None:
    """Raise SpecMismatchError when flags or topology disagree with the trained model."""
    if k_len is not None and int(k_len) != spec.k_len:
        raise SpecMismatchError(f"model was trained with K={spec.k_len}, got K={k_len}")
    if nodes is not None and tuple(int(n) for n in nodes) != spec.aggregation_nodes:
        raise SpecMismatchError(f"model aggregates at {list(spec.aggregation_nodes)}, got {list(nodes)}")
    if max(spec.aggregation_nodes) >= case.n_buses:
        raise SpecMismatchError(f"aggregation nodes {list(spec.aggregation_nodes)} do not exist in this case")


def fresh_points(case: GridCase, n_points: int, scale_range: Sequence[float],
                 seed: int) -> List[Tuple[GridCase, OperatingPoint]]:
    """Solve ``n_points`` converged, limit-clean random points."""
    points = []
    draw = 0
    cap = DATASET_CONFIG["draw_cap_factor"] * n_points
    while len(points) < n_points and draw < cap:
        scaled, _ = scale_profile(case, scale_range, [seed, draw])
        draw += 1
        op = solve_power_flow(scaled)
        if op.converged and not check_limits(scaled, op):
            points.append((scaled, op))
    if len(points) < n_points:
        raise DrawCapExceededError(len(points), n_points, {})
    return points


def assess(params: ModelParams, points: Sequence[Tuple[GridCase, OperatingPoint]], exact: bool = False,
           threshold: float = 0.5, zeta_threshold: Optional[float] = None,
           contingencies: str = "lines") -> List[Dict[str, object]]:
    """Verdict per point, in input order, optionally checked against exact labelling."""
    spec = params.spec
    if not points:
        return []
    graph = build_graph(points[0][0])
    z = np.stack([build_features(c, graph, graph_signals(c, op), spec.k_len, spec.aggregation_nodes).z
                  for c, op in points])
    probs = predict_batch(params, z)

    rows = []
    branch_ids = contingency_set(points[0][0], contingencies) if exact else None
    for i, ((c, op), p) in enumerate(zip(points, probs)):
        row = {"point": i, "probability": float(p), "secure": int(p >= threshold)}
        if exact:
            label = label_operating_point(c, op, branch_ids, zeta_threshold)
            row["exact_secure"] = int(label.secure)
            row["min_zeta"] = label.min_zeta
            row["agree"] = int(row["secure"] == row["exact_secure"])
        rows.append(row)
    return rows


def dataset_points(case: GridCase, header: DatasetHeader,
                   records: Sequence[DatasetRecord]) -> List[Tuple[GridCase, OperatingPoint]]:
    """Scaled case and operating point of every stored record."""
    return [(_scaled_case(case, header, r), record_point(r)) for r in records]


# --- placement ------------------------------------------------------------------------------------------

def placement_report(case: GridCase, budget: float, nodes: Sequence[int]) -> ExperimentReport:
    """Centrality, degree and community of every bus, with the aggregation and PMU sets marked."""
    graph = build_graph(case)
    scores = centrality_scores(graph)
    pmus = set(pmu_placement(graph, budget))
    chosen = set(int(n) for n in nodes)
    community = np.zeros(graph.n, dtype=int)
    for c, members in enumerate(detect_communities(graph, max(1, len(chosen)))):
        community[members] = c
    rows = [{
        "node": i,
        "bus": case.buses[i].id,
        "closeness": float(scores.closeness[i]),
        "eigenvector": float(scores.eigenvector[i]),
        "degree": int(graph.degree[i]),
        "community": int(community[i]),
        "aggregation": int(i in chosen),
        "pmu": int(i in pmus),
    } for i in range(graph.n)]
    cfg = {"budget": budget, "aggregation_nodes": sorted(chosen), "pmu": sorted(pmus)}
    return ExperimentReport("placement", cfg, rows)


def split_metrics(params: ModelParams, dataset: Dataset, config: TrainConfig) -> List[Dict[str, object]]:
    """One metrics row per non-empty split."""
    rows = []
    for name, idx in zip(("train", "val", "test"), split_indices(len(dataset), config.split, config.seed)):
        if idx.size == 0:
            continue
        probs = predict_batch(params, dataset.features[idx])
        m = compute_metrics((probs >= config.decision_threshold).astype(int), dataset.labels[idx])
        rows.append({"split": name, "samples": int(idx.size), **m.to_row()})
    return rows
