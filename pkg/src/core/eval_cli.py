"""
Command-line pipeline: generate -> train -> evaluate / assess, plus the
aggregation-length and aggregation-node sweeps, missing-measurement study,
placement and latency reports.

Global flags go before the subcommand::

    python src/core/eval_cli.py --seed 7 --out runs/a generate --case ieee68 --n-points 1000
    python src/core/eval_cli.py --seed 7 --out runs/a train --dataset runs/a/dataset.jsonl

``--config FILE`` reads ``key=value`` lines whose keys are flag names; explicit
flags win over the file.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

if __package__ in (None, ""):
    sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import numpy as np
from dotenv import dotenv_values

from config.settings import (
    CASES_DIR,
    DATASET_CONFIG,
    FEATURE_CONFIG,
    LOG_CONFIG,
    SMALL_SIGNAL_CONFIG,
    SYSTEMS_FILE,
    TRAIN_CONFIG,
)
from core.errors import DataError, NumericalError, SSAError, UsageError
from core.experiments import (
    ExperimentReport,
    GenerationConfig,
    assess,
    benchmark_inference,
    check_dataset_case,
    check_model_compatible,
    compute_metrics,
    dataset_points,
    evaluate_model,
    fresh_points,
    generate_dataset,
    holdout_indices,
    k_sweep,
    load_features,
    missing_data_experiment,
    node_sweep,
    placement_report,
    resolve_nodes,
    split_metrics,
)
from core.graph_features import N_FEATURES
from core.grid_io import GridCase, load_case
from core.learner import ModelSpec, TrainConfig, load_model, save_model, train
from db.storage import read_dataset, read_predictions, write_history, write_report

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- case and node resolution ---------------------------------------------------------------------

def _registry() -> Dict[str, dict]:
    with open(SYSTEMS_FILE, encoding="utf-8") as fh:
        return {s["id"]: s for s in json.load(fh)["systems"]}


def resolve_case(name: str) -> tuple:
    """A case path or a registered system id -> (case, path, registry entry or {})."""
    path = Path(name)
    if path.is_file():
        return load_case(path), str(path), {}
    entry = _registry().get(name)
    if entry is None:
        raise DataError(f"'{name}' is neither a case file nor a registered system")
    path = Path(CASES_DIR) / entry["case"]
    return load_case(path), str(path), entry


def _nodes_flag(case: GridCase, flag: Optional[List[str]], n_nodes: Optional[int],
                fallback) -> tuple:
    """``--nodes`` is a list of bus indices or ``auto``; ``fallback`` applies when it is absent."""
    if flag is None:
        flag = fallback
    if flag is None or flag == "auto" or list(flag) == ["auto"]:
        return resolve_nodes(case, n_nodes or 1)
    try:
        return resolve_nodes(case, nodes=[int(n) for n in flag])
    except ValueError as exc:
        raise UsageError(f"--nodes expects bus indices or 'auto': {exc}") from exc


def _explicit_nodes(args) -> Optional[List[int]]:
    if not args.nodes or list(args.nodes) == ["auto"]:
        return None
    try:
        return [int(n) for n in args.nodes]
    except ValueError as exc:
        raise UsageError(f"--nodes expects bus indices or 'auto': {exc}") from exc


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))


def _load_dataset_case(args):
    header, records = read_dataset(args.dataset)
    name = args.case or header.case_file
    if not name:
        raise UsageError(f"{args.command}: --case is required for this dataset")
    case, _, _ = resolve_case(name)
    check_dataset_case(case, header)
    return case, header, records


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        split=tuple(args.split), decision_threshold=args.decision_threshold,
    )


def _emit(args, report: ExperimentReport) -> None:
    write_report(args.out, report.name, report.rows, report.config)


# --- subcommands ---------------------------------------------------------------------------------

def cmd_generate(args) -> None:
    _require(args, "case", "n_points")
    case, path, entry = resolve_case(args.case)
    k_len = args.k_len or entry.get("k_len") or FEATURE_CONFIG["k_len"]
    nodes = _nodes_flag(case, args.nodes, args.n_nodes or entry.get("n_nodes"), entry.get("aggregation_nodes"))
    cfg = GenerationConfig(
        n_points=args.n_points, scale_range=tuple(args.scale_range), threshold=args.threshold,
        seed=args.seed, contingencies=args.contingencies, k_len=k_len, nodes=nodes,
        workers=args.workers, resolve_post_outage=args.resolve_post_outage,
    )
    out_path = args.dataset or Path(args.out) / "dataset.jsonl"
    header, _ = generate_dataset(case, cfg, out_path, case_file=path)
    rows = [{"outcome": "kept", "count": header.kept}]
    rows += [{"outcome": reason, "count": n} for reason, n in header.discarded.items()]
    config = {"case": path, "n_points": args.n_points, "seed": args.seed, "k_len": k_len,
              "aggregation_nodes": list(nodes), "scale_range": list(cfg.scale_range),
              "threshold": cfg.threshold, "contingencies": cfg.contingencies,
              "n_contingencies": header.n_contingencies, "class_balance": header.class_balance}
    write_report(args.out, "generate", rows, config)


def cmd_train(args) -> None:
    _require(args, "dataset")
    case, header, records = _load_dataset_case(args)
    k_len = args.k_len or header.k_len
    nodes = _nodes_flag(case, args.nodes, args.n_nodes, header.aggregation_nodes)
    spec = ModelSpec(conv_filters=args.conv_filters, conv_kernel=args.conv_kernel,
                     fc_sizes=tuple(args.fc_sizes), k_len=k_len, n_features=N_FEATURES,
                     aggregation_nodes=nodes)
    config = _train_config(args)
    dataset = load_features(case, records, k_len, nodes)
    params, history = train(dataset, spec, config)

    model_path = args.model or Path(args.out) / "model.bin"
    Path(model_path).parent.mkdir(parents=True, exist_ok=True)
    save_model(model_path, params)
    write_history(Path(args.out) / "history.csv", history)
    write_report(args.out, "train", split_metrics(params, dataset, config),
                 {"spec": spec.to_dict(), "n_params": spec.n_params(), "lr": config.lr,
                  "batch_size": config.batch_size, "epochs": config.epochs, "seed": config.seed,
                  "split": list(config.split)})


def cmd_evaluate(args) -> None:
    _require(args, "model", "dataset")
    params, spec = load_model(args.model)
    case, _, records = _load_dataset_case(args)
    check_model_compatible(spec, case, args.k_len, _explicit_nodes(args))
    config = _train_config(args)
    dataset = load_features(case, records, spec.k_len, spec.aggregation_nodes)
    rows = [{"model": "gnn", "n_params": spec.n_params(), **evaluate_model(params, dataset, config).to_row()}]
    if args.baseline_predictions:
        preds = read_predictions(args.baseline_predictions)
        idx = holdout_indices(len(dataset), config)
        if len(preds) != idx.size:
            raise DataError(f"baseline has {len(preds)} predictions for a {idx.size}-sample test split")
        rows.append({"model": "baseline", "n_params": None,
                     **compute_metrics(preds, dataset.labels[idx]).to_row()})
    write_report(args.out, "evaluate", rows, {"model": str(args.model), "dataset": str(args.dataset),
                                              "seed": config.seed, "split": list(config.split)})


def cmd_assess(args) -> None:
    _require(args, "model")
    params, spec = load_model(args.model)
    if args.dataset:
        case, header, records = _load_dataset_case(args)
        check_model_compatible(spec, case, args.k_len, _explicit_nodes(args))
        points = dataset_points(case, header, records[:args.n_points] if args.n_points else records)
        contingencies = header.contingencies
    else:
        _require(args, "case", "n_points")
        case, _, _ = resolve_case(args.case)
        check_model_compatible(spec, case, args.k_len, _explicit_nodes(args))
        points = fresh_points(case, args.n_points, args.scale_range, args.seed)
        contingencies = args.contingencies
    rows = assess(params, points, exact=args.exact, threshold=args.decision_threshold,
                  zeta_threshold=args.threshold, contingencies=contingencies)
    config = {"model": str(args.model), "exact": args.exact, "points": len(rows)}
    if args.exact and rows:
        config["agreement"] = float(np.mean([r["agree"] for r in rows]))
    write_report(args.out, "assess", rows, config)


def cmd_sweep_k(args) -> None:
    _require(args, "dataset")
    case, header, records = _load_dataset_case(args)
    nodes = _nodes_flag(case, args.nodes, args.n_nodes, header.aggregation_nodes)
    spec = ModelSpec(conv_filters=args.conv_filters, conv_kernel=args.conv_kernel,
                     fc_sizes=tuple(args.fc_sizes), k_len=max(args.k_values), n_features=N_FEATURES,
                     aggregation_nodes=nodes)
    _emit(args, k_sweep(case, records, args.k_values, args.repeats, spec, _train_config(args)))


def cmd_sweep_nodes(args) -> None:
    _require(args, "dataset")
    case, header, records = _load_dataset_case(args)
    nodes = _explicit_nodes(args) or list(range(case.n_buses))
    spec = ModelSpec(conv_filters=args.conv_filters, conv_kernel=args.conv_kernel,
                     fc_sizes=tuple(args.fc_sizes), k_len=args.k_len or header.k_len, n_features=N_FEATURES,
                     aggregation_nodes=(nodes[0],))
    _emit(args, node_sweep(case, records, nodes, spec, _train_config(args)))


def cmd_missing_data(args) -> None:
    _require(args, "model", "dataset")
    params, spec = load_model(args.model)
    case, _, records = _load_dataset_case(args)
    check_model_compatible(spec, case)
    _emit(args, missing_data_experiment(params, case, records, args.budget, args.fractions, _train_config(args)))


def cmd_placement(args) -> None:
    _require(args, "case")
    case, _, entry = resolve_case(args.case)
    nodes = _nodes_flag(case, args.nodes, args.n_nodes or entry.get("n_nodes"), entry.get("aggregation_nodes"))
    _emit(args, placement_report(case, args.budget, nodes))


def cmd_bench(args) -> None:
    _require(args, "model", "dataset")
    params, spec = load_model(args.model)
    case, header, records = _load_dataset_case(args)
    check_model_compatible(spec, case)
    _emit(args, benchmark_inference(params, case, header, records, args.batch_size, args.repeats))


# --- parser -----------------------------------------------------------------------------------------

def _add_case_flags(p, dataset: bool = True) -> None:
    p.add_argument("--case", help="case file or registered system id")
    if dataset:
        p.add_argument("--dataset", help="dataset file")


def _add_feature_flags(p) -> None:
    p.add_argument("--k-len", type=int, help="aggregation length K")
    p.add_argument("--nodes", nargs="+", help="aggregation bus indices, or 'auto'")
    p.add_argument("--n-nodes", type=int, help="number of aggregation nodes chosen by 'auto'")


def _add_train_flags(p) -> None:
    p.add_argument("--lr", type=float, default=TRAIN_CONFIG["lr"])
    p.add_argument("--batch-size", type=int, default=TRAIN_CONFIG["batch_size"])
    p.add_argument("--epochs", type=int, default=TRAIN_CONFIG["epochs"])
    p.add_argument("--conv-filters", type=int, default=TRAIN_CONFIG["conv_filters"])
    p.add_argument("--conv-kernel", type=int, default=TRAIN_CONFIG["conv_kernel"])
    p.add_argument("--fc-sizes", type=int, nargs=3, default=list(TRAIN_CONFIG["fc_sizes"]))


def _add_split_flags(p) -> None:
    p.add_argument("--split", type=float, nargs=3, default=list(TRAIN_CONFIG["split"]),
                   help="train / validation / test fractions")
    p.add_argument("--decision-threshold", type=float, default=TRAIN_CONFIG["decision_threshold"])


def build_parser() -> CliParser:
    parser = CliParser(prog="ssa-gnn", description="N-1 small-signal security labelling and GNN assessment")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="key=value file mirroring the flags")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="sample, solve and label operating points")
    _add_case_flags(p)
    _add_feature_flags(p)
    p.add_argument("--n-points", type=int)
    p.add_argument("--scale-range", type=float, nargs=2, default=list(DATASET_CONFIG["scale_range"]))
    p.add_argument("--threshold", type=float, default=SMALL_SIGNAL_CONFIG["threshold"])
    p.add_argument("--contingencies", choices=("lines", "all"), default=DATASET_CONFIG["contingencies"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resolve-post-outage", action="store_true",
                   default=SMALL_SIGNAL_CONFIG["resolve_post_outage"])
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_case_flags(p)
    _add_feature_flags(p)
    _add_train_flags(p)
    _add_split_flags(p)
    p.add_argument("--model", help="output model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-split metrics of a model")
    _add_case_flags(p)
    _add_feature_flags(p)
    _add_split_flags(p)
    p.add_argument("--model")
    p.add_argument("--baseline-predictions", help="CSV with a 'prediction' column for the test split")
    p.set_defaults(func=cmd_evaluate, lr=TRAIN_CONFIG["lr"], batch_size=TRAIN_CONFIG["batch_size"],
                   epochs=TRAIN_CONFIG["epochs"])

    p = sub.add_parser("assess", help="online verdicts for stored or fresh operating points")
    _add_case_flags(p)
    _add_feature_flags(p)
    p.add_argument("--model")
    p.add_argument("--n-points", type=int)
    p.add_argument("--scale-range", type=float, nargs=2, default=list(DATASET_CONFIG["scale_range"]))
    p.add_argument("--exact", action="store_true", help="also run the exact N-1 labelling")
    p.add_argument("--threshold", type=float, default=SMALL_SIGNAL_CONFIG["threshold"])
    p.add_argument("--contingencies", choices=("lines", "all"), default=DATASET_CONFIG["contingencies"])
    p.add_argument("--decision-threshold", type=float, default=TRAIN_CONFIG["decision_threshold"])
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("sweep-k", help="accuracy and size against aggregation length")
    _add_case_flags(p)
    _add_feature_flags(p)
    _add_train_flags(p)
    _add_split_flags(p)
    p.add_argument("--k-values", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("sweep-nodes", help="accuracy of single-node models against node centrality")
    _add_case_flags(p)
    p.add_argument("--k-len", type=int, help="aggregation length K")
    p.add_argument("--nodes", nargs="+", help="candidate bus indices (default: every bus)")
    _add_train_flags(p)
    _add_split_flags(p)
    p.set_defaults(func=cmd_sweep_nodes)

    p = sub.add_parser("missing-data", help="metrics with unobserved buses")
    _add_case_flags(p)
    _add_split_flags(p)
    p.add_argument("--model")
    p.add_argument("--budget", type=float, default=FEATURE_CONFIG["pmu_budget"])
    p.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.15, 0.2])
    p.set_defaults(func=cmd_missing_data, lr=TRAIN_CONFIG["lr"], batch_size=TRAIN_CONFIG["batch_size"],
                   epochs=TRAIN_CONFIG["epochs"])

    p = sub.add_parser("placement", help="centrality, communities and sensor placement")
    _add_case_flags(p, dataset=False)
    _add_feature_flags(p)
    p.add_argument("--budget", type=float, default=FEATURE_CONFIG["pmu_budget"])
    p.set_defaults(func=cmd_placement)

    p = sub.add_parser("bench", help="inference latency")
    _add_case_flags(p)
    p.add_argument("--model")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--repeats", type=int, default=100)
    p.set_defaults(func=cmd_bench)
    return parser


# --- config file ---------------------------------------------------------------------------------

def _convert(action: argparse.Action, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        value = raw.strip().lower()
        if value in _TRUE:
            return True
        if value in _FALSE:
            return False
        raise UsageError(f"--{action.dest.replace('_', '-')} expects a boolean, got '{raw}'")
    convert = action.type or str
    try:
        if action.nargs in ("+", "*") or isinstance(action.nargs, int):
            return [convert(tok) for tok in raw.split()]
        return convert(raw)
    except ValueError as exc:
        raise UsageError(f"bad value '{raw}' for --{action.dest.replace('_', '-')}") from exc


def apply_config_file(parser: CliParser, argv: Sequence[str]) -> None:
    """Turn ``--config`` entries into parser defaults for the top level and the chosen subcommand."""
    pre_parser = CliParser(add_help=False)
    pre_parser.add_argument("--config")
    known, rest = pre_parser.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise DataError(f"config file {path} not found")
    values = dotenv_values(path)

    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((tok for tok in rest if tok in sub_action.choices), None)
    targets = [parser] + ([sub_action.choices[command]] if command else [])
    actions = {a.dest: (p, a) for p in targets for a in p._actions if a.option_strings and a.dest != "help"}

    known_dests = {a.dest for p in [parser, *sub_action.choices.values()] for a in p._actions}
    for key, raw in values.items():
        dest = key.strip().lstrip("-").replace("-", "_")
        if dest == "config" or raw is None:
            continue
        if dest not in known_dests:
            raise UsageError(f"unknown config key '{key}'")
        if dest not in actions:
            continue
        target, action = actions[dest]
        target.set_defaults(**{dest: _convert(action, raw)})


# --- entry point -------------------------------------------------------------------------------

def setup_logging(out_dir: str, verbose: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, str(LOG_CONFIG["level"]).upper(), logging.INFO),
        format=LOG_CONFIG["format"],
        handlers=[
            logging.FileHandler(out / LOG_CONFIG["file"], encoding="utf-8"),
            logging.StreamHandler(),
        ],
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    setup_logging(args.out, args.verbose)
    logger.info(f"{args.command}: seed {args.seed}, output in {args.out}")
    try:
        args.func(args)
    except UsageError as exc:
        logger.error(f"usage error: {exc}")
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        logger.error(f"data error: {exc}")
        return EXIT_DATA
    except NumericalError as exc:
        logger.error(f"numerical failure: {exc}")
        return EXIT_NUMERICAL
    except SSAError as exc:
        logger.error(f"{exc}")
        return exc.exit_code
    except ValueError as exc:
        logger.error(f"invalid argument: {exc}")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
