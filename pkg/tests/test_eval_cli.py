import numpy as np
import pytest

from core.eval_cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from db.storage import read_dataset, read_report

TRAIN_FLAGS = ["--epochs", "5", "--batch-size", "8", "--lr", "0.01"]


def run(out, *args):
    return main(["--out", str(out), *map(str, args)])


def balanced_dataset(out, seed=0):
    """Generate once, then again with the median damping as threshold."""
    base = ["--seed", seed, "--out", out]
    flags = ["generate", "--case", "three_machine", "--n-points", 20, "--k-len", 1, "--nodes", 0]
    assert main([*map(str, base), *map(str, flags), "--dataset", str(out / "unthresholded.jsonl")]) == EXIT_OK
    _, records = read_dataset(out / "unthresholded.jsonl")
    median = float(np.median([r.min_zeta for r in records]))
    assert main([*map(str, base), *map(str, flags), "--threshold", repr(median)]) == EXIT_OK
    return out / "dataset.jsonl"


def pipeline(out):
    dataset = balanced_dataset(out)
    assert main(["--out", str(out), "train", "--dataset", str(dataset), *TRAIN_FLAGS]) == EXIT_OK
    assert main(["--out", str(out), "evaluate", "--dataset", str(dataset), "--model", str(out / "model.bin")]) == EXIT_OK
    return dataset


def test_pipeline_reports_are_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    pipeline(first)
    pipeline(second)
    for name in ("generate.csv", "train.csv", "history.csv", "evaluate.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
    assert (first / "run.log").exists()


def test_evaluate_report_contents(tmp_path):
    pipeline(tmp_path)
    rows = read_report(tmp_path / "evaluate.csv")
    assert rows[0]["model"] == "gnn"
    assert rows[0]["n_params"] == "85"
    tp, tn, fp, fn = (int(rows[0][k]) for k in ("tp", "tn", "fp", "fn"))
    assert float(rows[0]["accuracy"]) == (tp + tn) / (tp + tn + fp + fn)


def test_baseline_predictions(tmp_path):
    dataset = pipeline(tmp_path)
    baseline = tmp_path / "baseline.csv"
    baseline.write_text("prediction\n1\n0\n")
    code = run(tmp_path, "evaluate", "--dataset", dataset, "--model", tmp_path / "model.bin",
               "--baseline-predictions", baseline)
    assert code == EXIT_OK
    rows = read_report(tmp_path / "evaluate.csv")
    assert [r["model"] for r in rows] == ["gnn", "baseline"]

    baseline.write_text("prediction\n1\n")
    assert run(tmp_path, "evaluate", "--dataset", dataset, "--model", tmp_path / "model.bin",
               "--baseline-predictions", baseline) == EXIT_DATA


def test_downstream_subcommands(tmp_path):
    dataset = pipeline(tmp_path)
    model = tmp_path / "model.bin"
    assert run(tmp_path, "assess", "--dataset", dataset, "--model", model, "--exact", "--n-points", 5) == EXIT_OK
    rows = read_report(tmp_path / "assess.csv")
    assert len(rows) == 5 and "agree" in rows[0]

    assert run(tmp_path, "sweep-k", "--dataset", dataset, "--k-values", 1, 2, *TRAIN_FLAGS) == EXIT_OK
    assert run(tmp_path, "missing-data", "--dataset", dataset, "--model", model,
               "--budget", 0.25, "--fractions", 0, 0.25) == EXIT_OK
    assert run(tmp_path, "bench", "--dataset", dataset, "--model", model, "--repeats", 2) == EXIT_OK
    assert run(tmp_path, "sweep-nodes", "--dataset", dataset, "--nodes", 0, 1, *TRAIN_FLAGS) == EXIT_OK
    assert [r["node"] for r in read_report(tmp_path / "sweep_nodes.csv")] == ["0", "1"]
    assert read_report(tmp_path / "bench.csv")[0]["batch_size"] == "1"
    assert run(tmp_path, "placement", "--case", "three_machine", "--budget", 0.25) == EXIT_OK
    assert run(tmp_path / "areas", "placement", "--case", "area140") == EXIT_OK
    assert sum(int(r["aggregation"]) for r in read_report(tmp_path / "areas" / "placement.csv")) == 3
    for name in ("sweep_k", "missing_data", "bench", "placement"):
        assert (tmp_path / f"{name}.csv").exists()
        assert (tmp_path / f"{name}.json").exists()


def test_assess_fresh_points(tmp_path):
    pipeline(tmp_path)
    code = run(tmp_path, "assess", "--case", "three_machine", "--model", tmp_path / "model.bin", "--n-points", 3)
    assert code == EXIT_OK


def test_k_mismatch_is_a_data_error(tmp_path):
    dataset = pipeline(tmp_path)
    code = run(tmp_path, "assess", "--dataset", dataset, "--model", tmp_path / "model.bin", "--k-len", 3)
    assert code == EXIT_DATA


def test_usage_errors(tmp_path):
    assert run(tmp_path) == EXIT_USAGE
    assert run(tmp_path, "frobnicate") == EXIT_USAGE
    assert run(tmp_path, "generate", "--n-points", 2) == EXIT_USAGE
    assert run(tmp_path, "generate", "--case", "smib", "--n-points", "many") == EXIT_USAGE


def test_data_errors(tmp_path):
    assert run(tmp_path, "generate", "--case", "no_such_system", "--n-points", 2) == EXIT_DATA
    broken = tmp_path / "broken.case"
    broken.write_text("BASE_MVA\n100\nBUS\n1 SLACK 0 0 1.0 0.9\n")
    assert run(tmp_path, "generate", "--case", broken, "--n-points", 2) == EXIT_DATA
    assert run(tmp_path, "train", "--dataset", tmp_path / "missing.jsonl") == EXIT_DATA


def test_numerical_failure(tmp_path, cases_dir):
    heavy = tmp_path / "heavy.case"
    heavy.write_text((cases_dir / "three_bus.case").read_text().replace("3 PQ 0.8 0.3", "3 PQ 160 0.3"))
    assert run(tmp_path, "generate", "--case", heavy, "--n-points", 2, "--k-len", 1, "--nodes", 0) == EXIT_NUMERICAL


def test_config_file_supplies_defaults(tmp_path):
    config = tmp_path / "run.env"
    config.write_text("seed=4\ncase=smib\nn-points=3\nk_len=1\nnodes=0\n")
    assert main(["--config", str(config), "--out", str(tmp_path), "generate"]) == EXIT_OK
    header, records = read_dataset(tmp_path / "dataset.jsonl")
    assert (header.seed, header.kept, header.k_len) == (4, 3, 1)

    assert main(["--config", str(config), "--out", str(tmp_path), "generate", "--n-points", "2"]) == EXIT_OK
    assert read_dataset(tmp_path / "dataset.jsonl")[0].kept == 2


def test_config_file_rejects_unknown_keys(tmp_path):
    config = tmp_path / "run.env"
    config.write_text("bogus=1\n")
    assert main(["--config", str(config), "--out", str(tmp_path), "placement", "--case", "smib"]) == EXIT_USAGE


def _mean_test_accuracy(out, dataset, model_flags, seeds):
    accuracies = []
    for seed in seeds:
        run_dir = out / f"seed{seed}"
        assert run(run_dir, "--seed", seed, "train", "--dataset", dataset, "--lr", 0.001, "--epochs", 500,
                   *model_flags) == EXIT_OK
        assert run(run_dir, "--seed", seed, "evaluate", "--dataset", dataset,
                   "--model", run_dir / "model.bin") == EXIT_OK
        accuracies.append(float(read_report(run_dir / "evaluate.csv")[0]["accuracy"]))
    return float(np.mean(accuracies))


@pytest.mark.slow
def test_ieee68_learning(tmp_path):
    assert run(tmp_path, "--seed", 1, "generate", "--case", "ieee68", "--n-points", 1000, "--workers", 4) == EXIT_OK
    dataset = tmp_path / "dataset.jsonl"
    header, records = read_dataset(dataset)
    assert header.kept == len(records) >= 1000

    seeds = range(4)
    default = _mean_test_accuracy(tmp_path / "default", dataset, [], seeds)
    wide_flags = ["--conv-filters", 10, "--fc-sizes", 10, 20, 1]
    wide = _mean_test_accuracy(tmp_path / "wide", dataset, wide_flags, seeds)

    secure = header.class_balance["secure"]
    if 0.3 <= secure <= 0.7:
        assert default >= 0.85
        assert wide >= 0.90
    else:
        majority = max(secure, 1 - secure)
        assert default >= min(1.0, majority + 0.15)
        assert wide >= min(1.0, majority + 0.15)

