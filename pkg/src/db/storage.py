"""
On-disk formats: generated datasets, experiment reports and training history.

Datasets, report CSVs and history CSVs open with a versioned magic line; JSON
reports carry the same tag in a ``format`` field. Dataset records hold the raw
per-bus signals and per-branch flows so features can be rebuilt at any
aggregation length or observation mask.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import DatasetFormatError

logger = logging.getLogger(__name__)

DATASET_MAGIC = "SSAGNN-DATASET"
DATASET_VERSION = 1
REPORT_MAGIC = "SSAGNN-REPORT"
HISTORY_MAGIC = "SSAGNN-HISTORY"
TABLE_VERSION = 1
HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class DatasetHeader:
    case_hash: str
    k_len: int
    aggregation_nodes: Tuple[int, ...]
    threshold: float
    seed: int
    scale_range: Tuple[float, float]
    contingencies: str
    n_contingencies: int
    kept: int
    discarded: Dict[str, int] = field(default_factory=dict)
    class_balance: Dict[str, float] = field(default_factory=dict)
    case_file: str = ""
    version: int = DATASET_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregation_nodes"] = list(self.aggregation_nodes)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetHeader":
        return cls(
            case_hash=str(d["case_hash"]),
            k_len=int(d["k_len"]),
            aggregation_nodes=tuple(int(n) for n in d["aggregation_nodes"]),
            threshold=float(d["threshold"]),
            seed=int(d["seed"]),
            scale_range=(float(d["scale_range"][0]), float(d["scale_range"][1])),
            contingencies=str(d["contingencies"]),
            n_contingencies=int(d["n_contingencies"]),
            kept=int(d["kept"]),
            discarded={str(k): int(v) for k, v in d.get("discarded", {}).items()},
            class_balance={str(k): float(v) for k, v in d.get("class_balance", {}).items()},
            case_file=str(d.get("case_file", "")),
            version=int(d["version"]),
        )


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    """One labelled operating point."""

    draw: int
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_net: np.ndarray
    q_net: np.ndarray
    line_p: np.ndarray
    line_q: np.ndarray
    label: int
    min_zeta: Optional[float]
    per_contingency: Tuple[Tuple[int, Optional[float]], ...]

    def to_dict(self) -> dict:
        return {
            "draw": self.draw,
            "v_mag": self.v_mag.tolist(),
            "v_ang": self.v_ang.tolist(),
            "p_net": self.p_net.tolist(),
            "q_net": self.q_net.tolist(),
            "line_p": self.line_p.tolist(),
            "line_q": self.line_q.tolist(),
            "label": self.label,
            "min_zeta": self.min_zeta,
            "per_contingency": [[k, z] for k, z in self.per_contingency],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        arrays = {key: np.asarray(d[key], dtype=float) for key in ("v_mag", "v_ang", "p_net", "q_net", "line_p", "line_q")}
        label = int(d["label"])
        if label not in (0, 1):
            raise ValueError(f"label {label} is not binary")
        return cls(
            draw=int(d["draw"]),
            label=label,
            min_zeta=None if d["min_zeta"] is None else float(d["min_zeta"]),
            per_contingency=tuple((int(k), None if z is None else float(z)) for k, z in d["per_contingency"]),
            **arrays,
        )


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_dataset(path: Union[str, Path], header: DatasetHeader, records: Sequence[DatasetRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{DATASET_MAGIC} {DATASET_VERSION}\n")
        fh.write(_dumps(header.to_dict()) + "\n")
        for record in records:
            fh.write(_dumps(record.to_dict()) + "\n")
    logger.info(f"wrote {len(records)} records to {path}")
    return path


def read_dataset(path: Union[str, Path]) -> Tuple[DatasetHeader, List[DatasetRecord]]:
    """
    Load a dataset file.

    Raises:
        DatasetFormatError: wrong magic or version, malformed header or record
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read dataset {path}: {exc}") from exc
    if not lines or not lines[0].startswith(DATASET_MAGIC + " "):
        raise DatasetFormatError(f"{path} is not a dataset file")
    version = lines[0].split(" ", 1)[1].strip()
    if version != str(DATASET_VERSION):
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if len(lines) < 2:
        raise DatasetFormatError(f"{path} has no header")
    try:
        header = DatasetHeader.from_dict(json.loads(lines[1]))
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise DatasetFormatError(f"bad dataset header: {exc}") from exc

    records = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        try:
            records.append(DatasetRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"bad record on line {lineno}: {exc}") from exc
    if len(records) != header.kept:
        raise DatasetFormatError(f"header declares {header.kept} records, file has {len(records)}")
    return header, records


# --- reports ---------------------------------------------------------------------------------

def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return " ".join(_cell(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _frame(rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> pd.DataFrame:
    return pd.DataFrame([{k: _cell(v) for k, v in row.items()} for row in rows], columns=list(columns) if columns else None)


def rows_to_csv(rows: Sequence[Dict[str, Any]]) -> str:
    if not rows:
        return ""
    return _frame(rows).to_csv(index=False, lineterminator="\n")


def format_table(rows: Sequence[Dict[str, Any]]) -> str:
    """Fixed-width text rendering for the log."""
    if not rows:
        return "(no rows)"

    def show(v):
        if v is None:
            return "-"
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.4f}"
        return _cell(v)

    frame = pd.DataFrame([{k: show(v) for k, v in row.items()} for row in rows])
    return frame.to_string(index=False)


def _magic_line(magic: str) -> str:
    return f"{magic} {TABLE_VERSION}\n"


def write_report(out_dir: Union[str, Path], name: str, rows: Sequence[Dict[str, Any]],
                 config: Optional[Dict[str, Any]] = None) -> Tuple[Path, Path]:
    """Write ``<name>.csv`` and ``<name>.json`` side by side."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    json_path = out_dir / f"{name}.json"
    csv_path.write_text(_magic_line(REPORT_MAGIC) + rows_to_csv(rows), encoding="utf-8")
    document = {"format": REPORT_MAGIC, "version": TABLE_VERSION, "config": config or {}, "rows": list(rows)}
    json_path.write_text(json.dumps(document, indent=2, sort_keys=True, default=_json_default) + "\n",
                         encoding="utf-8")
    logger.info(f"{name} report:\n{format_table(rows)}")
    logger.info(f"report written to {csv_path} and {json_path}")
    return csv_path, json_path


def _json_default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_history(path: Union[str, Path], history: Sequence) -> Path:
    """Per-epoch training history as CSV (epoch, train_loss, train_acc, val_loss, val_acc)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = _frame([asdict(record) for record in history], columns=HISTORY_COLUMNS)
    path.write_text(_magic_line(HISTORY_MAGIC) + frame.to_csv(index=False, lineterminator="\n"), encoding="utf-8")
    return path


def _read_table(path: Union[str, Path], magic: str) -> List[Dict[str, str]]:
    """Rows of a magic-headed CSV as strings; empty cells stay empty strings."""
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            first = fh.readline().rstrip("\n")
            if not first.startswith(magic + " "):
                raise DatasetFormatError(f"{path} is not a {magic} file")
            version = first.split(" ", 1)[1].strip()
            if version != str(TABLE_VERSION):
                raise DatasetFormatError(f"unsupported {magic} version {version}")
            try:
                frame = pd.read_csv(fh, dtype=str, keep_default_na=False)
            except pd.errors.EmptyDataError:
                return []
    except DatasetFormatError:
        raise
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc}") from exc
    return frame.to_dict(orient="records")


def read_report(path: Union[str, Path]) -> List[Dict[str, str]]:
    return _read_table(path, REPORT_MAGIC)


def read_history(path: Union[str, Path]) -> List[Dict[str, str]]:
    return _read_table(path, HISTORY_MAGIC)


def read_predictions(path: Union[str, Path]) -> List[int]:
    """Binary predictions from a CSV with a ``prediction`` column (external baselines)."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
        if "prediction" not in frame.columns:
            raise DatasetFormatError(f"{path} lacks a 'prediction' column")
        preds = [int(float(p)) for p in frame["prediction"]]
    except DatasetFormatError:
        raise
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"cannot read predictions from {path}: {exc}") from exc
    if any(p not in (0, 1) for p in preds):
        raise DatasetFormatError(f"{path} contains non-binary predictions")
    return preds
