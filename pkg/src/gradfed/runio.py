"""Run-directory artifacts: metrics CSV, summary JSON, checkpoints.

All files are written atomically (temp file in the target directory,
then rename), so an interrupted run never leaves a truncated file that
still parses. Floats are serialized with shortest round-trip formatting,
which makes reruns of the same config byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .federation import RoundRecord

CSV_COLUMNS = (
    "round",
    "strategy",
    "train_loss",
    "test_accuracy",
    "selected_clients",
    "mean_grad_norm",
    "max_grad_norm",
    "step_norm",
    "uplink_bytes",
    "downlink_bytes",
)

CONFIG_FILENAME = "config.txt"
METRICS_FILENAME = "metrics.csv"
SUMMARY_FILENAME = "summary.json"
CHECKPOINT_ROUNDS_FILENAME = "checkpoint_rounds.npy"
CHECKPOINT_PARAMS_FILENAME = "checkpoint_params.npy"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(value: float) -> str:
    return repr(float(value))


def metrics_csv_text(records: Sequence[RoundRecord]) -> str:
    """CSV body for the evaluated rounds of a run."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        if not math.isfinite(r.test_accuracy):
            continue
        writer.writerow(
            [
                r.round,
                r.strategy,
                _fmt(r.train_loss),
                _fmt(r.test_accuracy),
                ";".join(str(cid) for cid in r.selected),
                _fmt(r.mean_grad_norm),
                _fmt(r.max_grad_norm),
                _fmt(r.step_norm),
                r.uplink_bytes,
                r.downlink_bytes,
            ]
        )
    return buffer.getvalue()


def write_metrics_csv(path, records: Sequence[RoundRecord]) -> None:
    atomic_write_text(path, metrics_csv_text(records))


def read_metrics_csv(path) -> list[RoundRecord]:
    """Rebuild (thin) round records from a metrics file.

    Per-client score vectors are not stored in the CSV, so the rebuilt
    records carry empty per-client tuples; the scalar columns are exact.
    """
    records = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected CSV columns {reader.fieldnames}")
        for row in reader:
            selected = tuple(int(p) for p in row["selected_clients"].split(";") if p)
            records.append(
                RoundRecord(
                    round=int(row["round"]),
                    strategy=row["strategy"],
                    selected=selected,
                    per_client_norm=(),
                    per_client_loss=(),
                    mean_grad_norm=float(row["mean_grad_norm"]),
                    max_grad_norm=float(row["max_grad_norm"]),
                    aggregated_norm=float("nan"),
                    step_norm=float(row["step_norm"]),
                    train_loss=float(row["train_loss"]),
                    test_accuracy=float(row["test_accuracy"]),
                    test_loss=float("nan"),
                    uplink_bytes=int(row["uplink_bytes"]),
                    downlink_bytes=int(row["downlink_bytes"]),
                )
            )
    return records


def write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_checkpoints(run_dir, checkpoints: Sequence[tuple[int, np.ndarray]]) -> None:
    """Persist (round, parameters) checkpoints as a pair of .npy files."""
    if not checkpoints:
        return
    run_dir = Path(run_dir)
    rounds = np.array([t for t, _ in checkpoints], dtype=np.int64)
    params = np.stack([w for _, w in checkpoints]).astype(np.float64)
    for name, array in (
        (CHECKPOINT_ROUNDS_FILENAME, rounds),
        (CHECKPOINT_PARAMS_FILENAME, params),
    ):
        buffer = io.BytesIO()
        np.save(buffer, array)
        atomic_write_bytes(run_dir / name, buffer.getvalue())


def read_checkpoints(run_dir) -> list[tuple[int, np.ndarray]]:
    run_dir = Path(run_dir)
    rounds_path = run_dir / CHECKPOINT_ROUNDS_FILENAME
    params_path = run_dir / CHECKPOINT_PARAMS_FILENAME
    if not rounds_path.exists() or not params_path.exists():
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    rounds = np.load(rounds_path)
    params = np.load(params_path)
    if len(rounds) != len(params):
        raise ValueError(f"{run_dir}: checkpoint rounds and parameters disagree in length")
    return [(int(t), params[i]) for i, t in enumerate(rounds)]
