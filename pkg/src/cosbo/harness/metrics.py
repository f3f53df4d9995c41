"""Per-iteration metrics CSV."""

from __future__ import annotations

import csv
import math
from pathlib import Path

from ..core import METRIC_COLUMNS

INT_COLUMNS = {"iter", "buffer_size", "wall_ms"}


def _cell(key: str, value) -> str:
    if key in INT_COLUMNS:
        return str(int(value))
    return repr(float(value))


def write_metrics(series: list[dict], path) -> None:
    rows = []
    for row in series:
        row = dict(row)
        row["conservatism_gap"] = row["q_real_mean"] - row["q_synth_mean"]
        rows.append([_cell(k, row[k]) for k in METRIC_COLUMNS])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        out = []
        for line in reader:
            out.append({k: (int(v) if k in INT_COLUMNS else float(v)) for k, v in zip(header, line)})
    return out


def same_series(a: list[dict], b: list[dict], ignore=("wall_ms",)) -> bool:
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        for k in METRIC_COLUMNS:
            if k in ignore:
                continue
            x, y = ra[k], rb[k]
            if not (x == y or (isinstance(x, float) and math.isnan(x) and math.isnan(y))):
                return False
    return True


def csv_bytes_without(path, column: str = "wall_ms") -> bytes:
    """CSV content with one column blanked, for run-to-run comparison of timed runs."""
    lines = Path(path).read_text().splitlines()
    idx = lines[0].split(",").index(column)
    kept = [",".join(c for i, c in enumerate(line.split(",")) if i != idx) for line in lines]
    return "\n".join(kept).encode()
