"""Aggregate sweep run reports into a comparison table and figure."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

TABLE_COLUMNS = ("scenario", "seed", "final_return_mean", "final_return_std", "normalized_score",
                 "final_conservatism_gap", "n_seeds")


def collect_reports(sweep_dir) -> list[dict]:
    reports = []
    for path in sorted(Path(sweep_dir).glob("**/report.json")):
        report = json.loads(path.read_text())
        report["_path"] = str(path)
        reports.append(report)
    return reports


def comparison_rows(reports: list[dict]) -> list[dict]:
    """One row per (scenario, seed), then a mean±std summary row per scenario."""
    per_scenario = defaultdict(list)
    rows = []
    for rep in sorted(reports, key=lambda r: (r["scenario"], r["seed"])):
        final = rep["final"]
        gap = rep["metrics"][-1]["conservatism_gap"] if rep["metrics"] else float("nan")
        row = {"scenario": rep["scenario"], "seed": str(rep["seed"]), "final_return_mean": final["return_mean"],
               "final_return_std": final["return_std"], "normalized_score": final.get("normalized_score"),
               "final_conservatism_gap": gap, "n_seeds": 1}
        rows.append(row)
        per_scenario[rep["scenario"]].append(row)
    for scenario, group in sorted(per_scenario.items()):
        finals = np.array([r["final_return_mean"] for r in group])
        scores = [r["normalized_score"] for r in group if r["normalized_score"] is not None]
        rows.append({"scenario": scenario, "seed": "mean±std", "final_return_mean": float(finals.mean()),
                     "final_return_std": float(finals.std()),
                     "normalized_score": float(np.mean(scores)) if scores else None,
                     "final_conservatism_gap": float(np.mean([r["final_conservatism_gap"] for r in group])),
                     "n_seeds": len(group)})
    return rows


def write_table(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                             for c in TABLE_COLUMNS])


def format_table(rows: list[dict]) -> str:
    lines = [f"{'scenario':<16} {'seed':>9} {'final return':>22} {'norm. score':>11}"]
    for r in rows:
        score = "" if r["normalized_score"] is None else f"{r['normalized_score']:.1f}"
        ret = f"{r['final_return_mean']:.1f} ± {r['final_return_std']:.1f}"
        lines.append(f"{r['scenario']:<16} {r['seed']:>9} {ret:>22} {score:>11}")
    return "\n".join(lines)


def build_report(sweep_dir, out_dir=None, figure: bool = True) -> dict:
    """Write comparison.csv (and report.png) for every run report found under ``sweep_dir``."""
    reports = collect_reports(sweep_dir)
    if not reports:
        raise FileNotFoundError(f"no report.json files under {sweep_dir}")
    out_dir = Path(out_dir or sweep_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = comparison_rows(reports)
    write_table(rows, out_dir / "comparison.csv")
    outputs = {"table": str(out_dir / "comparison.csv"), "rows": rows}
    if figure:
        from .plotting import save_report_figure

        curves, finals = defaultdict(list), defaultdict(list)
        for rep in reports:
            it = np.array([m["iter"] for m in rep["metrics"]])
            ret = np.array([m["eval_return_mean"] for m in rep["metrics"]])
            curves[rep["scenario"]].append((it, ret))
            finals[rep["scenario"]].append(rep["final"]["return_mean"])
        anchors = {k: v for k, v in reports[0].get("anchors", {}).items()
                   if k in ("random", "expert", "behavior") and isinstance(v, (int, float))}
        save_report_figure(curves, finals, out_dir / "report.png", anchors)
        outputs["figure"] = str(out_dir / "report.png")
    return outputs
