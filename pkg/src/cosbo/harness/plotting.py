"""Figures for sweep reports.

Every plotting function draws onto a supplied axis, or a fresh one, and
returns the axis so callers can compose panels.
"""

from __future__ import annotations

from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SCENARIO_ORDER = ("offline-only", "learned-model", "concat-baseline", "sim-medium", "sim-very", "sim-extreme")
_COLORS = dict(zip(SCENARIO_ORDER, plt.cm.tab10(np.arange(len(SCENARIO_ORDER)))))


def _ordered(scenarios):
    known = [s for s in SCENARIO_ORDER if s in scenarios]
    return known + sorted(set(scenarios) - set(known))


def plot_learning_curves(curves: dict[str, list[tuple[np.ndarray, np.ndarray]]],
                         axis: Optional[plt.Axes] = None, anchors: Optional[dict] = None) -> plt.Axes:
    """Mean evaluation return per scenario with a ±1 std band across seeds.

    Args:
        curves: scenario -> list of (iterations, returns) pairs, one per seed
        axis: Axis to draw on
        anchors: Optional reference returns drawn as horizontal lines
    """
    axis = axis or plt.gca()
    for scenario in _ordered(curves):
        runs = curves[scenario]
        n = min(len(x) for x, _ in runs)
        x = runs[0][0][:n]
        y = np.stack([r[:n] for _, r in runs])
        mean, std = y.mean(axis=0), y.std(axis=0)
        color = _COLORS.get(scenario)
        axis.plot(x, mean, label=scenario, color=color)
        axis.fill_between(x, mean - std, mean + std, alpha=0.2, color=color, linewidth=0)
    for name, value in (anchors or {}).items():
        axis.axhline(value, color="gray", linestyle=":", linewidth=1)
        axis.annotate(name, (0.01, value), xycoords=("axes fraction", "data"), fontsize=7, color="gray",
                      va="bottom")
    axis.set_xlabel("iteration")
    axis.set_ylabel("evaluation return")
    axis.legend(fontsize=8, frameon=False)
    return axis


def plot_final_returns(finals: dict[str, list[float]], axis: Optional[plt.Axes] = None) -> plt.Axes:
    """Per-seed final returns as points over a mean bar for each scenario."""
    axis = axis or plt.gca()
    names = _ordered(finals)
    for i, scenario in enumerate(names):
        vals = np.asarray(finals[scenario])
        axis.bar(i, vals.mean(), color=_COLORS.get(scenario), alpha=0.5, width=0.6)
        axis.scatter(np.full(len(vals), i), vals, color="k", s=10, zorder=3)
    axis.set_xticks(range(len(names)))
    axis.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    axis.set_ylabel("final return")
    return axis


def save_report_figure(curves, finals, path, anchors=None) -> None:
    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4), gridspec_kw={"width_ratios": [3, 2]})
    plot_learning_curves(curves, left, anchors)
    plot_final_returns(finals, right)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
