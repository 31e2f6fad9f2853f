"""Figure rendering for the evaluation report path.

Kept separate from the metric computation: the evaluator emits JSON/CSV and
this module turns them into PNG files next to them.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

MODE_LABEL = {"t": "T (airport-side)", "st": "ST (spatio-temporal)"}


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_mse_vs_window(report: dict, out_path) -> bool:
    """Median test MSE against window length, one line per (model, mode)."""
    series: Dict[Tuple[str, str], list] = {}
    for cell in report.get("cells", []):
        if cell["median_test_mse"] is None or cell["model"] == "const":
            continue
        series.setdefault((cell["model"], cell["feature_mode"]), []).append(
            (cell["n"], cell["median_test_mse"])
        )
    if not series:
        return False
    fig, ax = plt.subplots()
    for (model, mode), pts in sorted(series.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        style = "o-" if len(pts) > 1 else "o"
        ax.plot(xs, ys, style, label=f"{model.upper()} / {mode.upper()}")
    ax.set_xlabel("window length N (arrival events)")
    ax.set_ylabel("median test MSE (minutes$^2$)")
    ax.set_title("Test error vs. sequence length")
    ax.legend(fontsize=8)
    _save(fig, Path(out_path))
    return True


def plot_model_comparison(report: dict, out_path) -> bool:
    """Bar chart of median test MSE per cell, grouped by feature mode."""
    cells = [c for c in report.get("cells", []) if c["median_test_mse"] is not None]
    if not cells:
        return False
    cells.sort(key=lambda c: (c["feature_mode"], c["median_test_mse"]))
    labels = [f"{c['model'].upper()}-{c['n']}\n{c['feature_mode'].upper()}" for c in cells]
    values = [c["median_test_mse"] for c in cells]
    colors = ["#4878d0" if c["feature_mode"] == "st" else "#ee854a" for c in cells]
    fig, ax = plt.subplots()
    ax.bar(range(len(cells)), values, color=colors)
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("median test MSE (minutes$^2$)")
    ax.set_title("Model comparison")
    _save(fig, Path(out_path))
    return True


def plot_trace(key: str, pred: np.ndarray, truth: np.ndarray, out_path) -> bool:
    """Predicted vs. ground-truth delay over the test split of one cell."""
    if pred.size == 0:
        return False
    fig, ax = plt.subplots()
    xs = np.arange(pred.size)
    ax.plot(xs, truth, lw=0.9, label="ground truth")
    ax.plot(xs, pred, lw=0.9, alpha=0.85, label="predicted")
    ax.set_xlabel("test sequence index (chronological)")
    ax.set_ylabel("mean arrival delay (minutes)")
    ax.set_title(f"Predicted vs. truth: {key}")
    ax.legend(fontsize=8)
    _save(fig, Path(out_path))
    return True


def render_report_figures(
    report: dict,
    traces: Dict[str, Tuple[np.ndarray, np.ndarray]],
    out_dir,
) -> list:
    """Render all report figures into ``out_dir``; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created = []
    if plot_mse_vs_window(report, out_dir / "mse_vs_window.png"):
        created.append(out_dir / "mse_vs_window.png")
    if plot_model_comparison(report, out_dir / "model_comparison.png"):
        created.append(out_dir / "model_comparison.png")
    lstm_keys = [k for k in sorted(traces) if "lstm" in k]
    for key in lstm_keys[:2]:
        pred, truth = traces[key]
        path = out_dir / f"trace_{key}.png"
        if plot_trace(key, pred, truth, path):
            created.append(path)
    return created
