"""Experiment grid: train every (feature mode, window length, model) cell over
a seed list, report train/test MSE in minutes^2, and render the comparison
table.  report.json holds only deterministic content; wall-clock timings go to
a separate sidecar so reruns are byte-identical."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import baselines, lstm, pipeline, sequencing, synth
from .fusion import LabeledData
from .lstm import TrainConfig

MODEL_FAMILY = {
    "lr": "Linear",
    "rt": "Non-linear",
    "rf": "Ensemble",
    "mlp": "Neural Network",
    "lstm": "Neural Network",
    "const": "Sanity",
}
FAMILY_ORDER = ["Linear", "Non-linear", "Ensemble", "Neural Network", "Sanity"]


@dataclass(frozen=True)
class Cell:
    feature_mode: str  # "t" | "st"
    n: int
    model: str

    def key(self) -> str:
        return f"{self.feature_mode}-{self.model}-{self.n}"


DEFAULT_CELLS = (
    Cell("st", 120, "lstm"),
    Cell("st", 30, "lstm"),
    Cell("t", 120, "lstm"),
    Cell("st", 120, "lr"),
)


@dataclass
class EvalConfig:
    cells: Tuple[Cell, ...] = DEFAULT_CELLS
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)
    train_frac: float = 0.8
    workers: int = 1
    lstm_hidden1: int = 32
    lstm_hidden2: int = 32
    lstm_epochs: int = 15
    lstm_batch_size: int = 128
    lstm_learning_rate: float = 3e-3
    lstm_dropout: float = 0.15
    grad_clip_norm: float = 5.0
    mlp_hidden: int = 64
    mlp_epochs: int = 60
    ridge_lambda: float = 1e-8
    tree_max_depth: int = 8
    tree_min_leaf: int = 5
    forest_trees: int = 20
    forest_feature_frac: float = 0.33

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "train_frac", "workers", "lstm_hidden1", "lstm_hidden2", "lstm_epochs",
            "lstm_batch_size", "lstm_learning_rate", "lstm_dropout", "grad_clip_norm",
            "mlp_hidden", "mlp_epochs", "ridge_lambda", "tree_max_depth",
            "tree_min_leaf", "forest_trees", "forest_feature_frac",
        )}
        d["cells"] = [[c.feature_mode, c.n, c.model] for c in self.cells]
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "cells" in d:
            d["cells"] = tuple(Cell(m, int(n), k) for m, n, k in d["cells"])
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)


def _flatten(ds: sequencing.SequenceDataset) -> np.ndarray:
    s, n, m = ds.x.shape
    return ds.x.reshape(s, n * m)


def _fit_predict(cell: Cell, train_ds, test_ds, seed: int, cfg: EvalConfig):
    """Train one cell; returns (train_mse, test_mse, test_predictions)."""
    y_tr, y_te = train_ds.y, test_ds.y
    if cell.model == "const":
        c = float(y_tr.mean())
        pred_tr = np.full(y_tr.shape, c)
        pred_te = np.full(y_te.shape, c)
    elif cell.model == "lr":
        model = baselines.linreg_fit(_flatten(train_ds), y_tr, cfg.ridge_lambda)
        pred_tr = baselines.linreg_predict(model, _flatten(train_ds))
        pred_te = baselines.linreg_predict(model, _flatten(test_ds))
    elif cell.model == "rt":
        model = baselines.tree_fit(_flatten(train_ds), y_tr,
                                   cfg.tree_max_depth, cfg.tree_min_leaf)
        pred_tr = baselines.tree_predict(model, _flatten(train_ds))
        pred_te = baselines.tree_predict(model, _flatten(test_ds))
    elif cell.model == "rf":
        model = baselines.forest_fit(
            _flatten(train_ds), y_tr, n_trees=cfg.forest_trees, seed=seed,
            max_depth=cfg.tree_max_depth, min_leaf=cfg.tree_min_leaf,
            feature_frac=cfg.forest_feature_frac,
        )
        pred_tr = baselines.forest_predict(model, _flatten(train_ds))
        pred_te = baselines.forest_predict(model, _flatten(test_ds))
    elif cell.model == "mlp":
        tc = TrainConfig(epochs=cfg.mlp_epochs, batch_size=cfg.lstm_batch_size,
                         learning_rate=1e-3, optimizer="adam",
                         grad_clip_norm=cfg.grad_clip_norm, seed=seed)
        model, _ = baselines.mlp_fit(_flatten(train_ds), y_tr, tc, hidden=cfg.mlp_hidden)
        pred_tr = baselines.mlp_predict(model, _flatten(train_ds))
        pred_te = baselines.mlp_predict(model, _flatten(test_ds))
    elif cell.model == "lstm":
        m = train_ds.x.shape[2]
        model = lstm.new_model(cell.n, m, cfg.lstm_hidden1, cfg.lstm_hidden2,
                               dropout_rate=cfg.lstm_dropout, seed=seed)
        tc = TrainConfig(epochs=cfg.lstm_epochs, batch_size=cfg.lstm_batch_size,
                         learning_rate=cfg.lstm_learning_rate, optimizer="adam",
                         grad_clip_norm=cfg.grad_clip_norm, seed=seed,
                         dropout_rate=cfg.lstm_dropout)
        model, _ = lstm.train(model, train_ds, tc)
        pred_tr = lstm.predict(model, train_ds.x)
        pred_te = lstm.predict(model, test_ds.x)
    else:
        raise ValueError(f"unknown model kind {cell.model!r}")
    return (lstm.mse_loss(pred_tr, y_tr), lstm.mse_loss(pred_te, y_te), pred_te)


def _median_pick(values: List[Tuple[float, int]]) -> int:
    """Seed attaining the (lower) median of the per-seed metric."""
    ranked = sorted(values)
    return ranked[(len(ranked) - 1) // 2][1]


def run_experiment(
    data_by_seed: Dict[int, LabeledData],
    cfg: EvalConfig,
) -> Tuple[dict, dict, Dict[str, Tuple[np.ndarray, np.ndarray]]]:
    """Run the grid.  Returns (report, timings, traces); traces map cell keys
    to (predicted, truth) on the test split of the median-MSE seed."""
    cells: List[Cell] = []
    seen = set()
    for c in cfg.cells:
        if c.key() not in seen:
            cells.append(c)
            seen.add(c.key())
    for mode, n in sorted({(c.feature_mode, c.n) for c in cells}):
        sanity = Cell(mode, n, "const")
        if sanity.key() not in seen:
            cells.append(sanity)
            seen.add(sanity.key())

    results: Dict[str, dict] = {}
    preds: Dict[Tuple[str, int], np.ndarray] = {}
    truths: Dict[Tuple[str, int], np.ndarray] = {}
    timings: Dict[str, dict] = {}

    for seed in cfg.seeds:
        data = data_by_seed[seed]
        cache: Dict[Tuple[str, int], tuple] = {}

        def datasets_for(cell: Cell):
            key = (cell.feature_mode, cell.n)
            if key not in cache:
                days = sequencing.labeled_to_days(data, cell.feature_mode)
                cache[key] = sequencing.build_dataset(days, cell.n, cfg.train_frac)
            return cache[key]

        def run_cell(cell: Cell):
            train_ds, test_ds = datasets_for(cell)
            t0 = time.perf_counter()
            try:
                train_mse, test_mse, pred_te = _fit_predict(
                    cell, train_ds, test_ds, seed, cfg)
                out = {"seed": seed, "train_mse": train_mse, "test_mse": test_mse}
                preds[(cell.key(), seed)] = pred_te
                truths[(cell.key(), seed)] = test_ds.y
            except Exception as exc:  # recorded per cell, not fatal to the grid
                out = {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}
            out_time = time.perf_counter() - t0
            timings.setdefault(cell.key(), {})[str(seed)] = out_time
            return cell, out

        for cell in cells:
            datasets_for(cell)  # build caches sequentially (memory-bounded)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(run_cell, cells))
        else:
            outcomes = [run_cell(c) for c in cells]
        for cell, out in outcomes:
            results.setdefault(cell.key(), {"cell": cell, "per_seed": []})
            results[cell.key()]["per_seed"].append(out)
        cache.clear()

    report_cells = []
    traces: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for key, entry in sorted(results.items()):
        cell = entry["cell"]
        per_seed = sorted(entry["per_seed"], key=lambda r: r["seed"])
        ok = [r for r in per_seed if "test_mse" in r]
        row = {
            "key": key,
            "feature_mode": cell.feature_mode,
            "n": cell.n,
            "model": cell.model,
            "family": MODEL_FAMILY[cell.model],
            "seeds": list(cfg.seeds),
            "per_seed": per_seed,
            "median_test_mse": float(np.median([r["test_mse"] for r in ok])) if ok else None,
            "median_train_mse": float(np.median([r["train_mse"] for r in ok])) if ok else None,
        }
        report_cells.append(row)
        if ok:
            pick = _median_pick([(r["test_mse"], r["seed"]) for r in ok])
            traces[key] = (preds[(key, pick)], truths[(key, pick)])
    report = {
        "cells": report_cells,
        "config": cfg.to_dict(),
        "metric": "MSE (minutes^2)",
    }
    return report, timings, traces


def mse_table_render(report: dict) -> str:
    """Aligned-text table (Method | Model | Test MSE), one section per feature
    mode; lossless with respect to the report's median test MSEs."""
    lines: List[str] = []
    cells = report.get("cells", [])
    modes = sorted({c["feature_mode"] for c in cells})
    header = f"{'Method':<16} {'Model':<12} {'Test MSE':>12}"
    if not cells:
        return header + "\n"
    for mode in modes:
        lines.append(f"== feature mode {mode.upper()} ==")
        lines.append(header)
        lines.append("-" * len(header))
        rows = [c for c in cells if c["feature_mode"] == mode]
        rows.sort(key=lambda c: (FAMILY_ORDER.index(c["family"]), c["model"], c["n"]))
        for c in rows:
            label = f"{c['model'].upper()}-{c['n']}"
            mse = c["median_test_mse"]
            mse_s = f"{mse:.4f}" if mse is not None else "failed"
            lines.append(f"{c['family']:<16} {label:<12} {mse_s:>12}")
        lines.append("")
    return "\n".join(lines) + "\n"


def write_outputs(
    out_dir,
    report: dict,
    timings: dict,
    traces: Dict[str, Tuple[np.ndarray, np.ndarray]],
    render_figures: bool = True,
) -> None:
    """Persist report.json / report.txt / timings.json / per-cell traces, and
    render the report figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(mse_table_render(report))
    with open(out_dir / "timings.json", "w", encoding="utf-8") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for key, (pred, truth) in sorted(traces.items()):
        with open(out_dir / f"trace_{key}.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("predicted,truth\n")
            for p, t in zip(pred, truth):
                fh.write(f"{repr(float(p))},{repr(float(t))}\n")
    if render_figures:
        from . import plots
        plots.render_report_figures(report, traces, out_dir)


def run_full_evaluation(
    scenario_cfg: synth.ScenarioConfig,
    feat_cfg: pipeline.FeaturizeConfig,
    eval_cfg: EvalConfig,
    out_dir,
    render_figures: bool = True,
    log=print,
):
    """synth -> featurize -> grid for every seed in the eval config; scenario
    CSVs land under out_dir/scenarios/seed_<s>/."""
    out_dir = Path(out_dir)
    data_by_seed: Dict[int, LabeledData] = {}
    for seed in eval_cfg.seeds:
        sdir = out_dir / "scenarios" / f"seed_{seed}"
        scfg = replace(scenario_cfg, seed=seed)
        synth.generate(scfg, sdir)
        log(f"[evaluate] scenario seed={seed} generated at {sdir}")
        data_by_seed[seed] = pipeline.featurize_dir(sdir, feat_cfg)
        log(f"[evaluate] seed={seed} featurized: "
            f"{data_by_seed[seed].x.shape[0]} rows, "
            f"{data_by_seed[seed].x.shape[1]} columns")
    report, timings, traces = run_experiment(data_by_seed, eval_cfg)
    write_outputs(out_dir, report, timings, traces, render_figures=render_figures)
    return report
