"""Command-line entry point wiring the modules into reproducible runs.

Every subcommand accepts ``--config <json>`` and ``--seed``; defaults are
complete, so ``synth -> featurize -> dataset -> train -> evaluate`` works with
no flags at all.  Each run appends a provenance line to ``<out_dir>/run.log``:
``<iso-ts> <subcommand> <config-sha256> <seed> <exit>``.

Exit codes: 0 success, 1 validation/input error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import baselines, evaluate, ingest, lstm, pipeline, sequencing, synth
from .fusion import read_labeled_csv, write_labeled_csv
from .ingest import SchemaError
from .lstm import TrainConfig, TrainingDiverged
from .synth import GenerationError, ScenarioConfig

DEFAULT_CONFIG = {
    "out_dir": "runs/quickstart",
    "scenario": ScenarioConfig().to_dict(),
    "featurize": pipeline.FeaturizeConfig().to_dict(),
    "ingest": {"source_tz_offset_min": 0},
    "dataset": {"n": 30, "mode": "st", "train_frac": 0.8},
    "train": {
        "model": "lstm",
        "hidden1": 32, "hidden2": 32,
        "epochs": 15, "batch_size": 64, "learning_rate": 3e-3,
        "optimizer": "adam", "grad_clip_norm": 5.0, "dropout_rate": 0.15,
        "seed": 0,
        "mlp_hidden": 64, "mlp_epochs": 60,
        "ridge_lambda": 1e-8,
        "tree_max_depth": 8, "tree_min_leaf": 5,
        "forest_trees": 20, "forest_feature_frac": 0.33,
    },
    "evaluate": evaluate.EvalConfig(seeds=(1, 2, 3)).to_dict(),
    "figures": True,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage text + exit 1 per the CLI contract
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path, seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    if seed is not None:
        cfg["scenario"]["seed"] = seed
        cfg["train"]["seed"] = seed
        cfg["evaluate"]["seeds"] = [seed]
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _log_run(out_dir: Path, subcommand: str, cfg_sha: str, seed, exit_code: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    ts = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    seed_txt = "-" if seed is None else str(seed)
    with open(out_dir / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{ts} {subcommand} {cfg_sha} {seed_txt} {exit_code}\n")


def cmd_synth(cfg: dict, args) -> int:
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / "scenario"
    scfg = ScenarioConfig.from_dict(cfg["scenario"])
    paths = synth.generate(scfg, out)
    print(f"scenario written to {out} ({scfg.days} days, "
          f"{scfg.flights_per_day} arrivals/day, seed {scfg.seed})")
    for name, p in paths.items():
        print(f"  {name}: {p}")
    return 0


def cmd_ingest(cfg: dict, args) -> int:
    scenario = Path(args.scenario) if args.scenario else Path(cfg["out_dir"]) / "scenario"
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / "normalized"
    offset = int(cfg["ingest"]["source_tz_offset_min"])
    parsed = ingest.load_dir(scenario)
    out.mkdir(parents=True, exist_ok=True)
    writers = {
        "flights": ingest.write_flights,
        "trajectories": ingest.write_trajectories,
        "weather": ingest.write_weather,
        "atc": ingest.write_atc,
    }
    for name, result in parsed.items():
        records = ingest.normalize_to_utc(result.records, offset)
        writers[name](out / f"{name}.csv", records)
        if result.rejects:
            ingest.write_rejects(out / f"{name}_rejects.csv", result.rejects)
        print(f"{name}: {len(result.records)} accepted, {len(result.rejects)} rejected")
    return 0


def cmd_featurize(cfg: dict, args) -> int:
    scenario = Path(args.scenario) if args.scenario else Path(cfg["out_dir"]) / "scenario"
    out_dir = Path(cfg["out_dir"])
    fcfg = pipeline.FeaturizeConfig.from_dict(cfg["featurize"])
    data = pipeline.featurize_dir(scenario, fcfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeled = Path(args.out) if args.out else out_dir / "labeled.csv"
    sidecar = labeled.with_name(labeled.stem + "_sidecar.json")
    write_labeled_csv(labeled, data, sidecar)
    n_avail = int(data.target_available.sum())
    print(f"labeled dataset: {data.x.shape[0]} rows x {data.x.shape[1]} features "
          f"({n_avail} with targets) -> {labeled}")
    print(f"sidecar -> {sidecar}")
    return 0


def cmd_dataset(cfg: dict, args) -> int:
    out_dir = Path(cfg["out_dir"])
    labeled = Path(args.labeled) if args.labeled else out_dir / "labeled.csv"
    sidecar = labeled.with_name(labeled.stem + "_sidecar.json")
    if not labeled.exists():
        raise FileNotFoundError(f"labeled dataset not found: {labeled}")
    data = read_labeled_csv(labeled, sidecar if sidecar.exists() else None)
    dcfg = cfg["dataset"]
    days = sequencing.labeled_to_days(data, dcfg["mode"])
    train, test = sequencing.build_dataset(days, int(dcfg["n"]), float(dcfg["train_frac"]))
    train_path = out_dir / "train.seq"
    test_path = out_dir / "test.seq"
    sequencing.save_dataset(train_path, train)
    sequencing.save_dataset(test_path, test)
    print(f"train: {train.x.shape} -> {train_path}")
    print(f"test:  {test.x.shape} -> {test_path}")
    return 0


def _flatten(ds: sequencing.SequenceDataset) -> np.ndarray:
    s, n, m = ds.x.shape
    return ds.x.reshape(s, n * m)


def cmd_train(cfg: dict, args) -> int:
    out_dir = Path(cfg["out_dir"])
    ds_path = Path(args.dataset) if args.dataset else out_dir / "train.seq"
    if not ds_path.exists():
        raise FileNotFoundError(f"training dataset not found: {ds_path}")
    train_ds = sequencing.load_dataset(ds_path)
    tcfg = cfg["train"]
    kind = tcfg["model"]
    model_path = Path(args.out) if args.out else out_dir / f"model_{kind}.bin"
    history = None
    if kind == "lstm":
        _, n, m = train_ds.x.shape
        model = lstm.new_model(n, m, tcfg["hidden1"], tcfg["hidden2"],
                               dropout_rate=tcfg["dropout_rate"], seed=tcfg["seed"])
        tc = TrainConfig(
            epochs=tcfg["epochs"], batch_size=tcfg["batch_size"],
            learning_rate=tcfg["learning_rate"], optimizer=tcfg["optimizer"],
            grad_clip_norm=tcfg["grad_clip_norm"], seed=tcfg["seed"],
            dropout_rate=tcfg["dropout_rate"],
        )
        model, history = lstm.train(model, train_ds, tc)
        lstm.save_model(model_path, model)
    elif kind in ("lr", "rt", "rf", "mlp"):
        x = _flatten(train_ds)
        y = train_ds.y
        if kind == "lr":
            model = baselines.linreg_fit(x, y, tcfg["ridge_lambda"])
        elif kind == "rt":
            model = baselines.tree_fit(x, y, tcfg["tree_max_depth"], tcfg["tree_min_leaf"])
        elif kind == "rf":
            model = baselines.forest_fit(
                x, y, n_trees=tcfg["forest_trees"], seed=tcfg["seed"],
                max_depth=tcfg["tree_max_depth"], min_leaf=tcfg["tree_min_leaf"],
                feature_frac=tcfg["forest_feature_frac"],
            )
        else:
            tc = TrainConfig(epochs=tcfg["mlp_epochs"], batch_size=tcfg["batch_size"],
                             learning_rate=1e-3, optimizer=tcfg["optimizer"],
                             grad_clip_norm=tcfg["grad_clip_norm"], seed=tcfg["seed"])
            model, history = baselines.mlp_fit(x, y, tc, hidden=tcfg["mlp_hidden"])
        baselines.save_baseline(model_path, model)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    if history is not None:
        with open(model_path.with_suffix(".history.json"), "w", encoding="utf-8") as fh:
            json.dump({"loss": history}, fh, indent=2)
            fh.write("\n")
        print(f"final epoch loss: {history[-1]:.6f}")
    print(f"checkpoint -> {model_path}")
    return 0


def cmd_predict(cfg: dict, args) -> int:
    out_dir = Path(cfg["out_dir"])
    model_path = Path(args.model) if args.model else out_dir / f"model_{cfg['train']['model']}.bin"
    ds_path = Path(args.dataset) if args.dataset else out_dir / "test.seq"
    for p in (model_path, ds_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input: {p}")
    ds = sequencing.load_dataset(ds_path)
    from . import binio
    kind, _, _ = binio.load_checkpoint(model_path)
    if kind == "lstm":
        model = lstm.load_model(model_path)
        preds = lstm.predict(model, ds.x)
    elif kind == "linreg":
        preds = baselines.linreg_predict(baselines.load_baseline(model_path), _flatten(ds))
    elif kind == "tree":
        preds = baselines.tree_predict(baselines.load_baseline(model_path), _flatten(ds))
    elif kind == "forest":
        preds = baselines.forest_predict(baselines.load_baseline(model_path), _flatten(ds))
    elif kind == "mlp":
        preds = baselines.mlp_predict(baselines.load_baseline(model_path), _flatten(ds))
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    out = Path(args.out) if args.out else out_dir / "predictions.csv"
    last_ts = ds.meta.get("last_row_ts", [])
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write("index,ts,predicted,truth\n")
        for i, p in enumerate(preds):
            ts = ingest.format_ts(int(last_ts[i])) if i < len(last_ts) else ""
            fh.write(f"{i},{ts},{repr(float(p))},{repr(float(ds.y[i]))}\n")
    print(f"predictions ({preds.size} rows) -> {out}")
    return 0


def cmd_evaluate(cfg: dict, args) -> int:
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / "eval"
    scfg = ScenarioConfig.from_dict(cfg["scenario"])
    fcfg = pipeline.FeaturizeConfig.from_dict(cfg["featurize"])
    ecfg = evaluate.EvalConfig.from_dict(cfg["evaluate"])
    report = evaluate.run_full_evaluation(
        scfg, fcfg, ecfg, out, render_figures=bool(cfg.get("figures", True)),
    )
    print(evaluate.mse_table_render(report))
    print(f"report -> {out / 'report.json'}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "featurize": cmd_featurize,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="airdelay",
                     description="Spatio-temporal arrival-delay prediction pipeline.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, help_text, extra=()):
        p = sub.add_parser(name, help=help_text)
        p.error = parser.error  # shared exit-1 behavior
        p.add_argument("--config", help="JSON config file (merged over defaults)")
        p.add_argument("--seed", type=int, help="override the run seed")
        for flag, kw in extra:
            p.add_argument(flag, **kw)
        return p

    add("synth", "generate a synthetic scenario",
        [("--out", {"help": "scenario output directory"})])
    add("ingest", "validate and UTC-normalize scenario CSVs",
        [("--scenario", {"help": "scenario directory"}),
         ("--out", {"help": "normalized output directory"})])
    add("featurize", "selection + congestion + encoding + fusion -> labeled CSV",
        [("--scenario", {"help": "scenario directory"}),
         ("--out", {"help": "labeled CSV path"})])
    add("dataset", "slice the labeled CSV into sequence containers",
        [("--labeled", {"help": "labeled CSV path"})])
    add("train", "train a model on a sequence container",
        [("--dataset", {"help": "training container path"}),
         ("--out", {"help": "checkpoint path"})])
    add("evaluate", "run the experiment grid and write the report",
        [("--out", {"help": "report output directory"})])
    add("predict", "apply a checkpoint to a sequence container",
        [("--model", {"help": "checkpoint path"}),
         ("--dataset", {"help": "sequence container path"}),
         ("--out", {"help": "predictions CSV path"})])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(cfg["out_dir"])
    sha = config_hash(cfg)
    try:
        code = COMMANDS[args.subcommand](cfg, args)
    except (FileNotFoundError, SchemaError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    except (GenerationError, TrainingDiverged, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        code = 2
    _log_run(out_dir, args.subcommand, sha, args.seed, code)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
