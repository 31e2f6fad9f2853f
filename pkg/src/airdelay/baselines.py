"""Reference regressors for the comparison grid: ridge-stabilized linear
regression, a CART regression tree, a bagged forest, and a one-hidden-layer
MLP.  All of them consume the flattened (n * m) window."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import binio
from .lstm import TrainConfig, TrainingDiverged, mse_loss
from .optim import clip_global_norm, make_optimizer


class ConditioningError(ValueError):
    """Normal equations are singular; retry with ridge_lambda > 0."""


# ---------------------------------------------------------------------------
# Linear regression
# ---------------------------------------------------------------------------

@dataclass
class LinearModel:
    weights: np.ndarray  # (p,)
    intercept: float
    ridge_lambda: float


def linreg_fit(x, y, ridge_lambda: float = 1e-8) -> LinearModel:
    """Minimize ||Xw + b - y||^2 + lambda * ||w||^2 via the normal equations;
    the intercept is not penalized."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[0] != y.shape[0]:
        raise ValueError("linreg_fit needs x (rows, p) and matching y")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be nonnegative")
    rows, p = x.shape
    xa = np.concatenate([x, np.ones((rows, 1))], axis=1)
    gram = xa.T @ xa
    if ridge_lambda > 0:
        gram[np.arange(p), np.arange(p)] += ridge_lambda
    rhs = xa.T @ y
    try:
        sol = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(
            f"normal equations are singular ({exc}); use ridge_lambda > 0"
        ) from exc
    if not np.all(np.isfinite(sol)):
        raise ConditioningError(
            "normal equations produced non-finite coefficients; use ridge_lambda > 0"
        )
    return LinearModel(sol[:p], float(sol[p]), ridge_lambda)


def linreg_predict(model: LinearModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ model.weights + model.intercept


# ---------------------------------------------------------------------------
# CART regression tree
# ---------------------------------------------------------------------------

@dataclass
class RegressionTree:
    """Flat-array tree: feature[i] < 0 marks a leaf; children by index."""

    feature: np.ndarray    # int64
    threshold: np.ndarray  # float64
    left: np.ndarray       # int64
    right: np.ndarray      # int64
    value: np.ndarray      # float64, leaf/node mean
    n_samples: np.ndarray  # int64


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Exhaustive greedy split minimizing total child SSE; ties resolved by
    lowest feature index then lowest threshold."""
    rows, p = x.shape
    base_sse = float(np.sum((y - y.mean()) ** 2))
    best = None  # (sse, feature, threshold)
    for f in range(p):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order]
        csum = np.cumsum(ys)
        csum2 = np.cumsum(ys * ys)
        total = csum[-1]
        total2 = csum2[-1]
        for k in range(min_leaf, rows - min_leaf + 1):
            if k == rows or xs[k - 1] == xs[k]:
                continue
            left_sse = csum2[k - 1] - csum[k - 1] ** 2 / k
            rs = total - csum[k - 1]
            right_sse = (total2 - csum2[k - 1]) - rs * rs / (rows - k)
            sse = left_sse + right_sse
            if sse < base_sse - 1e-12 and (best is None or sse < best[0] - 1e-12):
                best = (sse, f, (xs[k - 1] + xs[k]) / 2.0)
    return best


def tree_fit(x, y, max_depth: int = 10, min_leaf: int = 1) -> RegressionTree:
    """Greedy CART regression tree; leaves predict the mean of their rows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("tree_fit needs x (rows, p) and matching y")
    if min_leaf < 1 or x.shape[0] < min_leaf:
        raise ValueError("need at least min_leaf rows")

    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []
    counts: List[int] = []

    def build(rows: np.ndarray, depth: int) -> int:
        node = len(feature)
        ysub = y[rows]
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(ysub.mean()))
        counts.append(int(rows.size))
        if depth >= max_depth or rows.size < 2 * min_leaf or np.all(ysub == ysub[0]):
            return node
        split = _best_split(x[rows], ysub, min_leaf)
        if split is None:
            return node
        _, f, thr = split
        go_left = x[rows, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = build(rows[go_left], depth + 1)
        right[node] = build(rows[~go_left], depth + 1)
        return node

    build(np.arange(x.shape[0]), 0)
    return RegressionTree(
        np.array(feature, dtype=np.int64), np.array(threshold),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(value), np.array(counts, dtype=np.int64),
    )


def tree_predict(tree: RegressionTree, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        node = 0
        while tree.feature[node] >= 0:
            if x[i, tree.feature[node]] <= tree.threshold[node]:
                node = tree.left[node]
            else:
                node = tree.right[node]
        out[i] = tree.value[node]
    return out


# ---------------------------------------------------------------------------
# Bagged forest
# ---------------------------------------------------------------------------

@dataclass
class Forest:
    trees: List[RegressionTree]
    features: List[np.ndarray]  # per-tree feature subset (column indices)
    seed: int


def forest_fit(
    x, y, n_trees: int = 20, seed: int = 0,
    max_depth: int = 10, min_leaf: int = 2,
    feature_frac: float = 1.0, bootstrap: bool = True,
) -> Forest:
    """Bagging with per-tree feature subsampling; prediction is the member
    mean.  Deterministic for a fixed seed."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if not 0.0 < feature_frac <= 1.0:
        raise ValueError("feature_frac must be in (0, 1]")
    rows, p = x.shape
    n_feats = max(1, round(feature_frac * p))
    trees: List[RegressionTree] = []
    feats: List[np.ndarray] = []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        bag = rng.integers(0, rows, size=rows) if bootstrap else np.arange(rows)
        cols = (np.sort(rng.choice(p, size=n_feats, replace=False))
                if n_feats < p else np.arange(p))
        trees.append(tree_fit(x[bag][:, cols], y[bag], max_depth, min_leaf))
        feats.append(cols.astype(np.int64))
    return Forest(trees, feats, seed)


def forest_predict(forest: Forest, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros(x.shape[0])
    for tree, cols in zip(forest.trees, forest.features):
        acc += tree_predict(tree, x[:, cols])
    return acc / len(forest.trees)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpModel:
    w1: np.ndarray  # (hidden, p)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (1, hidden)
    b2: np.ndarray  # (1,)
    target_mean: float = 0.0
    target_std: float = 1.0

    def param_names(self) -> List[str]:
        return ["w1", "b1", "w2", "b2"]

    def param_list(self) -> List[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def mlp_init(p: int, hidden: int = 64, seed: int = 0) -> MlpModel:
    rng = np.random.default_rng(seed)
    k1 = 1.0 / math.sqrt(p)
    k2 = 1.0 / math.sqrt(hidden)
    return MlpModel(
        rng.uniform(-k1, k1, size=(hidden, p)), np.zeros(hidden),
        rng.uniform(-k2, k2, size=(1, hidden)), np.zeros(1),
    )


def mlp_forward(model: MlpModel, x: np.ndarray) -> Tuple[np.ndarray, dict]:
    x = np.asarray(x, dtype=np.float64)
    a1 = x @ model.w1.T + model.b1
    h = np.tanh(a1)
    pred = h @ model.w2.ravel() + model.b2[0]
    return pred, {"x": x, "h": h, "pred": pred}


def mlp_backward(model: MlpModel, y: np.ndarray, cache: dict) -> dict:
    """Gradients of batch-mean MSE for the one-hidden-layer network."""
    pred = cache["pred"]
    h = cache["h"]
    x = cache["x"]
    b = pred.shape[0]
    dpred = 2.0 * (pred - np.asarray(y, dtype=np.float64)) / b
    d_w2 = (dpred @ h)[None, :]
    d_b2 = np.array([dpred.sum()])
    dh = np.outer(dpred, model.w2.ravel())
    da1 = dh * (1.0 - h * h)
    d_w1 = da1.T @ x
    d_b1 = da1.sum(axis=0)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


def mlp_fit(x, y, cfg: TrainConfig, hidden: int = 64):
    """Train the MLP with the same optimizer machinery as the LSTM; targets are
    standardized internally.  Returns (model, per-epoch loss history)."""
    x = np.asarray(x, dtype=np.float64)
    y_raw = np.asarray(y, dtype=np.float64)
    t_mean = float(y_raw.mean())
    t_std = float(y_raw.std())
    if t_std == 0.0:
        t_std = 1.0
    y_s = (y_raw - t_mean) / t_std

    model = mlp_init(x.shape[1], hidden=hidden, seed=cfg.seed)
    model.target_mean = t_mean
    model.target_std = t_std
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = model.param_list()
    names = model.param_names()
    s = x.shape[0]
    history: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(s)
        total = 0.0
        for start in range(0, s, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred, cache = mlp_forward(model, x[idx])
            loss = mse_loss(pred, y_s[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss is not finite at epoch {epoch}, batch offset {start}"
                )
            total += loss * idx.size
            grads = mlp_backward(model, y_s[idx], cache)
            glist = clip_global_norm([grads[k] for k in names], cfg.grad_clip_norm)
            opt.step(params, glist)
        history.append(total / s)
    return model, history


def mlp_predict(model: MlpModel, x) -> np.ndarray:
    pred, _ = mlp_forward(model, x)
    return pred * model.target_std + model.target_mean


# ---------------------------------------------------------------------------
# Checkpointing (same container as the LSTM, tagged by model kind)
# ---------------------------------------------------------------------------

def save_baseline(path, model) -> None:
    if isinstance(model, LinearModel):
        binio.save_checkpoint(path, "linreg", {"ridge_lambda": model.ridge_lambda},
                              {"weights": model.weights,
                               "intercept": np.array([model.intercept])})
    elif isinstance(model, RegressionTree):
        binio.save_checkpoint(path, "tree", {}, _tree_tensors(model, ""))
    elif isinstance(model, Forest):
        tensors = {}
        for i, (tree, cols) in enumerate(zip(model.trees, model.features)):
            tensors.update(_tree_tensors(tree, f"tree{i}_"))
            tensors[f"tree{i}_cols"] = cols.astype(np.float64)
        binio.save_checkpoint(path, "forest",
                              {"n_trees": len(model.trees), "seed": model.seed}, tensors)
    elif isinstance(model, MlpModel):
        binio.save_checkpoint(path, "mlp",
                              {"target_mean": model.target_mean,
                               "target_std": model.target_std},
                              dict(zip(model.param_names(), model.param_list())))
    else:
        raise TypeError(f"cannot checkpoint model of type {type(model).__name__}")


def _tree_tensors(tree: RegressionTree, prefix: str) -> dict:
    return {
        f"{prefix}feature": tree.feature.astype(np.float64),
        f"{prefix}threshold": tree.threshold,
        f"{prefix}left": tree.left.astype(np.float64),
        f"{prefix}right": tree.right.astype(np.float64),
        f"{prefix}value": tree.value,
        f"{prefix}n_samples": tree.n_samples.astype(np.float64),
    }


def _tree_from_tensors(tensors: dict, prefix: str) -> RegressionTree:
    return RegressionTree(
        tensors[f"{prefix}feature"].astype(np.int64),
        tensors[f"{prefix}threshold"],
        tensors[f"{prefix}left"].astype(np.int64),
        tensors[f"{prefix}right"].astype(np.int64),
        tensors[f"{prefix}value"],
        tensors[f"{prefix}n_samples"].astype(np.int64),
    )


def load_baseline(path):
    kind, config, tensors = binio.load_checkpoint(path)
    if kind == "linreg":
        return LinearModel(tensors["weights"], float(tensors["intercept"][0]),
                           config["ridge_lambda"])
    if kind == "tree":
        return _tree_from_tensors(tensors, "")
    if kind == "forest":
        trees = [_tree_from_tensors(tensors, f"tree{i}_") for i in range(config["n_trees"])]
        cols = [tensors[f"tree{i}_cols"].astype(np.int64) for i in range(config["n_trees"])]
        return Forest(trees, cols, config["seed"])
    if kind == "mlp":
        model = MlpModel(tensors["w1"], tensors["b1"], tensors["w2"], tensors["b2"],
                         config["target_mean"], config["target_std"])
        return model
    raise ValueError(f"{path}: unknown model kind {kind!r}")
