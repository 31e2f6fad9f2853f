"""From-scratch stacked two-layer LSTM regressor with inter-layer dropout and
a fully connected head over the concatenated layer-2 outputs, trained by
backpropagation through time on mean squared error.

Gate layout: the four gate weight matrices of a layer are stored stacked as
``w_all`` with row blocks [forget, input, output, candidate] (the three
sigmoid gates first, so one sigmoid call covers them); each block has shape
(hidden, hidden + input) and multiplies the concatenation ``[h_prev, x_t]``
(hidden state first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import binio
from .optim import clip_global_norm, make_optimizer


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


def sigmoid(z: np.ndarray) -> np.ndarray:
    # exp overflow saturates to 0.0, which is the correctly rounded value
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


class LstmLayerParams:
    """Parameters of one LSTM layer; per-gate matrices are views into the
    stacked storage so optimizer updates stay in sync."""

    def __init__(self, w_all: np.ndarray, b_all: np.ndarray, hidden: int, input_size: int):
        if w_all.shape != (4 * hidden, hidden + input_size):
            raise ValueError(f"w_all shape {w_all.shape} inconsistent with "
                             f"hidden={hidden}, input={input_size}")
        if b_all.shape != (4 * hidden,):
            raise ValueError(f"b_all shape {b_all.shape} inconsistent with hidden={hidden}")
        self.w_all = w_all
        self.b_all = b_all
        self.hidden = hidden
        self.input_size = input_size

    # stacked block order: forget, input, output, candidate
    def _block(self, k: int) -> slice:
        return slice(k * self.hidden, (k + 1) * self.hidden)

    @property
    def w_f(self) -> np.ndarray:
        return self.w_all[self._block(0)]

    @property
    def w_i(self) -> np.ndarray:
        return self.w_all[self._block(1)]

    @property
    def w_o(self) -> np.ndarray:
        return self.w_all[self._block(2)]

    @property
    def w_c(self) -> np.ndarray:
        return self.w_all[self._block(3)]

    @property
    def b_f(self) -> np.ndarray:
        return self.b_all[self._block(0)]

    @property
    def b_i(self) -> np.ndarray:
        return self.b_all[self._block(1)]

    @property
    def b_o(self) -> np.ndarray:
        return self.b_all[self._block(2)]

    @property
    def b_c(self) -> np.ndarray:
        return self.b_all[self._block(3)]


def init_layer(rng: np.random.Generator, hidden: int, input_size: int) -> LstmLayerParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; forget-gate bias 1."""
    fan_in = hidden + input_size
    k = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-k, k, size=(4 * hidden, fan_in))
    b = np.zeros(4 * hidden)
    b[:hidden] = 1.0
    return LstmLayerParams(w, b, hidden, input_size)


@dataclass
class StackedLstmModel:
    layer1: LstmLayerParams
    layer2: LstmLayerParams
    fc_w: np.ndarray  # (1, n * hidden2)
    fc_b: np.ndarray  # (1,)
    n: int
    m: int
    dropout_rate: float = 0.2
    target_mean: float = 0.0
    target_std: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.fc_w.shape != (1, self.n * self.layer2.hidden):
            raise ValueError("fc input width must equal n * hidden2")

    def param_names(self) -> List[str]:
        return ["l1_w", "l1_b", "l2_w", "l2_b", "fc_w", "fc_b"]

    def param_list(self) -> List[np.ndarray]:
        return [self.layer1.w_all, self.layer1.b_all,
                self.layer2.w_all, self.layer2.b_all,
                self.fc_w, self.fc_b]


def new_model(n: int, m: int, hidden1: int = 64, hidden2: int = 64,
              dropout_rate: float = 0.2, seed: int = 0) -> StackedLstmModel:
    rng = np.random.default_rng(seed)
    layer1 = init_layer(rng, hidden1, m)
    layer2 = init_layer(rng, hidden2, hidden1)
    k = 1.0 / math.sqrt(n * hidden2)
    fc_w = rng.uniform(-k, k, size=(1, n * hidden2))
    return StackedLstmModel(layer1, layer2, fc_w, np.zeros(1), n=n, m=m,
                            dropout_rate=dropout_rate)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    grad_clip_norm: float = 5.0
    seed: int = 0
    dropout_rate: Optional[float] = None  # None keeps the model's rate

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


def lstm_cell_forward(x_t, h_prev, c_prev, p: LstmLayerParams):
    """One LSTM cell step.  Accepts vectors or (batch, dim) arrays; returns
    (h_t, c_t, cache) with the gate activations needed by the backward pass."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    for name, arr in (("x_t", x_t), ("h_prev", h_prev), ("c_prev", c_prev)):
        _require_finite(name, arr)
    hx = np.concatenate([h_prev, x_t], axis=-1)
    f = sigmoid(hx @ p.w_f.T + p.b_f)
    i = sigmoid(hx @ p.w_i.T + p.b_i)
    g = np.tanh(hx @ p.w_c.T + p.b_c)
    c_t = f * c_prev + i * g
    o = sigmoid(hx @ p.w_o.T + p.b_o)
    tc = np.tanh(c_t)
    h_t = o * tc
    cache = {"hx": hx, "f": f, "i": i, "g": g, "o": o,
             "c_prev": c_prev, "c": c_t, "tanh_c": tc}
    return h_t, c_t, cache


class Workspace:
    """Reusable buffer pool; avoids first-touch page faults in the training
    loop, where tensor shapes repeat batch after batch."""

    def __init__(self):
        self._bufs: Dict[tuple, np.ndarray] = {}

    def get(self, key: str, shape: tuple) -> np.ndarray:
        buf = self._bufs.get((key, shape))
        if buf is None:
            buf = np.empty(shape)
            self._bufs[(key, shape)] = buf
        return buf


def _layer_forward(
    p: LstmLayerParams, xt: np.ndarray,
    ws: Optional[Workspace] = None, tag: str = "",
) -> Tuple[np.ndarray, dict]:
    """Unroll one layer from zero initial state.

    Step-major layout throughout: ``xt`` is (steps, batch, input) and every
    cached tensor is (steps, batch, hidden), so each per-step slice is
    contiguous and the transcendental ufuncs stay on their SIMD path.  With a
    workspace, cache tensors are pooled: they stay valid only until the next
    call that reuses the same workspace and tag.
    """
    n, b, isz = xt.shape
    h_dim = p.hidden

    def buf(name: str, shape: tuple) -> np.ndarray:
        return np.empty(shape) if ws is None else ws.get(f"{tag}.{name}", shape)

    w_h_sig_t = np.ascontiguousarray(p.w_all[:3 * h_dim, :h_dim].T)
    w_h_g_t = np.ascontiguousarray(p.w_all[3 * h_dim:, :h_dim].T)
    w_x_sig_t = np.ascontiguousarray(p.w_all[:3 * h_dim, h_dim:].T)
    w_x_g_t = np.ascontiguousarray(p.w_all[3 * h_dim:, h_dim:].T)

    flat_x = xt.reshape(n * b, isz)
    gx_sig = np.matmul(flat_x, w_x_sig_t, out=buf("gx_sig", (n * b, 3 * h_dim)))
    gx_sig += p.b_all[:3 * h_dim]
    gx_sig = gx_sig.reshape(n, b, 3 * h_dim)
    gx_g = np.matmul(flat_x, w_x_g_t, out=buf("gx_g", (n * b, h_dim)))
    gx_g += p.b_all[3 * h_dim:]
    gx_g = gx_g.reshape(n, b, h_dim)

    fio_a = buf("fio", (n, b, 3 * h_dim))
    g_a = buf("g", (n, b, h_dim))
    c_a = buf("c", (n, b, h_dim))
    tc_a = buf("tc", (n, b, h_dim))
    hprev_a = buf("hprev", (n, b, h_dim))
    hout = buf("hout", (n, b, h_dim))
    pre_s = buf("pre_s", (b, 3 * h_dim))
    pre_g = buf("pre_g", (b, h_dim))
    ig = buf("ig", (b, h_dim))

    h = np.zeros((b, h_dim))
    c = np.zeros((b, h_dim))
    with np.errstate(over="ignore"):
        for t in range(n):
            np.matmul(h, w_h_sig_t, out=pre_s)
            pre_s += gx_sig[t]
            fio = fio_a[t]
            np.negative(pre_s, out=fio)
            np.exp(fio, out=fio)
            fio += 1.0
            np.reciprocal(fio, out=fio)
            np.matmul(h, w_h_g_t, out=pre_g)
            pre_g += gx_g[t]
            g = g_a[t]
            np.tanh(pre_g, out=g)
            f = fio[:, :h_dim]
            i = fio[:, h_dim:2 * h_dim]
            o = fio[:, 2 * h_dim:]
            hprev_a[t] = h
            c_new = c_a[t]
            np.multiply(f, c, out=c_new)
            np.multiply(i, g, out=ig)
            c_new += ig
            tc = tc_a[t]
            np.tanh(c_new, out=tc)
            h_new = hout[t]
            np.multiply(o, tc, out=h_new)
            h = h_new
            c = c_new
    cache = {"xt": xt, "fio": fio_a, "g": g_a,
             "c": c_a, "tanh_c": tc_a, "h_prev": hprev_a}
    return hout, cache


def _layer_backward(
    p: LstmLayerParams, cache: dict, dh_out: np.ndarray,
    ws: Optional[Workspace] = None, tag: str = "",
):
    """BPTT through one layer; all tensors step-major.  Returns
    (d_input (n, b, input), d_w_all, d_b_all)."""
    xt = cache["xt"]
    n, b, isz = xt.shape
    h_dim = p.hidden

    def buf(name: str, shape: tuple) -> np.ndarray:
        return np.empty(shape) if ws is None else ws.get(f"{tag}.{name}", shape)

    w_h_t = np.ascontiguousarray(p.w_all[:, :h_dim])
    w_x = p.w_all[:, h_dim:]
    fio_a, g_a = cache["fio"], cache["g"]
    c_a, tc_a = cache["c"], cache["tanh_c"]

    dpre_all = buf("dpre", (n, b, 4 * h_dim))
    dh = buf("dh", (b, h_dim))
    dc = buf("dc", (b, h_dim))
    scratch = buf("scratch", (b, h_dim))
    dh.fill(0.0)
    dc.fill(0.0)
    for t in range(n - 1, -1, -1):
        dh += dh_out[t]
        tc = tc_a[t]
        fio = fio_a[t]
        f = fio[:, :h_dim]
        i = fio[:, h_dim:2 * h_dim]
        o = fio[:, 2 * h_dim:]
        g = g_a[t]
        dpre = dpre_all[t]
        d_o = dpre[:, 2 * h_dim:3 * h_dim]
        np.multiply(dh, tc, out=d_o)       # dL/do
        # dc += dh * o * (1 - tc^2)
        np.multiply(tc, tc, out=scratch)
        np.subtract(1.0, scratch, out=scratch)
        scratch *= o
        scratch *= dh
        dc += scratch
        d_f = dpre[:, :h_dim]
        if t > 0:
            np.multiply(dc, c_a[t - 1], out=d_f)
        else:
            d_f.fill(0.0)
        d_i = dpre[:, h_dim:2 * h_dim]
        np.multiply(dc, g, out=d_i)
        d_g = dpre[:, 3 * h_dim:]
        np.multiply(dc, i, out=d_g)
        # through the activations: sigma'(z) = s(1-s), tanh'(z) = 1-g^2
        sig_grad = dpre[:, :3 * h_dim]
        sig_grad *= fio
        tmp = buf("one_minus", (b, 3 * h_dim))
        np.subtract(1.0, fio, out=tmp)
        sig_grad *= tmp
        np.multiply(g, g, out=scratch)
        np.subtract(1.0, scratch, out=scratch)
        d_g *= scratch
        dc *= f
        np.matmul(dpre, w_h_t, out=dh)
    flat = dpre_all.reshape(n * b, 4 * h_dim)
    hx = buf("hx", (n, b, h_dim + isz))
    hx[:, :, :h_dim] = cache["h_prev"]
    hx[:, :, h_dim:] = xt
    hx_flat = hx.reshape(n * b, h_dim + isz)
    d_w_all = flat.T @ hx_flat
    d_b_all = flat.sum(axis=0)
    d_x = np.matmul(flat, w_x, out=buf("dx", (n * b, isz))).reshape(n, b, isz)
    return d_x, d_w_all, d_b_all


def forward_batch(
    model: StackedLstmModel,
    x: np.ndarray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    ws: Optional[Workspace] = None,
) -> Tuple[np.ndarray, dict]:
    """Full forward pass over a (batch, n, m) tensor; returns standardized
    predictions and the caches for the backward pass.

    With a workspace, the returned caches alias pooled buffers and stay valid
    only until the next forward call using the same workspace.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != model.n or x.shape[2] != model.m:
        raise ValueError(f"sequence batch shape {x.shape} does not match "
                         f"model (n={model.n}, m={model.m})")
    _require_finite("sequence", x)
    b, n, m = x.shape
    if ws is None:
        xt = np.ascontiguousarray(x.transpose(1, 0, 2))  # step-major
    else:
        xt = ws.get("xt", (n, b, m))
        xt[...] = x.transpose(1, 0, 2)
    h1, cache1 = _layer_forward(model.layer1, xt, ws, "l1")
    mask = None
    h1d = h1
    if training and model.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training forward with dropout requires an rng")
        keep = 1.0 - model.dropout_rate
        mask = (rng.random(h1.shape) < keep).astype(np.float64) / keep
        if ws is None:
            h1d = h1 * mask
        else:
            h1d = np.multiply(h1, mask, out=ws.get("h1d", h1.shape))
    h2, cache2 = _layer_forward(model.layer2, h1d, ws, "l2")
    h2_dim = model.layer2.hidden
    if ws is None:
        z = np.ascontiguousarray(h2.transpose(1, 0, 2)).reshape(b, n * h2_dim)
    else:
        z = ws.get("z", (b, n * h2_dim))
        z.reshape(b, n, h2_dim)[...] = h2.transpose(1, 0, 2)
    pred = z @ model.fc_w.ravel() + model.fc_b[0]
    caches = {"cache1": cache1, "cache2": cache2, "mask": mask,
              "z": z, "pred": pred}
    return pred, caches


def forward(
    model: StackedLstmModel,
    sequence: np.ndarray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, dict]:
    """Single-sequence forward pass; returns (standardized prediction, caches)."""
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.ndim != 2:
        raise ValueError("sequence must be a (n, m) matrix")
    pred, caches = forward_batch(model, sequence[None], training=training, rng=rng)
    return float(pred[0]), caches


def mse_loss(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("mse_loss needs equal-length nonempty vectors")
    d = pred - truth
    return float(np.mean(d * d))


def backward(
    model: StackedLstmModel, batch, caches: dict,
    ws: Optional[Workspace] = None,
) -> Dict[str, np.ndarray]:
    """Gradients of the batch-mean MSE with respect to every parameter.

    ``batch`` is (x, y) or just the target vector; the forward caches must
    come from the matching forward_batch call.
    """
    if caches is None:
        raise RuntimeError("backward requires the caches of a prior forward pass")
    y = batch[1] if isinstance(batch, tuple) else batch
    y = np.asarray(y, dtype=np.float64)
    pred = caches["pred"]
    b = pred.shape[0]
    if y.shape != pred.shape:
        raise ValueError("target vector does not match cached predictions")

    dpred = 2.0 * (pred - y) / b
    z = caches["z"]
    d_fc_w = (dpred @ z)[None, :]
    d_fc_b = np.array([dpred.sum()])
    h2_dim = model.layer2.hidden
    dz = np.outer(dpred, model.fc_w.ravel()).reshape(b, model.n, h2_dim)
    if ws is None:
        dh2 = np.ascontiguousarray(dz.transpose(1, 0, 2))
    else:
        dh2 = ws.get("dh2", (model.n, b, h2_dim))
        dh2[...] = dz.transpose(1, 0, 2)

    dh1d, d_w2, d_b2 = _layer_backward(model.layer2, caches["cache2"], dh2, ws, "l2b")
    if caches["mask"] is not None:
        dh1d *= caches["mask"]
    _, d_w1, d_b1 = _layer_backward(model.layer1, caches["cache1"], dh1d, ws, "l1b")
    return {"l1_w": d_w1, "l1_b": d_b1, "l2_w": d_w2, "l2_b": d_b2,
            "fc_w": d_fc_w, "fc_b": d_fc_b}


def train(model: StackedLstmModel, train_ds, cfg: TrainConfig):
    """Train on a SequenceDataset; deterministic for a fixed seed.  Targets are
    standardized with training statistics and de-standardized by predict().

    Returns (model, per-epoch training loss history in standardized units).
    """
    x = np.asarray(train_ds.x, dtype=np.float64)
    y_raw = np.asarray(train_ds.y, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != model.n or x.shape[2] != model.m:
        raise ValueError(f"dataset shape {x.shape} does not match model "
                         f"(n={model.n}, m={model.m})")
    meta = getattr(train_ds, "meta", {}) or {}
    t_mean = float(meta.get("target_mean", y_raw.mean()))
    t_std = float(meta.get("target_std", y_raw.std() or 1.0))
    if t_std == 0.0:
        t_std = 1.0
    model.target_mean = t_mean
    model.target_std = t_std
    y = (y_raw - t_mean) / t_std

    if cfg.dropout_rate is not None:
        model.dropout_rate = cfg.dropout_rate

    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = model.param_list()
    names = model.param_names()
    s = x.shape[0]
    ws = Workspace()
    history: List[float] = []
    # the unrolled steps are tiny matmuls; BLAS thread fan-out only hurts here
    with threadpool_limits(limits=1):
        for epoch in range(cfg.epochs):
            order = rng.permutation(s)
            total = 0.0
            for start in range(0, s, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb = x[idx]
                yb = y[idx]
                pred, caches = forward_batch(model, xb, training=True, rng=rng, ws=ws)
                loss = mse_loss(pred, yb)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss is not finite at epoch {epoch}, batch offset {start}"
                    )
                total += loss * idx.size
                grads = backward(model, yb, caches, ws=ws)
                glist = clip_global_norm([grads[k] for k in names], cfg.grad_clip_norm)
                opt.step(params, glist)
            history.append(total / s)
    return model, history


def predict(model: StackedLstmModel, sequences: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference (no dropout) over (s, n, m) sequences; output de-standardized
    into minutes."""
    x = np.asarray(sequences, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != model.n or x.shape[2] != model.m:
        raise ValueError(f"sequence shape {x.shape} does not match model "
                         f"(n={model.n}, m={model.m})")
    preds = np.empty(x.shape[0])
    ws = Workspace()
    with threadpool_limits(limits=1):
        for start in range(0, x.shape[0], batch_size):
            chunk = x[start:start + batch_size]
            pred, _ = forward_batch(model, chunk, training=False, ws=ws)
            preds[start:start + chunk.shape[0]] = pred
    return preds * model.target_std + model.target_mean


def save_model(path, model: StackedLstmModel) -> None:
    config = {
        "n": model.n, "m": model.m,
        "hidden1": model.layer1.hidden, "hidden2": model.layer2.hidden,
        "dropout_rate": model.dropout_rate,
        "target_mean": model.target_mean, "target_std": model.target_std,
    }
    tensors = dict(zip(model.param_names(), model.param_list()))
    binio.save_checkpoint(path, "lstm", config, tensors)


def load_model(path) -> StackedLstmModel:
    kind, config, tensors = binio.load_checkpoint(path)
    if kind != "lstm":
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected 'lstm'")
    layer1 = LstmLayerParams(tensors["l1_w"], tensors["l1_b"],
                             config["hidden1"], config["m"])
    layer2 = LstmLayerParams(tensors["l2_w"], tensors["l2_b"],
                             config["hidden2"], config["hidden1"])
    return StackedLstmModel(
        layer1, layer2, tensors["fc_w"], tensors["fc_b"],
        n=config["n"], m=config["m"], dropout_rate=config["dropout_rate"],
        target_mean=config["target_mean"], target_std=config["target_std"],
    )
