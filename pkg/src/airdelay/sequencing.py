"""Sliding-window sequence construction: turn per-day labeled rows into the
3-D supervised tensor, split chronologically within each day, and z-score
using statistics from the training windows only."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .fusion import LabeledData, LabeledRow

MAGIC = b"ADSQ"
VERSION = 1


@dataclass
class SequenceDataset:
    x: np.ndarray  # (S, N, M) float64
    y: np.ndarray  # (S,) float64, raw minutes
    meta: dict = field(default_factory=dict)

    @property
    def n_sequences(self) -> int:
        return int(self.x.shape[0])


def slice_day(day_rows: Sequence[LabeledRow], n: int) -> List[Tuple[np.ndarray, float]]:
    """All contiguous n-row windows of one day, each labeled with the target of
    its last row; windows whose last row has no target are dropped.  Days
    shorter than n yield an empty list."""
    if n < 1:
        raise ValueError("window length must be >= 1")
    rows = list(day_rows)
    if len(rows) < n:
        return []
    mat = np.stack([r.features for r in rows])
    out = []
    for last in range(n - 1, len(rows)):
        row = rows[last]
        if not row.target_available:
            continue
        out.append((mat[last - n + 1:last + 1].copy(), float(row.target_delay_min)))
    return out


def _day_windows(
    x: np.ndarray, avail: np.ndarray, y: np.ndarray, ts: np.ndarray, n: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized form of slice_day over a day matrix; returns (windows, targets,
    last-row timestamps)."""
    length, m = x.shape
    if length < n:
        return np.zeros((0, n, m)), np.zeros(0), np.zeros(0, dtype=np.int64)
    last = np.arange(n - 1, length)
    keep = last[avail[last]]
    if keep.size == 0:
        return np.zeros((0, n, m)), np.zeros(0), np.zeros(0, dtype=np.int64)
    idx = keep[:, None] + np.arange(-n + 1, 1)[None, :]
    return x[idx], y[keep], ts[keep]


def build_dataset(
    days: Sequence[Sequence[LabeledRow]],
    n: int,
    train_frac: float = 0.8,
) -> Tuple[SequenceDataset, SequenceDataset]:
    """Slice every day, send the chronologically first ceil(train_frac * W)
    windows of each day to the training split, and z-score features using
    training-window statistics.  Days yielding no window are skipped and noted
    in the metadata."""
    if not days:
        raise ValueError("no day frames given")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")

    train_parts, test_parts = [], []
    skipped: List[int] = []
    for di, day_rows in enumerate(days):
        rows = list(day_rows)
        if not rows:
            skipped.append(di)
            continue
        x = np.stack([r.features for r in rows])
        avail = np.array([r.target_available for r in rows], dtype=bool)
        y = np.array([r.target_delay_min for r in rows], dtype=np.float64)
        ts = np.array([r.ts for r in rows], dtype=np.int64)
        wx, wy, wts = _day_windows(x, avail, y, ts, n)
        if wx.shape[0] == 0:
            skipped.append(di)
            continue
        k = math.ceil(train_frac * wx.shape[0])
        k = min(k, wx.shape[0])
        train_parts.append((di, wx[:k], wy[:k], wts[:k]))
        test_parts.append((di, wx[k:], wy[k:], wts[k:]))

    if not train_parts:
        raise ValueError("no day produced any window")

    def assemble(parts):
        xs = np.concatenate([p[1] for p in parts]) if parts else np.zeros((0, n, 0))
        ys = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
        tss = np.concatenate([p[3] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
        boundaries = []
        pos = 0
        for di, wx, _, _ in parts:
            boundaries.append([di, pos, pos + wx.shape[0]])
            pos += wx.shape[0]
        return xs, ys, tss, boundaries

    train_x, train_y, train_ts, train_bounds = assemble(train_parts)
    test_x, test_y, test_ts, test_bounds = assemble(test_parts)

    m = train_x.shape[2]
    flat = train_x.reshape(-1, m)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    train_x = (train_x - mean) / std
    if test_x.size:
        test_x = (test_x - mean) / std

    t_mean = float(train_y.mean()) if train_y.size else 0.0
    t_std = float(train_y.std()) if train_y.size else 1.0
    if t_std == 0.0:
        t_std = 1.0

    def meta_for(bounds, tss, split):
        return {
            "n": n,
            "m": m,
            "split": split,
            "train_frac": train_frac,
            "day_boundaries": bounds,
            "skipped_days": skipped,
            "feature_mean": mean.tolist(),
            "feature_std": std.tolist(),
            "target_mean": t_mean,
            "target_std": t_std,
            "last_row_ts": [int(t) for t in tss],
        }

    train = SequenceDataset(train_x, train_y, meta_for(train_bounds, train_ts, "train"))
    test = SequenceDataset(test_x, test_y, meta_for(test_bounds, test_ts, "test"))
    return train, test


def shuffle_sequences(ds: SequenceDataset, seed: int) -> SequenceDataset:
    """Deterministically permute (x, y) pairs; row order inside each sequence
    is untouched.  Day boundaries no longer apply afterwards."""
    perm = np.random.default_rng(seed).permutation(ds.n_sequences)
    meta = dict(ds.meta)
    meta["shuffle_seed"] = int(seed)
    meta.pop("day_boundaries", None)
    if "last_row_ts" in meta:
        ts = meta["last_row_ts"]
        meta["last_row_ts"] = [ts[i] for i in perm]
    return SequenceDataset(ds.x[perm], ds.y[perm], meta)


def labeled_to_days(data: LabeledData, mode: str = "st") -> List[List[LabeledRow]]:
    """Group the labeled table into UTC-day frames, restricted to the columns
    of the requested feature mode."""
    cols = data.column_indices(mode)
    x = data.x[:, cols]
    day_keys = data.timestamps // 86400
    days: List[List[LabeledRow]] = []
    if day_keys.size == 0:
        return days
    boundaries = np.flatnonzero(np.diff(day_keys)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [day_keys.size]])
    for s, e in zip(starts, ends):
        day = [
            LabeledRow(
                int(data.timestamps[i]), x[i],
                bool(data.target_available[i]),
                float(data.target[i]) if data.target_available[i] else 0.0,
            )
            for i in range(s, e)
        ]
        days.append(day)
    return days


def save_dataset(path, ds: SequenceDataset) -> None:
    """Write the documented flat binary container: header, row-major x, y, then
    a JSON metadata block.  Little-endian 64-bit floats throughout."""
    s, n, m = ds.x.shape
    meta_bytes = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQQ", VERSION, s, n, m))
        fh.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.y, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)


def load_dataset(path) -> SequenceDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a sequence dataset (bad magic {magic!r})")
        version, s, n, m = struct.unpack("<IQQQ", fh.read(28))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        x = np.frombuffer(fh.read(8 * s * n * m), dtype="<f8").reshape(s, n, m).copy()
        y = np.frombuffer(fh.read(8 * s), dtype="<f8").copy()
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
    return SequenceDataset(x.astype(np.float64), y.astype(np.float64), meta)
