"""Feature engineering: missing/correlation-based selection, ground and
airspace congestion indices on 10-minute bins, and the hybrid one-hot /
frequency categorical encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .geo import (
    TERMINAL_ALT_BAND_FT,
    TERMINAL_MAX_DIST_KM,
    GeoPoint,
    SectorGrid,
)
from .ingest import FlightRecord, TrajectoryPoint

BIN_SECONDS = 600

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class EncoderStateError(RuntimeError):
    """A categorical encoder was applied before being fitted."""


@dataclass
class ColumnMeta:
    kind: str
    missing_rate: float
    cardinality: Optional[int] = None
    encoding: str = "raw"


class FeatureFrame:
    """A time-ordered table of named feature columns.

    Numeric columns are float64 arrays with NaN marking missing values;
    categorical columns are lists of ``Optional[str]``.  Column order is the
    declaration order, which feature selection uses as its tie-break.
    """

    def __init__(self, timestamps: Sequence[int]):
        ts = np.asarray(timestamps, dtype=np.int64)
        if ts.size > 1 and np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be nondecreasing")
        self.timestamps = ts
        self.columns: Dict[str, Union[np.ndarray, list]] = {}
        self.column_meta: Dict[str, ColumnMeta] = {}

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def names(self) -> List[str]:
        return list(self.columns.keys())

    def add_numeric(self, name: str, values, encoding: str = "raw") -> None:
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (len(self),):
            raise ValueError(f"column {name}: length {arr.shape} != {len(self)}")
        if name in self.columns:
            raise ValueError(f"duplicate column: {name}")
        self.columns[name] = arr
        missing = float(np.isnan(arr).mean()) if len(self) else 0.0
        self.column_meta[name] = ColumnMeta(NUMERIC, missing, encoding=encoding)

    def add_categorical(self, name: str, values: Sequence[Optional[str]]) -> None:
        vals = list(values)
        if len(vals) != len(self):
            raise ValueError(f"column {name}: length {len(vals)} != {len(self)}")
        if name in self.columns:
            raise ValueError(f"duplicate column: {name}")
        self.columns[name] = vals
        n_missing = sum(1 for v in vals if v is None)
        missing = n_missing / len(vals) if vals else 0.0
        card = len({v for v in vals if v is not None})
        self.column_meta[name] = ColumnMeta(CATEGORICAL, missing, cardinality=card)

    def numeric_names(self) -> List[str]:
        return [n for n, m in self.column_meta.items() if m.kind == NUMERIC]

    def categorical_names(self) -> List[str]:
        return [n for n, m in self.column_meta.items() if m.kind == CATEGORICAL]

    def subset(self, names: Iterable[str]) -> "FeatureFrame":
        out = FeatureFrame(self.timestamps)
        for name in names:
            meta = self.column_meta[name]
            if meta.kind == NUMERIC:
                out.add_numeric(name, self.columns[name], encoding=meta.encoding)
            else:
                out.add_categorical(name, self.columns[name])
        return out

    def numeric_matrix(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        names = list(names) if names is not None else self.numeric_names()
        if not names:
            return np.zeros((len(self), 0))
        return np.column_stack([self.columns[n] for n in names])


def pearson_corr(x, y) -> Optional[float]:
    """Pearson r over pairwise-complete observations; None when either side has
    zero variance (or fewer than two complete pairs)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson_corr needs two equal-length vectors of size >= 2")
    ok = ~(np.isnan(x) | np.isnan(y))
    xs, ys = x[ok], y[ok]
    if xs.size < 2:
        return None
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(xc @ yc) / (sx * sy)


@dataclass
class SelectionEntry:
    column: str
    action: str  # kept | dropped
    reason: str
    statistic: Optional[float]

    def to_dict(self) -> dict:
        return {
            "column": self.column,
            "action": self.action,
            "reason": self.reason,
            "statistic": self.statistic,
        }


@dataclass
class SelectionResult:
    frame: FeatureFrame
    report: List[SelectionEntry]


def select_features(
    frame: FeatureFrame,
    missing_thresh: float = 0.8,
    corr_thresh: float = 0.8,
    keep_list: Sequence[str] = (),
) -> SelectionResult:
    """Drop columns whose missing rate exceeds ``missing_thresh`` and, among
    numeric survivors, the later member of every pair with |r| above
    ``corr_thresh``.  ``keep_list`` columns are never dropped; thresholds are
    strict inequalities, which makes the operation idempotent."""
    for t, label in ((missing_thresh, "missing_thresh"), (corr_thresh, "corr_thresh")):
        if not 0.0 < t <= 1.0:
            raise ValueError(f"{label} must be in (0, 1]")
    keep = set(keep_list)
    unknown = keep - set(frame.names)
    if unknown:
        raise ValueError(f"keep_list names unknown column(s): {sorted(unknown)}")

    report: List[SelectionEntry] = []
    survivors: List[str] = []
    for name in frame.names:
        rate = frame.column_meta[name].missing_rate
        if rate > missing_thresh and name not in keep:
            report.append(SelectionEntry(name, "dropped", "missing", rate))
        else:
            survivors.append(name)

    # Greedy in declared order: a column is dropped on its first over-threshold
    # correlation with an already-kept earlier numeric column.
    kept: List[str] = []
    kept_numeric: List[str] = []
    for name in survivors:
        meta = frame.column_meta[name]
        if meta.kind != NUMERIC:
            kept.append(name)
            report.append(SelectionEntry(name, "kept", "keep_list" if name in keep else "", None))
            continue
        drop_stat = None
        if name not in keep:
            col = frame.columns[name]
            for prev in kept_numeric:
                r = pearson_corr(frame.columns[prev], col)
                if r is not None and abs(r) > corr_thresh:
                    drop_stat = r
                    break
        if drop_stat is not None:
            report.append(SelectionEntry(name, "dropped", "correlated", drop_stat))
        else:
            kept.append(name)
            kept_numeric.append(name)
            report.append(SelectionEntry(name, "kept", "keep_list" if name in keep else "", None))

    order = {n: i for i, n in enumerate(frame.names)}
    kept.sort(key=order.__getitem__)
    report.sort(key=lambda e: order[e.column])
    return SelectionResult(frame.subset(kept), report)


# ---------------------------------------------------------------------------
# Congestion indices
# ---------------------------------------------------------------------------

@dataclass
class CongestionSeries:
    """Counts on a contiguous run of 10-minute bins; ``start`` is the first
    bin start (epoch seconds, multiple of the cadence)."""

    start: int
    counts: np.ndarray  # int64, one entry per bin

    cadence: int = BIN_SECONDS

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("congestion counts must be nonnegative")

    def __len__(self) -> int:
        return int(self.counts.size)

    @property
    def bin_starts(self) -> np.ndarray:
        return self.start + self.cadence * np.arange(len(self), dtype=np.int64)

    def count_at(self, ts: int) -> int:
        """Count of the bin containing ``ts``; 0 outside the series range."""
        idx = (int(ts) - self.start) // self.cadence
        if 0 <= idx < len(self):
            return int(self.counts[idx])
        return 0


def bin_of(ts: int) -> int:
    """Start of the 10-minute bin containing ``ts`` (bins aligned to the epoch)."""
    return (int(ts) // BIN_SECONDS) * BIN_SECONDS


def _series_from_bins(bins: np.ndarray, counts_per_bin: np.ndarray) -> CongestionSeries:
    if bins.size == 0:
        return CongestionSeries(0, np.zeros(0, dtype=np.int64))
    start = int(bins.min())
    n = int((bins.max() - start) // BIN_SECONDS) + 1
    counts = np.zeros(n, dtype=np.int64)
    counts[(bins - start) // BIN_SECONDS] = counts_per_bin
    return CongestionSeries(start, counts)


def _event_series(ts: np.ndarray) -> CongestionSeries:
    if ts.size == 0:
        return CongestionSeries(0, np.zeros(0, dtype=np.int64))
    bins = (ts // BIN_SECONDS) * BIN_SECONDS
    uniq, counts = np.unique(bins, return_counts=True)
    return _series_from_bins(uniq, counts)


def ground_event_times(
    flights: Sequence[FlightRecord], airport: str
) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted actual departure / arrival timestamps at ``airport``."""
    dep = np.array(sorted(
        f.actual_dep for f in flights if f.origin == airport and f.actual_dep is not None
    ), dtype=np.int64)
    arr = np.array(sorted(
        f.actual_arr for f in flights if f.dest == airport and f.actual_arr is not None
    ), dtype=np.int64)
    return dep, arr


def ground_congestion(
    flights: Sequence[FlightRecord], airport: str
) -> Tuple[CongestionSeries, CongestionSeries]:
    """Departure and arrival counts per 10-minute bin at an airport."""
    dep, arr = ground_event_times(flights, airport)
    return _event_series(dep), _event_series(arr)


class TrajArrays:
    """Columnar view of a trajectory point list, built once and shared by the
    congestion and fusion stages."""

    def __init__(self, points: Sequence[TrajectoryPoint]):
        n = len(points)
        tails: Dict[str, int] = {}
        tail_idx = np.zeros(n, dtype=np.int64)
        ts = np.zeros(n, dtype=np.int64)
        lat = np.zeros(n)
        lon = np.zeros(n)
        alt = np.full(n, np.nan)
        speed = np.full(n, np.nan)
        for i, p in enumerate(points):
            tail_idx[i] = tails.setdefault(p.tail_id, len(tails))
            ts[i] = p.ts
            lat[i] = p.pos.lat_deg
            lon[i] = p.pos.lon_deg
            if p.alt_ft is not None:
                alt[i] = p.alt_ft
            if p.speed_kt is not None:
                speed[i] = p.speed_kt
        self.tails = list(tails)
        self.tail_idx = tail_idx
        self.ts = ts
        self.lat = lat
        self.lon = lon
        self.alt = alt
        self.speed = speed

    def __len__(self) -> int:
        return int(self.ts.size)


def _as_traj_arrays(traj) -> TrajArrays:
    return traj if isinstance(traj, TrajArrays) else TrajArrays(traj)


def haversine_km_vec(lat_deg, lon_deg, ref: GeoPoint, earth_radius_km: float = 6371.0) -> np.ndarray:
    """Vectorized great-circle distance from each (lat, lon) to ``ref``."""
    phi1 = np.radians(np.asarray(lat_deg, dtype=np.float64))
    phi2 = math.radians(ref.lat_deg)
    dphi = phi2 - phi1
    dpsi = np.radians(ref.lon_deg - np.asarray(lon_deg, dtype=np.float64))
    s = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * math.cos(phi2) * np.sin(dpsi / 2.0) ** 2
    s = np.clip(s, 0.0, 1.0)
    return 2.0 * earth_radius_km * np.arcsin(np.sqrt(s))


@dataclass
class FirstSeenIndex:
    """For each bin (or sector/bin key): the sorted times at which each distinct
    aircraft first qualifies inside that bin.  The full-bin distinct count is the
    array length; the count restricted to events at or before ``t`` is a bisect."""

    by_key: Dict[tuple, np.ndarray] = field(default_factory=dict)

    def count(self, key: tuple) -> int:
        arr = self.by_key.get(key)
        return 0 if arr is None else int(arr.size)

    def count_up_to(self, key: tuple, t: int) -> int:
        arr = self.by_key.get(key)
        if arr is None:
            return 0
        return int(np.searchsorted(arr, t, side="right"))


def _first_seen(tail_idx: np.ndarray, ts: np.ndarray, extra=None) -> FirstSeenIndex:
    """Group qualifying points by (key..., bin) and record each tail's first
    qualifying time per group."""
    if ts.size == 0:
        return FirstSeenIndex()
    bins = (ts // BIN_SECONDS) * BIN_SECONDS
    cols = ([] if extra is None else list(extra)) + [bins, tail_idx, ts]
    order = np.lexsort(tuple(reversed(cols)))
    sorted_cols = [c[order] for c in cols]
    ident = np.ones(ts.size, dtype=bool)
    for c in sorted_cols[:-1]:  # all but ts
        ident[1:] &= c[1:] == c[:-1]
    ident[0] = False
    first_mask = ~ident
    idx = FirstSeenIndex()
    first_rows = np.flatnonzero(first_mask)
    key_cols = sorted_cols[:-2]  # exclude tail_idx and ts
    key_arr = np.stack([c[first_rows] for c in key_cols], axis=1)
    t_first = sorted_cols[-1][first_rows]
    # rows are lexsorted, so equal keys are contiguous
    change = np.ones(first_rows.size, dtype=bool)
    change[1:] = np.any(key_arr[1:] != key_arr[:-1], axis=1)
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], first_rows.size)
    for s, e in zip(starts, ends):
        key = tuple(int(v) for v in key_arr[s])
        idx.by_key[key] = np.sort(t_first[s:e])
    return idx


def terminal_first_seen(
    traj,
    airport: GeoPoint,
    max_dist_km: float = TERMINAL_MAX_DIST_KM,
    alt_band_ft: Tuple[float, float] = TERMINAL_ALT_BAND_FT,
) -> FirstSeenIndex:
    """First qualifying time per (bin, aircraft) inside the terminal airspace
    (strictly closer than ``max_dist_km``, altitude in the closed band)."""
    t = _as_traj_arrays(traj)
    lo, hi = alt_band_ft
    with_alt = ~np.isnan(t.alt)
    band = with_alt & (t.alt >= lo) & (t.alt <= hi)
    if not band.any():
        return FirstSeenIndex()
    dist = haversine_km_vec(t.lat[band], t.lon[band], airport)
    mask = dist < max_dist_km
    sel = np.flatnonzero(band)[mask]
    return _first_seen(t.tail_idx[sel], t.ts[sel])


def terminal_airspace_congestion(
    traj,
    airport: GeoPoint,
    max_dist_km: float = TERMINAL_MAX_DIST_KM,
    alt_band_ft: Tuple[float, float] = TERMINAL_ALT_BAND_FT,
) -> CongestionSeries:
    """Distinct aircraft per 10-minute bin with at least one point inside the
    terminal airspace around ``airport``."""
    idx = terminal_first_seen(traj, airport, max_dist_km, alt_band_ft)
    if not idx.by_key:
        return CongestionSeries(0, np.zeros(0, dtype=np.int64))
    bins = np.array(sorted(k[0] for k in idx.by_key), dtype=np.int64)
    counts = np.array([idx.count((b,)) for b in bins], dtype=np.int64)
    return _series_from_bins(bins, counts)


def enroute_first_seen(traj, grid: SectorGrid) -> FirstSeenIndex:
    """First qualifying time per (sector row, sector col, bin, aircraft) at or
    above the grid floor altitude."""
    t = _as_traj_arrays(traj)
    mask = ~np.isnan(t.alt) & (np.nan_to_num(t.alt, nan=-1.0) >= grid.floor_alt_ft)
    if not mask.any():
        return FirstSeenIndex()
    sel = np.flatnonzero(mask)
    rows = np.floor((t.lat[sel] + 90.0) / grid.cell_lat_deg).astype(np.int64)
    cols = np.floor((t.lon[sel] + 180.0) / grid.cell_lon_deg).astype(np.int64)
    rows = np.minimum(rows, grid.n_rows - 1)
    cols = np.minimum(cols, grid.n_cols - 1)
    return _first_seen(t.tail_idx[sel], t.ts[sel], extra=[rows, cols])


def enroute_congestion(traj, grid: SectorGrid) -> Dict[Tuple[int, int], CongestionSeries]:
    """Per-sector series of distinct aircraft per 10-minute bin, counting only
    points at or above the grid floor altitude."""
    idx = enroute_first_seen(traj, grid)
    per_sector: Dict[Tuple[int, int], Dict[int, int]] = {}
    for (row, col, b), arr in idx.by_key.items():
        per_sector.setdefault((row, col), {})[b] = int(arr.size)
    out: Dict[Tuple[int, int], CongestionSeries] = {}
    for sector, bin_counts in sorted(per_sector.items()):
        bins = np.array(sorted(bin_counts), dtype=np.int64)
        counts = np.array([bin_counts[b] for b in bins], dtype=np.int64)
        out[sector] = _series_from_bins(bins, counts)
    return out


# ---------------------------------------------------------------------------
# Categorical encoding
# ---------------------------------------------------------------------------

UNKNOWN = "__unknown__"


class CategoricalEncoder:
    """Hybrid categorical encoder: one-hot (with an unknown column) for
    low-cardinality columns, occurrence-count frequency codes for
    high-cardinality ones.  Fit on training rows, then reapplied anywhere."""

    def __init__(self, cardinality_thresh: int = 50):
        if cardinality_thresh < 1:
            raise ValueError("cardinality_thresh must be >= 1")
        self.cardinality_thresh = cardinality_thresh
        self.onehot_categories: Dict[str, List[str]] = {}
        self.frequency_maps: Dict[str, Dict[str, int]] = {}
        self.fitted = False

    def fit(self, frame: FeatureFrame, fit_mask=None) -> "CategoricalEncoder":
        if fit_mask is None:
            fit_mask = np.ones(len(frame), dtype=bool)
        fit_mask = np.asarray(fit_mask, dtype=bool)
        self.onehot_categories = {}
        self.frequency_maps = {}
        for name in frame.categorical_names():
            values = frame.columns[name]
            observed = [v for v, keep in zip(values, fit_mask) if keep and v is not None]
            counts: Dict[str, int] = {}
            for v in observed:
                counts[v] = counts.get(v, 0) + 1
            if len(counts) <= self.cardinality_thresh:
                self.onehot_categories[name] = sorted(counts)
            else:
                self.frequency_maps[name] = counts
        self.fitted = True
        return self

    def transform(self, frame: FeatureFrame) -> FeatureFrame:
        if not self.fitted:
            raise EncoderStateError("encoder must be fitted before transform")
        out = FeatureFrame(frame.timestamps)
        for name in frame.names:
            meta = frame.column_meta[name]
            if meta.kind == NUMERIC:
                out.add_numeric(name, frame.columns[name], encoding=meta.encoding)
                continue
            values = frame.columns[name]
            if name in self.onehot_categories:
                cats = self.onehot_categories[name]
                pos = {c: i for i, c in enumerate(cats)}
                mat = np.zeros((len(frame), len(cats) + 1))
                for i, v in enumerate(values):
                    j = pos.get(v, len(cats)) if v is not None else len(cats)
                    mat[i, j] = 1.0
                for j, cat in enumerate(cats):
                    out.add_numeric(f"{name}={cat}", mat[:, j], encoding="onehot")
                out.add_numeric(f"{name}={UNKNOWN}", mat[:, -1], encoding="onehot")
            elif name in self.frequency_maps:
                fmap = self.frequency_maps[name]
                codes = np.array(
                    [float(fmap.get(v, 0)) if v is not None else 0.0 for v in values]
                )
                out.add_numeric(name, codes, encoding="frequency")
            else:
                # column absent at fit time (e.g. no categorical data): unknown-only
                out.add_numeric(
                    f"{name}={UNKNOWN}", np.ones(len(frame)), encoding="onehot"
                )
        return out


def encode_categorical(
    frame: FeatureFrame, cardinality_thresh: int = 50, fit_mask=None
) -> FeatureFrame:
    """Fit a :class:`CategoricalEncoder` on ``fit_mask`` rows (all rows by
    default) and transform the frame."""
    return CategoricalEncoder(cardinality_thresh).fit(frame, fit_mask).transform(frame)


def impute_numeric(
    frame: FeatureFrame, fit_mask=None, no_ffill: Sequence[str] = ()
) -> FeatureFrame:
    """Forward-fill numeric NaNs, then fill leading gaps with the mean of the
    observed values in the fit rows (0.0 when a column has no observed fit
    value).  Columns named in ``no_ffill`` skip the forward fill and go
    straight to the fit mean.  Categorical columns pass through untouched."""
    if fit_mask is None:
        fit_mask = np.ones(len(frame), dtype=bool)
    fit_mask = np.asarray(fit_mask, dtype=bool)
    no_ffill = set(no_ffill)
    out = FeatureFrame(frame.timestamps)
    for name in frame.names:
        meta = frame.column_meta[name]
        if meta.kind != NUMERIC:
            out.add_categorical(name, frame.columns[name])
            continue
        col = np.array(frame.columns[name], dtype=np.float64)
        observed_fit = col[fit_mask & ~np.isnan(col)]
        fill = float(observed_fit.mean()) if observed_fit.size else 0.0
        if name in no_ffill:
            filled = np.where(np.isnan(col), fill, col)
        else:
            # forward fill: index of most recent non-NaN at or before each row
            valid = ~np.isnan(col)
            idx = np.where(valid, np.arange(col.size), -1)
            idx = np.maximum.accumulate(idx)
            filled = np.where(idx >= 0, col[np.maximum(idx, 0)], fill)
        out.add_numeric(name, filled, encoding=meta.encoding)
    return out
