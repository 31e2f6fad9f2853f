"""Data fusion: merge weather into trajectory and flight tables (D_t, D_f),
attach succeeding-flight and ATC features to each arrival row, and compute the
horizon-shifted mean-delay regression target.

All joins are backward-looking (latest record at or before the row time):
features attached at time t may only depend on information with timestamps
<= t, which the leakage audit in the test suite enforces.  Scheduled times are
treated as pre-known metadata.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .features import (
    BIN_SECONDS,
    FeatureFrame,
    FirstSeenIndex,
    bin_of,
    haversine_km_vec,
)
from .geo import GeoPoint, SectorGrid, haversine_distance
from .ingest import AtcRecord, FlightRecord, WeatherRecord, format_ts, parse_ts

WEATHER_FIELDS = ["temp_c", "precip_mm", "humidity_pct", "wind_speed_kt", "wind_dir_deg"]

INFLIGHT_VARS = [
    "dist_km", "speed_kt", "alt_ft", "eta_gap_min",
    "temp_c", "precip_mm", "humidity_pct", "wind_speed_kt",
    "sector_traffic",
]

KT_TO_KM_PER_MIN = 1.852 / 60.0


@dataclass(frozen=True)
class FusionConfig:
    airport: str
    tau_min: int = 60
    target_window_min: int = 5
    weather_join_tolerance_min: int = 30
    # position reports older than this are stale: the aircraft is either not
    # airborne yet or long landed, so its geometry says nothing about now
    inflight_staleness_min: int = 45

    def __post_init__(self):
        if self.tau_min <= 0:
            raise ValueError("tau_min must be positive")
        if self.target_window_min <= 0:
            raise ValueError("target_window_min must be positive")
        if self.weather_join_tolerance_min <= 0:
            raise ValueError("weather_join_tolerance_min must be positive")
        if self.inflight_staleness_min <= 0:
            raise ValueError("inflight_staleness_min must be positive")


@dataclass
class LabeledRow:
    ts: int
    features: np.ndarray
    target_available: bool
    target_delay_min: float


class WeatherTable:
    """Per-station time-sorted weather columns supporting the backward join
    (latest record at or before t, within tolerance)."""

    def __init__(self, records: Sequence[WeatherRecord]):
        by_station: Dict[str, List[WeatherRecord]] = {}
        for r in records:
            by_station.setdefault(r.station, []).append(r)
        self.stations: Dict[str, dict] = {}
        for station, recs in by_station.items():
            recs.sort(key=lambda r: r.ts)
            entry = {"ts": np.array([r.ts for r in recs], dtype=np.int64)}
            for f in WEATHER_FIELDS:
                entry[f] = np.array(
                    [np.nan if getattr(r, f) is None else getattr(r, f) for r in recs]
                )
            entry["sky_condition"] = [r.sky_condition for r in recs]
            self.stations[station] = entry

    def station_names(self) -> List[str]:
        return sorted(self.stations)

    def index_before(self, station: str, ts, tolerance_s: int) -> np.ndarray:
        """Index of the latest record at or before each ts (vectorized); -1
        where none exists within tolerance."""
        entry = self.stations.get(station)
        ts = np.asarray(ts, dtype=np.int64)
        if entry is None:
            return np.full(ts.shape, -1, dtype=np.int64)
        idx = np.searchsorted(entry["ts"], ts, side="right") - 1
        ok = idx >= 0
        age = np.where(ok, ts - entry["ts"][np.maximum(idx, 0)], np.iinfo(np.int64).max)
        return np.where(ok & (age <= tolerance_s), idx, -1)


def _nearest_station(
    lat, lon, station_locations: Dict[str, GeoPoint], available: Sequence[str]
) -> np.ndarray:
    """Index into ``available`` of the spatially nearest station per point."""
    names = [s for s in available if s in station_locations]
    if not names:
        raise ValueError("no weather station has a known location")
    dists = np.stack(
        [haversine_km_vec(lat, lon, station_locations[s]) for s in names], axis=1
    )
    pick = np.argmin(dists, axis=1)
    lookup = np.array([available.index(s) for s in names], dtype=np.int64)
    return lookup[pick]


def build_dt(
    traj_frame_inputs,
    weather: WeatherTable,
    cfg: FusionConfig,
    station_locations: Optional[Dict[str, GeoPoint]] = None,
    airport_location: Optional[GeoPoint] = None,
) -> FeatureFrame:
    """Fuse weather into the trajectory table: one row per position report with
    the nearest station's latest reading at or before the report time.

    ``traj_frame_inputs`` is a :class:`~airdelay.features.TrajArrays`; rows
    outside the join tolerance keep missing weather fields.  When
    ``airport_location`` is given a ``dist_km`` column (great-circle distance
    to that airport) is added.
    """
    t = traj_frame_inputs
    frame = FeatureFrame(t.ts)
    frame.add_categorical("tail_id", [t.tails[i] for i in t.tail_idx])
    frame.add_numeric("lat", t.lat)
    frame.add_numeric("lon", t.lon)
    frame.add_numeric("alt_ft", t.alt)
    frame.add_numeric("speed_kt", t.speed)
    if airport_location is not None:
        frame.add_numeric("dist_km", haversine_km_vec(t.lat, t.lon, airport_location))

    names = weather.station_names()
    n = len(t)
    if not names or n == 0:
        for f in WEATHER_FIELDS:
            frame.add_numeric(f, np.full(n, np.nan))
        return frame
    if len(names) == 1:
        station_of_point = np.zeros(n, dtype=np.int64)
    else:
        if not station_locations:
            raise ValueError("station_locations required when multiple stations exist")
        station_of_point = _nearest_station(t.lat, t.lon, station_locations, names)

    tol_s = cfg.weather_join_tolerance_min * 60
    cols = {f: np.full(n, np.nan) for f in WEATHER_FIELDS}
    for si, station in enumerate(names):
        mask = station_of_point == si
        if not mask.any():
            continue
        idx = weather.index_before(station, t.ts[mask], tol_s)
        ok = idx >= 0
        rows = np.flatnonzero(mask)[ok]
        src = idx[ok]
        for f in WEATHER_FIELDS:
            cols[f][rows] = weather.stations[station][f][src]
    for f in WEATHER_FIELDS:
        frame.add_numeric(f, cols[f])
    return frame


@dataclass
class CongestionInputs:
    """Precomputed congestion structures for the fusion stage."""

    ground_dep_ts: np.ndarray  # sorted actual departure times at the airport
    ground_arr_ts: np.ndarray  # sorted actual arrival times at the airport
    terminal: FirstSeenIndex
    enroute: Optional[FirstSeenIndex] = None
    grid: Optional[SectorGrid] = None


def _count_in_bin_up_to(sorted_ts: np.ndarray, t: int) -> int:
    """Events within [bin_of(t), t]; the in-bin count truncated at the row time
    so no post-t event can influence the feature."""
    b = bin_of(t)
    lo = np.searchsorted(sorted_ts, b, side="left")
    hi = np.searchsorted(sorted_ts, t, side="right")
    return int(hi - lo)


def build_df(
    flights: Sequence[FlightRecord],
    weather: WeatherTable,
    congestion: CongestionInputs,
    cfg: FusionConfig,
    airport_location: GeoPoint,
    station_locations: Optional[Dict[str, GeoPoint]] = None,
) -> FeatureFrame:
    """One row per arrival event at the configured airport, ordered by actual
    arrival, carrying flight fields, airport weather, and congestion counts
    truncated at the row time."""
    arrivals = [
        f for f in flights if f.dest == cfg.airport and f.actual_arr is not None
    ]
    arrivals.sort(key=lambda f: (f.actual_arr, f.flight_id))
    ts = np.array([f.actual_arr for f in arrivals], dtype=np.int64)
    n = len(arrivals)

    frame = FeatureFrame(ts)
    frame.add_numeric("arr_delay_min", [
        np.nan if f.arr_delay_min is None else f.arr_delay_min for f in arrivals
    ])
    frame.add_numeric("dep_delay_min", [
        np.nan if f.dep_delay_min is None else f.dep_delay_min for f in arrivals
    ])
    frame.add_numeric("sched_block_min", [
        np.nan if f.sched_dep is None or f.sched_arr is None
        else (f.sched_arr - f.sched_dep) / 60.0
        for f in arrivals
    ])
    frame.add_numeric("minute_of_day", (ts % 86400) / 60.0)
    frame.add_categorical("airline", [f.airline or None for f in arrivals])
    frame.add_categorical("origin", [f.origin or None for f in arrivals])

    # airport weather: station nearest to the airport, backward join
    names = weather.station_names()
    wcols = {f: np.full(n, np.nan) for f in WEATHER_FIELDS}
    sky: List[Optional[str]] = [None] * n
    if names and n:
        if len(names) == 1 or not station_locations:
            station = names[0]
        else:
            located = [s for s in names if s in station_locations]
            station = min(
                located,
                key=lambda s: haversine_distance(station_locations[s], airport_location),
            ) if located else names[0]
        idx = weather.index_before(station, ts, cfg.weather_join_tolerance_min * 60)
        entry = weather.stations[station]
        ok = idx >= 0
        for f in WEATHER_FIELDS:
            wcols[f][ok] = entry[f][idx[ok]]
        for i in np.flatnonzero(ok):
            sky[i] = entry["sky_condition"][idx[i]]
    for f in WEATHER_FIELDS:
        frame.add_numeric(f, wcols[f])
    frame.add_categorical("sky_condition", sky)

    frame.add_numeric("ground_dep_count", [
        _count_in_bin_up_to(congestion.ground_dep_ts, int(t)) for t in ts
    ])
    frame.add_numeric("ground_arr_count", [
        _count_in_bin_up_to(congestion.ground_arr_ts, int(t)) for t in ts
    ])
    frame.add_numeric("terminal_count", [
        congestion.terminal.count_up_to((bin_of(int(t)),), int(t)) for t in ts
    ])
    return frame


class _TailIndex:
    """tail_id -> (sorted point times, dt row indices) for latest-at-or-before
    lookups into the D_t frame."""

    def __init__(self, dt_frame: FeatureFrame):
        tails = dt_frame.columns["tail_id"]
        ts = dt_frame.timestamps
        by_tail: Dict[str, List[int]] = {}
        for i, tail in enumerate(tails):
            by_tail.setdefault(tail, []).append(i)
        self.index: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        for tail, rows in by_tail.items():
            rows_arr = np.asarray(rows, dtype=np.int64)
            order = np.argsort(ts[rows_arr], kind="stable")
            rows_arr = rows_arr[order]
            self.index[tail] = (ts[rows_arr], rows_arr)

    def latest_at_or_before(self, tail: str, t: int) -> Optional[int]:
        entry = self.index.get(tail)
        if entry is None:
            return None
        pos = int(np.searchsorted(entry[0], t, side="right")) - 1
        if pos < 0:
            return None
        return int(entry[1][pos])


def attach_inflight(
    df_frame: FeatureFrame,
    dt_frame: FeatureFrame,
    flights: Sequence[FlightRecord],
    cfg: FusionConfig,
    congestion: Optional[CongestionInputs] = None,
) -> FeatureFrame:
    """Attach fixed-width summaries of the aircraft scheduled to arrive in the
    target window [t+tau, t+tau+window).

    Per in-flight aircraft the latest D_t row at or before t supplies distance
    to the airport, speed, altitude, the weather joined to that position, the
    (truncated) congestion of the en-route sector it currently occupies, and a
    derived schedule-gap estimate: minutes by which the aircraft's
    distance/groundspeed arrival estimate trails its scheduled arrival.
    Aggregation over the cohort is count/mean/min/max so the row width stays
    constant; rows with an empty cohort get count 0 and missing statistics,
    which the imputation step later fills with training means.
    """
    sched = [
        (f.sched_arr, f.tail_id)
        for f in flights
        if f.dest == cfg.airport and f.sched_arr is not None and f.tail_id
    ]
    sched.sort()
    sched_ts = np.array([s[0] for s in sched], dtype=np.int64)
    sched_tail = [s[1] for s in sched]

    tail_index = _TailIndex(dt_frame)
    dt_cols = {
        name: dt_frame.columns[name]
        for name in ("dist_km", "speed_kt", "alt_ft",
                     "temp_c", "precip_mm", "humidity_pct", "wind_speed_kt",
                     "lat", "lon")
        if name in dt_frame.columns
    }
    use_sectors = (
        congestion is not None
        and congestion.enroute is not None
        and congestion.grid is not None
    )

    n = len(df_frame)
    count = np.zeros(n)
    tracked = np.zeros(n)
    lat_mean = np.full(n, np.nan)
    lon_mean = np.full(n, np.nan)
    stats = {v: {agg: np.full(n, np.nan) for agg in ("mean", "min", "max")}
             for v in INFLIGHT_VARS}

    tau_s = cfg.tau_min * 60
    win_s = cfg.target_window_min * 60
    stale_s = cfg.inflight_staleness_min * 60
    dt_ts = dt_frame.timestamps
    for i, t in enumerate(df_frame.timestamps):
        t = int(t)
        lo = int(np.searchsorted(sched_ts, t + tau_s, side="left"))
        hi = int(np.searchsorted(sched_ts, t + tau_s + win_s, side="left"))
        count[i] = hi - lo
        if hi == lo:
            continue
        values: Dict[str, List[float]] = {v: [] for v in INFLIGHT_VARS}
        lats: List[float] = []
        lons: List[float] = []
        for k in range(lo, hi):
            row = tail_index.latest_at_or_before(sched_tail[k], t)
            if row is None or t - int(dt_ts[row]) > stale_s:
                continue
            tracked[i] += 1
            for v in INFLIGHT_VARS:
                if v in ("sector_traffic", "eta_gap_min"):
                    continue
                col = dt_cols.get(v)
                if col is None:
                    continue
                x = float(col[row])
                if not np.isnan(x):
                    values[v].append(x)
            dist_col = dt_cols.get("dist_km")
            speed_col = dt_cols.get("speed_kt")
            if dist_col is not None and speed_col is not None:
                d = float(dist_col[row])
                s = float(speed_col[row])
                if not (np.isnan(d) or np.isnan(s)) and s > 1.0:
                    eta_s = d / (s * KT_TO_KM_PER_MIN) * 60.0
                    values["eta_gap_min"].append(
                        (t + eta_s - sched_ts[k]) / 60.0
                    )
            plat = float(dt_cols["lat"][row])
            plon = float(dt_cols["lon"][row])
            lats.append(plat)
            lons.append(plon)
            if use_sectors:
                grid = congestion.grid
                srow = min(int((plat + 90.0) // grid.cell_lat_deg), grid.n_rows - 1)
                scol = min(int((plon + 180.0) // grid.cell_lon_deg), grid.n_cols - 1)
                values["sector_traffic"].append(float(
                    congestion.enroute.count_up_to((srow, scol, bin_of(t)), t)
                ))
        for v in INFLIGHT_VARS:
            if values[v]:
                arr = np.asarray(values[v])
                stats[v]["mean"][i] = arr.mean()
                stats[v]["min"][i] = arr.min()
                stats[v]["max"][i] = arr.max()
        if lats:
            lat_mean[i] = float(np.mean(lats))
            lon_mean[i] = float(np.mean(lons))

    out = df_frame.subset(df_frame.names)
    out.add_numeric("inflight_count", count)
    out.add_numeric("inflight_tracked_count", tracked)
    for v in INFLIGHT_VARS:
        for agg in ("mean", "min", "max"):
            out.add_numeric(f"inflight_{v}_{agg}", stats[v][agg])
    out.add_numeric("inflight_lat_mean", lat_mean)
    out.add_numeric("inflight_lon_mean", lon_mean)
    return out


def attach_atc(
    frame: FeatureFrame,
    atc_records: Sequence[AtcRecord],
    airport_location: GeoPoint,
) -> FeatureFrame:
    """Attach staffing and controller-training features of the facility whose
    centroid is nearest the in-flight mean position (nearest the airport for
    rows with no in-flight aircraft)."""
    if not atc_records:
        raise ValueError("ATC facility table is empty")
    n = len(frame)
    lat = np.array(frame.columns.get("inflight_lat_mean", np.full(n, np.nan)))
    lon = np.array(frame.columns.get("inflight_lon_mean", np.full(n, np.nan)))
    missing = np.isnan(lat) | np.isnan(lon)
    lat = np.where(missing, airport_location.lat_deg, lat)
    lon = np.where(missing, airport_location.lon_deg, lon)
    dists = np.stack(
        [haversine_km_vec(lat, lon, r.centroid) for r in atc_records], axis=1
    )
    pick = np.argmin(dists, axis=1)
    staffing = np.array([r.staffing for r in atc_records], dtype=np.float64)
    training = np.array([r.controller_training_time_hr for r in atc_records])
    out = frame.subset(frame.names)
    out.add_numeric("atc_staffing", staffing[pick])
    out.add_numeric("atc_training_hr", training[pick])
    return out


def compute_target(
    frame: FeatureFrame, flights: Sequence[FlightRecord], cfg: FusionConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean arrival delay over flights whose actual arrival falls in
    [t+tau, t+tau+window) for each row time t.

    Returns (available mask, target minutes); unavailable targets are NaN.
    """
    events = sorted(
        (f.actual_arr, f.arr_delay_min)
        for f in flights
        if f.dest == cfg.airport and f.actual_arr is not None and f.arr_delay_min is not None
    )
    ev_ts = np.array([e[0] for e in events], dtype=np.int64)
    ev_delay = np.array([e[1] for e in events], dtype=np.float64)
    tau_s = cfg.tau_min * 60
    win_s = cfg.target_window_min * 60
    lo = np.searchsorted(ev_ts, frame.timestamps + tau_s, side="left")
    hi = np.searchsorted(ev_ts, frame.timestamps + tau_s + win_s, side="left")
    available = hi > lo
    target = np.full(len(frame), np.nan)
    csum = np.concatenate([[0.0], np.cumsum(ev_delay)])
    with np.errstate(invalid="ignore", divide="ignore"):
        sums = csum[hi] - csum[lo]
        target = np.where(available, sums / np.maximum(hi - lo, 1), np.nan)
    return available, target


@dataclass
class LabeledData:
    """The fused, encoded, imputed supervised table: one row per arrival event."""

    timestamps: np.ndarray          # int64 (S,)
    x: np.ndarray                   # float64 (S, M)
    feature_names: List[str]
    target_available: np.ndarray    # bool (S,)
    target: np.ndarray              # float64 (S,), NaN where unavailable
    groups: Dict[str, str]          # column -> "t" | "st"
    sidecar: dict = field(default_factory=dict)

    def rows(self) -> List[LabeledRow]:
        return [
            LabeledRow(int(self.timestamps[i]), self.x[i],
                       bool(self.target_available[i]), float(self.target[i]))
            for i in range(len(self.timestamps))
        ]

    def column_indices(self, mode: str) -> List[int]:
        """Feature column indices for mode 't' (airport-side only) or 'st'."""
        if mode not in ("t", "st"):
            raise ValueError(f"unknown feature mode: {mode}")
        if mode == "st":
            return list(range(len(self.feature_names)))
        return [
            i for i, name in enumerate(self.feature_names)
            if self.groups.get(name, "t") == "t"
        ]


def write_labeled_csv(path, data: LabeledData, sidecar_path=None) -> None:
    """Persist the labeled dataset as CSV plus a JSON sidecar describing the
    columns and encoder provenance."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", "target_available", "target_delay_min"] + data.feature_names)
        for i in range(len(data.timestamps)):
            target = "" if not data.target_available[i] else repr(float(data.target[i]))
            w.writerow(
                [format_ts(int(data.timestamps[i])),
                 int(data.target_available[i]), target]
                + [repr(float(v)) for v in data.x[i]]
            )
    if sidecar_path is not None:
        with open(sidecar_path, "w", encoding="utf-8") as fh:
            json.dump(data.sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_labeled_csv(path, sidecar_path=None) -> LabeledData:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["ts", "target_available", "target_delay_min"]:
            raise ValueError(f"{path}: not a labeled dataset CSV")
        names = header[3:]
        ts, avail, target, rows = [], [], [], []
        for row in reader:
            ts.append(parse_ts(row[0]))
            avail.append(bool(int(row[1])))
            target.append(float(row[2]) if row[2] else np.nan)
            rows.append([float(v) for v in row[3:]])
    sidecar = {}
    groups = {}
    if sidecar_path is not None:
        with open(sidecar_path, encoding="utf-8") as fh:
            sidecar = json.load(fh)
        groups = {c["name"]: c["group"] for c in sidecar.get("columns", [])}
    return LabeledData(
        timestamps=np.array(ts, dtype=np.int64),
        x=np.array(rows, dtype=np.float64).reshape(len(ts), len(names)),
        feature_names=names,
        target_available=np.array(avail, dtype=bool),
        target=np.array(target, dtype=np.float64),
        groups=groups,
        sidecar=sidecar,
    )
