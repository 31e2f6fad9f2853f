"""End-to-end featurization: raw parsed records -> fused frame -> selection ->
encoding -> imputation -> labeled supervised table."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import features, fusion, ingest
from .features import CategoricalEncoder, FeatureFrame, TrajArrays
from .fusion import CongestionInputs, FusionConfig, LabeledData, WeatherTable
from .geo import GeoPoint, SectorGrid
from .synth import Airport, DEFAULT_AIRPORTS


@dataclass
class FeaturizeConfig:
    airport: str = "HUB"
    airports: Tuple[Airport, ...] = DEFAULT_AIRPORTS
    tau_min: int = 60
    target_window_min: int = 5
    weather_join_tolerance_min: int = 30
    sector_cell_deg: float = 4.0
    sector_floor_ft: float = 18000.0
    missing_thresh: float = 0.8
    corr_thresh: float = 0.8
    keep_list: Tuple[str, ...] = ("arr_delay_min", "inflight_eta_gap_min_mean")
    cardinality_thresh: int = 50
    train_frac: float = 0.8

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            airport=self.airport,
            tau_min=self.tau_min,
            target_window_min=self.target_window_min,
            weather_join_tolerance_min=self.weather_join_tolerance_min,
        )

    def airport_location(self) -> GeoPoint:
        for a in self.airports:
            if a.code == self.airport:
                return a.location
        raise ValueError(f"airport {self.airport!r} not in the configured airport list")

    def station_locations(self) -> Dict[str, GeoPoint]:
        return {a.code: a.location for a in self.airports}

    def grid(self) -> SectorGrid:
        return SectorGrid(self.sector_cell_deg, self.sector_cell_deg,
                          self.sector_floor_ft)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "airport", "tau_min", "target_window_min", "weather_join_tolerance_min",
            "sector_cell_deg", "sector_floor_ft", "missing_thresh", "corr_thresh",
            "cardinality_thresh", "train_frac",
        )}
        d["keep_list"] = list(self.keep_list)
        d["airports"] = [[a.code, a.lat, a.lon] for a in self.airports]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizeConfig":
        d = dict(d)
        if "airports" in d:
            d["airports"] = tuple(Airport(c, la, lo) for c, la, lo in d["airports"])
        if "keep_list" in d:
            d["keep_list"] = tuple(d["keep_list"])
        return cls(**d)


def build_fused_frame(
    flights: Sequence[ingest.FlightRecord],
    traj: TrajArrays,
    weather: WeatherTable,
    atc: Sequence[ingest.AtcRecord],
    cfg: FeaturizeConfig,
) -> Tuple[FeatureFrame, Dict[str, str]]:
    """Raw fused frame (pre-selection, pre-encoding) plus the column group map
    ('t' for airport-side columns, 'st' for succeeding-flight spatio-temporal
    ones).  This is the surface the leakage audit probes."""
    fcfg = cfg.fusion_config()
    airport_loc = cfg.airport_location()
    stations = cfg.station_locations()

    dep_ts, arr_ts = features.ground_event_times(flights, cfg.airport)
    congestion = CongestionInputs(
        ground_dep_ts=dep_ts,
        ground_arr_ts=arr_ts,
        terminal=features.terminal_first_seen(traj, airport_loc),
        enroute=features.enroute_first_seen(traj, cfg.grid()),
        grid=cfg.grid(),
    )
    df = fusion.build_df(flights, weather, congestion, fcfg, airport_loc, stations)
    groups = {name: ("st" if name == "terminal_count" else "t") for name in df.names}

    dt = fusion.build_dt(traj, weather, fcfg, stations, airport_loc)
    before = set(df.names)
    df = fusion.attach_inflight(df, dt, flights, fcfg, congestion)
    df = fusion.attach_atc(df, atc, airport_loc)
    for name in df.names:
        if name not in before:
            groups[name] = "st"
    return df, groups


def fit_row_mask(timestamps: np.ndarray, train_frac: float) -> np.ndarray:
    """First ceil(train_frac * L) rows of each UTC day.  Encoder, imputation,
    and selection statistics are fitted on these rows only; they never include
    rows seen exclusively by test windows."""
    mask = np.zeros(timestamps.size, dtype=bool)
    days = timestamps // 86400
    for day in np.unique(days):
        rows = np.flatnonzero(days == day)
        k = math.ceil(train_frac * rows.size)
        mask[rows[:k]] = True
    return mask


def featurize_records(
    flights: Sequence[ingest.FlightRecord],
    traj: TrajArrays,
    weather_records,
    atc: Sequence[ingest.AtcRecord],
    cfg: FeaturizeConfig,
) -> LabeledData:
    """Full featurization path producing the labeled supervised table."""
    weather = WeatherTable(weather_records)
    fused, groups = build_fused_frame(flights, traj, weather, atc, cfg)
    if len(fused) == 0:
        raise ValueError(f"no arrivals at {cfg.airport!r} in the flight data")
    fmask = fit_row_mask(fused.timestamps, cfg.train_frac)

    # selection statistics come from fit rows; verdicts apply to the full frame
    keep = tuple(k for k in cfg.keep_list if k in fused.names)
    fit_frame = FeatureFrame(fused.timestamps[fmask])
    for name in fused.names:
        meta = fused.column_meta[name]
        if meta.kind == features.NUMERIC:
            fit_frame.add_numeric(name, np.asarray(fused.columns[name])[fmask])
        else:
            vals = fused.columns[name]
            fit_frame.add_categorical(name, [vals[i] for i in np.flatnonzero(fmask)])
    sel = features.select_features(fit_frame, cfg.missing_thresh, cfg.corr_thresh, keep)
    kept_names = sel.frame.names
    selected = fused.subset(kept_names)

    encoder = CategoricalEncoder(cfg.cardinality_thresh).fit(selected, fmask)
    encoded = encoder.transform(selected)
    mean_only = [n for n in encoded.names
                 if n.startswith("inflight_") and n != "inflight_count"]
    imputed = features.impute_numeric(encoded, fmask, no_ffill=mean_only)

    available, target = fusion.compute_target(imputed, flights, cfg.fusion_config())

    names = imputed.names
    col_groups = {n: groups.get(n.split("=", 1)[0], "t") for n in names}
    sidecar = {
        "airport": cfg.airport,
        "tau_min": cfg.tau_min,
        "target_window_min": cfg.target_window_min,
        "train_frac": cfg.train_frac,
        "fit_rule": "first ceil(train_frac * L) rows of each UTC day",
        "columns": [
            {
                "name": n,
                "type": "numeric",
                "group": col_groups[n],
                "encoding": imputed.column_meta[n].encoding,
            }
            for n in names
        ],
        "selection_report": [e.to_dict() for e in sel.report],
        "encoders": {
            "onehot_categories": encoder.onehot_categories,
            "frequency_maps": encoder.frequency_maps,
            "cardinality_thresh": cfg.cardinality_thresh,
        },
    }
    return LabeledData(
        timestamps=imputed.timestamps,
        x=imputed.numeric_matrix(names),
        feature_names=names,
        target_available=available,
        target=target,
        groups=col_groups,
        sidecar=sidecar,
    )


def featurize_dir(scenario_dir, cfg: FeaturizeConfig) -> LabeledData:
    """Parse a scenario directory and featurize it."""
    parsed = ingest.load_dir(scenario_dir)
    traj = TrajArrays(parsed["trajectories"].records)
    return featurize_records(
        parsed["flights"].records, traj,
        parsed["weather"].records, parsed["atc"].records, cfg,
    )
