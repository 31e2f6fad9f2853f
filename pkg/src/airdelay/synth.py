"""Deterministic synthetic-scenario generator.

Emits the four ingest CSV schemas plus a ground-truth JSON that permits exact
recomputation of every planted arrival delay.  The generative rule for an
arrival at the hub airport is

    arr_delay = round(propagation_strength * dep_delay
                      + congestion_sensitivity * max(0, sched_bin_count - 1)
                      + storm_intensity * badness(sched_arr)
                      + noise)

where dep_delay is the flight's own (exogenous, disturbance-driven) departure
delay realized roughly one flight-duration before arrival, sched_bin_count is
the number of hub arrivals scheduled in the same 10-minute bin, and badness is
a slow per-day storm profile whose noisy observations appear in weather.csv.

Departure delays are not independent across flights: each origin airport
carries a few hour-scale disruption waves per day, so lateness arrives at the
hub in correlated bursts that the trajectory data shows before it lands.
Inbound flights get great-circle trajectories sampled every 60 seconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geo import GeoPoint
from .ingest import format_ts

TRAJ_SAMPLE_S = 60
SCHEDULE_START_MIN = 0
SCHEDULE_END_MIN = 1440        # full day so target windows stay dense everywhere
MAX_ARRIVALS_PER_MIN = 4

AIRLINES = ["AA", "DL", "UA", "WN", "B6"]
AIRCRAFT_MODELS = ["B737", "A320", "B752", "E175", "A321", "CRJ9"]
SKY_LEVELS = [(0.10, "CLR"), (0.30, "SCT"), (0.55, "BKN"), (0.80, "OVC"), (2.0, "TS")]

DEFAULT_START_TS = 1467331200  # 2016-07-01T00:00:00Z


class GenerationError(RuntimeError):
    """The requested scenario cannot be generated."""


@dataclass(frozen=True)
class Airport:
    code: str
    lat: float
    lon: float

    @property
    def location(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)


DEFAULT_AIRPORTS: Tuple[Airport, ...] = (
    Airport("HUB", 33.64, -84.43),
    Airport("NEA", 40.64, -73.78),
    Airport("MWA", 41.98, -87.90),
    Airport("SWA", 32.90, -97.04),
    Airport("WCA", 33.94, -118.41),
    Airport("MTA", 39.86, -104.67),
    Airport("SEA", 26.07, -80.15),
)


@dataclass
class ScenarioConfig:
    """Knobs of the planted dynamics; the first airport is the hub whose
    arrivals are modeled."""

    days: int = 2
    flights_per_day: int = 300
    airports: Tuple[Airport, ...] = DEFAULT_AIRPORTS
    storm_prob: float = 0.5
    storm_intensity_min: float = 18.0
    propagation_strength: float = 0.6
    congestion_sensitivity: float = 1.2
    noise_std_min: float = 3.0
    dep_disturbance_scale: float = 1.0
    departures_per_day: Optional[int] = None  # defaults to flights_per_day
    seed: int = 0
    start_ts: int = DEFAULT_START_TS

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if self.flights_per_day < 1:
            raise ValueError("flights_per_day must be >= 1")
        if len(self.airports) < 2:
            raise ValueError("need the hub plus at least one origin airport")
        for v, name in (
            (self.propagation_strength, "propagation_strength"),
            (self.congestion_sensitivity, "congestion_sensitivity"),
            (self.noise_std_min, "noise_std_min"),
            (self.dep_disturbance_scale, "dep_disturbance_scale"),
        ):
            if v < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def hub(self) -> Airport:
        return self.airports[0]

    def to_dict(self) -> dict:
        return {
            "days": self.days,
            "flights_per_day": self.flights_per_day,
            "airports": [[a.code, a.lat, a.lon] for a in self.airports],
            "storm_prob": self.storm_prob,
            "storm_intensity_min": self.storm_intensity_min,
            "propagation_strength": self.propagation_strength,
            "congestion_sensitivity": self.congestion_sensitivity,
            "noise_std_min": self.noise_std_min,
            "dep_disturbance_scale": self.dep_disturbance_scale,
            "departures_per_day": self.departures_per_day,
            "seed": self.seed,
            "start_ts": self.start_ts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "airports" in d:
            d["airports"] = tuple(Airport(c, la, lo) for c, la, lo in d["airports"])
        return cls(**d)


@dataclass
class _Storm:
    active: bool
    center_s: float = 0.0
    width_s: float = 1.0
    amplitude: float = 0.0

    def badness(self, ts: float) -> float:
        if not self.active:
            return 0.0
        z = (ts - self.center_s) / self.width_s
        return self.amplitude * math.exp(-0.5 * z * z)


class _DisruptionWaves:
    """Per-day, per-airport departure-delay level: a sum of hour-scale Gaussian
    bumps, so nearby departures from the same origin share their lateness."""

    def __init__(self, rng: np.random.Generator, day_start: int, codes: Sequence[str]):
        self.bumps: Dict[str, list] = {}
        for code in codes:
            k = int(rng.poisson(1.3))
            bumps = []
            for _ in range(k):
                bumps.append((
                    day_start + rng.uniform(0.0, 24.0) * 3600.0,  # center
                    rng.uniform(1.0, 3.0) * 3600.0,               # width
                    float(rng.exponential(14.0)),                 # amplitude, minutes
                ))
            self.bumps[code] = bumps

    def level(self, code: str, ts: float) -> float:
        total = 0.0
        for center, width, amp in self.bumps.get(code, ()):
            z = (ts - center) / width
            total += amp * math.exp(-0.5 * z * z)
        return total


def _great_circle_samples(a: Airport, b: Airport, frac: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Spherical linear interpolation between two airports at given fractions."""
    def unit(ap: Airport) -> np.ndarray:
        la, lo = math.radians(ap.lat), math.radians(ap.lon)
        return np.array([
            math.cos(la) * math.cos(lo),
            math.cos(la) * math.sin(lo),
            math.sin(la),
        ])

    u, v = unit(a), unit(b)
    dot = float(np.clip(u @ v, -1.0, 1.0))
    omega = math.acos(dot)
    if omega < 1e-12:
        pts = np.tile(u, (frac.size, 1))
    else:
        s = math.sin(omega)
        pts = (np.sin((1.0 - frac) * omega)[:, None] * u
               + np.sin(frac * omega)[:, None] * v) / s
    lat = np.degrees(np.arcsin(np.clip(pts[:, 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(pts[:, 1], pts[:, 0]))
    return lat, lon


def _bearing_deg(lat1, lon1, lat2, lon2) -> np.ndarray:
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dl = np.radians(lon2 - lon1)
    y = np.sin(dl) * np.cos(phi2)
    x = np.cos(phi1) * np.sin(phi2) - np.sin(phi1) * np.cos(phi2) * np.cos(dl)
    return np.mod(np.degrees(np.arctan2(y, x)), 360.0)


def _haversine_km(a: Airport, b: Airport) -> float:
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dpsi = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dpsi / 2) ** 2
    return 2 * 6371.0 * math.asin(math.sqrt(min(1.0, s)))


def _sky_condition(badness: float) -> str:
    for limit, label in SKY_LEVELS:
        if badness < limit:
            return label
    return SKY_LEVELS[-1][1]


def generate(cfg: ScenarioConfig, out_dir) -> Dict[str, Path]:
    """Generate a scenario into ``out_dir``; byte-identical for a fixed config.

    Returns the paths of the four CSVs and the ground-truth JSON.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    window = SCHEDULE_END_MIN - SCHEDULE_START_MIN
    if cfg.flights_per_day > MAX_ARRIVALS_PER_MIN * window:
        raise GenerationError(
            f"{cfg.flights_per_day} arrivals/day exceeds the feasible density of "
            f"{MAX_ARRIVALS_PER_MIN}/minute over a {window}-minute schedule window"
        )

    hub = cfg.hub
    origins = cfg.airports[1:]
    n_dep = cfg.departures_per_day if cfg.departures_per_day is not None else cfg.flights_per_day
    dist_km = {o.code: _haversine_km(o, hub) for o in origins}
    cruise_kmh = 830.0
    tail_pool = [f"T{i:04d}" for i in range(cfg.flights_per_day)]
    model_of_tail = {t: AIRCRAFT_MODELS[i % len(AIRCRAFT_MODELS)]
                     for i, t in enumerate(tail_pool)}

    flight_rows: List[list] = []
    traj_lines: List[str] = []
    weather_rows: List[list] = []
    truth_flights: List[dict] = []

    for day in range(cfg.days):
        day_start = cfg.start_ts + day * 86400

        # storm profile of the day at the hub; center uniform over the whole
        # day so no intraday region is systematically calmer
        storm = _Storm(active=bool(rng.random() < cfg.storm_prob))
        if storm.active:
            storm.center_s = day_start + rng.uniform(0.0, 24.0) * 3600.0
            storm.width_s = rng.uniform(2.0, 5.0) * 3600.0
            storm.amplitude = rng.uniform(0.5, 1.0)
        # per-day airport efficiency scaling of the congestion response
        day_factor = float(rng.uniform(0.25, 2.0))
        waves = _DisruptionWaves(rng, day_start, [a.code for a in cfg.airports])

        # arrival schedule: uniform base plus banks every two hours
        n = cfg.flights_per_day
        n_bank = (3 * n) // 5
        base = rng.uniform(SCHEDULE_START_MIN, SCHEDULE_END_MIN, size=n - n_bank)
        bank_centers = np.arange(SCHEDULE_START_MIN + 60, SCHEDULE_END_MIN - 30, 120)
        picks = rng.integers(0, bank_centers.size, size=n_bank)
        banked = bank_centers[picks] + rng.normal(0.0, 10.0, size=n_bank)
        sched_min = np.mod(np.concatenate([base, banked]),
                           float(SCHEDULE_END_MIN))
        sched_min = np.sort(np.floor(sched_min).astype(np.int64))
        sched_arr = day_start + sched_min * 60

        bins = (sched_arr // 600) * 600
        uniq, counts = np.unique(bins, return_counts=True)
        bin_count = dict(zip(uniq.tolist(), counts.tolist()))

        origin_idx = rng.integers(0, len(origins), size=n)
        airline_idx = rng.integers(0, len(AIRLINES), size=n)
        tails = [tail_pool[i] for i in rng.permutation(n)]

        # idiosyncratic part of the departure disturbance; the shared part
        # comes from the origin's disruption waves at the departure time
        dep_noise = rng.normal(1.0, 2.0, size=n)
        arr_noise = rng.normal(-1.0, cfg.noise_std_min, size=n)

        for i in range(n):
            origin = origins[origin_idx[i]]
            block_min = int(round(dist_km[origin.code] / cruise_kmh * 60.0)) + 12
            s_arr = int(sched_arr[i])
            s_dep = s_arr - block_min * 60
            d_dep = int(np.rint(np.clip(
                cfg.dep_disturbance_scale
                * (dep_noise[i] + waves.level(origin.code, s_dep)),
                -10.0, 180.0,
            )))
            prop_term = cfg.propagation_strength * d_dep
            cong_term = (cfg.congestion_sensitivity * day_factor
                         * max(0, bin_count[int(bins[i])] - 1))
            weather_term = cfg.storm_intensity_min * storm.badness(s_arr)
            noise_term = float(arr_noise[i])
            raw = prop_term + cong_term + weather_term + noise_term
            d_arr = int(np.rint(raw))
            floor = d_dep - block_min + 10
            clamped = d_arr < floor
            if clamped:
                d_arr = floor
            a_dep = s_dep + d_dep * 60
            a_arr = s_arr + d_arr * 60

            fid = f"F{day:02d}A{i:04d}"
            tail = tails[i]
            flight_rows.append([
                fid, tail, origin.code, hub.code, AIRLINES[airline_idx[i]],
                format_ts(s_dep), format_ts(s_arr), format_ts(a_dep), format_ts(a_arr),
            ])
            truth_flights.append({
                "flight_id": fid, "tail_id": tail, "day": day,
                "dep_delay_min": d_dep,
                "day_factor": day_factor,
                "terms": {
                    "propagation": prop_term,
                    "congestion": cong_term,
                    "weather": weather_term,
                    "noise": noise_term,
                },
                "clamped": bool(clamped),
                "arr_delay_min": d_arr,
            })

            _emit_trajectory(
                traj_lines, rng, origin, hub, tail, model_of_tail[tail],
                a_dep, a_arr, dist_km[origin.code],
            )

        # hub departures: ground-side traffic only, no trajectories
        dep_min = np.sort(rng.integers(SCHEDULE_START_MIN, SCHEDULE_END_MIN, size=n_dep))
        out_dest = rng.integers(0, len(origins), size=n_dep)
        out_airline = rng.integers(0, len(AIRLINES), size=n_dep)
        out_noise = rng.normal(1.0, 2.0, size=n_dep)
        for j in range(n_dep):
            s_dep = int(day_start + dep_min[j] * 60)
            dest = origins[out_dest[j]]
            block_min = int(round(dist_km[dest.code] / cruise_kmh * 60.0)) + 12
            wx = cfg.storm_intensity_min * storm.badness(s_dep) * 0.5
            d_dep = int(np.rint(np.clip(
                cfg.dep_disturbance_scale
                * (out_noise[j] + waves.level(hub.code, s_dep)) + wx,
                -10.0, 240.0,
            )))
            s_arr = s_dep + block_min * 60
            flight_rows.append([
                f"F{day:02d}D{j:04d}", f"D{j:04d}", hub.code, dest.code,
                AIRLINES[out_airline[j]],
                format_ts(s_dep), format_ts(s_arr),
                format_ts(s_dep + d_dep * 60), format_ts(s_arr + d_dep * 60),
            ])

        _emit_weather(weather_rows, rng, cfg, day_start, storm)

    paths = {
        "flights": out_dir / "flights.csv",
        "trajectories": out_dir / "trajectories.csv",
        "weather": out_dir / "weather.csv",
        "atc": out_dir / "atc.csv",
        "ground_truth": out_dir / "ground_truth.json",
    }

    with open(paths["flights"], "w", encoding="utf-8", newline="") as fh:
        fh.write("flight_id,tail_id,origin,dest,airline,sched_dep,sched_arr,actual_dep,actual_arr\n")
        for row in flight_rows:
            fh.write(",".join(row) + "\n")

    with open(paths["trajectories"], "w", encoding="utf-8", newline="") as fh:
        fh.write("tail_id,ts,lat,lon,alt_ft,speed_kt,track_deg,model\n")
        fh.writelines(traj_lines)

    with open(paths["weather"], "w", encoding="utf-8", newline="") as fh:
        fh.write("station,ts,temp_c,precip_mm,humidity_pct,wind_speed_kt,wind_dir_deg,sky_condition\n")
        for row in weather_rows:
            fh.write(",".join(row) + "\n")

    atc = _atc_rows(cfg)
    with open(paths["atc"], "w", encoding="utf-8", newline="") as fh:
        fh.write("facility_id,lat,lon,staffing,controller_training_time_hr\n")
        for row in atc:
            fh.write(",".join(row) + "\n")

    truth = {
        "config": cfg.to_dict(),
        "generative_rule": (
            "arr_delay = round(propagation*dep_delay"
            " + congestion*day_factor*max(0, bin_count-1)"
            " + storm_intensity*badness + noise), clamped so airborne time stays"
            " >= 10 minutes"
        ),
        "flights": truth_flights,
    }
    with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


def _emit_trajectory(
    lines: List[str], rng: np.random.Generator,
    origin: Airport, hub: Airport, tail: str, model: str,
    a_dep: int, a_arr: int, route_km: float,
) -> None:
    airborne_s = a_arr - a_dep
    if airborne_s <= 0:
        return
    ts = np.arange(a_dep, a_arr, TRAJ_SAMPLE_S, dtype=np.int64)
    if ts.size == 0 or ts[-1] != a_arr:
        ts = np.append(ts, a_arr)
    frac = (ts - a_dep) / airborne_s
    lat, lon = _great_circle_samples(origin, hub, frac)

    speed_kt = route_km / (airborne_s / 3600.0) / 1.852
    mins_from_dep = (ts - a_dep) / 60.0
    mins_to_arr = (a_arr - ts) / 60.0
    cruise_ft = 30000.0 + (sum(tail.encode()) % 5) * 2000.0
    alt = np.minimum(cruise_ft, np.minimum(2400.0 * mins_from_dep, 2300.0 * mins_to_arr))
    alt = np.maximum(alt, 0.0)

    track = np.zeros(ts.size)
    if ts.size > 1:
        track[:-1] = _bearing_deg(lat[:-1], lon[:-1], lat[1:], lon[1:])
        track[-1] = track[-2]

    drop_alt = rng.random(ts.size) < 0.005
    for k in range(ts.size):
        alt_s = "" if drop_alt[k] else f"{alt[k]:.0f}"
        lines.append(
            f"{tail},{format_ts(int(ts[k]))},{lat[k]:.5f},{lon[k]:.5f},"
            f"{alt_s},{speed_kt:.1f},{track[k]:.1f},{model}\n"
        )


def _emit_weather(
    rows: List[list], rng: np.random.Generator,
    cfg: ScenarioConfig, day_start: int, storm: _Storm,
) -> None:
    times = np.arange(day_start, day_start + 86400, 1800, dtype=np.int64)
    for ai, airport in enumerate(cfg.airports):
        is_hub = ai == 0
        for t in times:
            b = storm.badness(float(t)) if is_hub else 0.0
            hour = ((int(t) - day_start) / 3600.0)
            temp = 25.0 + 8.0 * math.sin(2 * math.pi * (hour - 9.0) / 24.0) \
                - 0.3 * ai + float(rng.normal(0.0, 0.8))
            precip = max(0.0, 12.0 * b + float(rng.normal(0.0, 5.0)))
            humidity = float(np.clip(55.0 + 35.0 * b + rng.normal(0.0, 12.0), 0.0, 100.0))
            wind = max(0.0, 8.0 + 12.0 * b + float(rng.normal(0.0, 6.0)))
            wind_dir = float(rng.uniform(0.0, 360.0))
            sky = _sky_condition(b + float(rng.normal(0.0, 0.05))) if is_hub else \
                ("SCT" if rng.random() < 0.4 else "CLR")
            vals = [f"{temp:.1f}", f"{precip:.2f}", f"{humidity:.1f}",
                    f"{wind:.1f}", f"{wind_dir:.1f}"]
            drop = rng.random(5) < 0.02
            vals = ["" if drop[k] else vals[k] for k in range(5)]
            rows.append([airport.code, format_ts(int(t))] + vals + [sky])


def _atc_rows(cfg: ScenarioConfig) -> List[list]:
    rng = np.random.default_rng(cfg.seed + 9001)
    hub = cfg.hub
    offsets = [(0.0, 0.0), (4.0, 5.0), (4.0, -5.0), (-4.0, 5.0), (-4.0, -5.0)]
    rows = []
    for k, (dlat, dlon) in enumerate(offsets):
        rows.append([
            f"Z{hub.code}{k}",
            f"{hub.lat + dlat:.4f}", f"{hub.lon + dlon:.4f}",
            str(int(rng.integers(15, 40))),
            f"{rng.uniform(100.0, 300.0):.1f}",
        ])
    return rows
