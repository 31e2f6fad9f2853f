"""Typed CSV ingestion for the four data sources (flights, trajectories,
weather, ATC facilities) plus UTC normalization.

Schemas are fixed; timestamps are ISO-8601 ``YYYY-MM-DDTHH:MM:SSZ`` and are
stored internally as integer seconds since the Unix epoch so that bin and
window arithmetic is exact.  Missing values are empty cells; the sentinels
``NA`` and ``-`` are also accepted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, TypeVar

from .geo import GeoPoint, normalize_lon

FLIGHTS_COLUMNS = [
    "flight_id", "tail_id", "origin", "dest", "airline",
    "sched_dep", "sched_arr", "actual_dep", "actual_arr",
]
TRAJECTORIES_COLUMNS = ["tail_id", "ts", "lat", "lon", "alt_ft", "speed_kt", "track_deg", "model"]
WEATHER_COLUMNS = [
    "station", "ts", "temp_c", "precip_mm", "humidity_pct",
    "wind_speed_kt", "wind_dir_deg", "sky_condition",
]
ATC_COLUMNS = ["facility_id", "lat", "lon", "staffing", "controller_training_time_hr"]

MISSING_SENTINELS = {"", "NA", "-"}

MAX_TZ_OFFSET_MIN = 14 * 60


class SchemaError(ValueError):
    """Header of an input CSV does not match the documented schema."""


@dataclass(frozen=True)
class FlightRecord:
    flight_id: str
    tail_id: str
    origin: str
    dest: str
    airline: str
    sched_dep: Optional[int]
    sched_arr: Optional[int]
    actual_dep: Optional[int]
    actual_arr: Optional[int]
    dep_delay_min: Optional[float]
    arr_delay_min: Optional[float]


@dataclass(frozen=True)
class TrajectoryPoint:
    tail_id: str
    ts: int
    pos: GeoPoint
    alt_ft: Optional[float]
    speed_kt: Optional[float]
    track_deg: Optional[float]
    model: Optional[str]


@dataclass(frozen=True)
class WeatherRecord:
    station: str
    ts: int
    temp_c: Optional[float]
    precip_mm: Optional[float]
    humidity_pct: Optional[float]
    wind_speed_kt: Optional[float]
    wind_dir_deg: Optional[float]
    sky_condition: Optional[str]


@dataclass(frozen=True)
class AtcRecord:
    facility_id: str
    centroid: GeoPoint
    staffing: int
    controller_training_time_hr: float


@dataclass(frozen=True)
class RejectedRow:
    line_no: int
    reason: str
    raw: Tuple[str, ...]


@dataclass
class ParseResult:
    """Accepted records plus the reject report; counts always add up to the
    number of input rows."""

    records: list
    rejects: List[RejectedRow]


def parse_ts(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
    return int(dt.replace(tzinfo=timezone.utc).timestamp())


def format_ts(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _opt(text: str) -> Optional[str]:
    return None if text.strip() in MISSING_SENTINELS else text.strip()


def _opt_float(text: str, field: str) -> Optional[float]:
    raw = _opt(text)
    if raw is None:
        return None
    v = float(raw)
    if not math.isfinite(v):
        raise ValueError(f"non-finite {field}: {raw}")
    return v


def _opt_ts(text: str) -> Optional[int]:
    raw = _opt(text)
    return None if raw is None else parse_ts(raw)


def _check_header(header: Sequence[str], expected: Sequence[str], path) -> None:
    got = [h.strip() for h in header]
    missing = [c for c in expected if c not in got]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")
    if got != list(expected):
        raise SchemaError(f"{path}: header {got} does not match schema {list(expected)}")


def _read_rows(path, expected: Sequence[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {list(expected)}")
        _check_header(header, expected, path)
        for line_no, row in enumerate(reader, start=2):
            yield line_no, row


def parse_flights(path) -> ParseResult:
    """Parse flights.csv; accepted records are sorted by actual arrival time.

    Departure/arrival delay minutes are derived from the scheduled and actual
    timestamps.  Malformed rows land in the reject report instead of being
    silently dropped.
    """
    records: List[FlightRecord] = []
    rejects: List[RejectedRow] = []
    for line_no, row in _read_rows(path, FLIGHTS_COLUMNS):
        try:
            if len(row) != len(FLIGHTS_COLUMNS):
                raise ValueError(f"expected {len(FLIGHTS_COLUMNS)} fields, got {len(row)}")
            sched_dep = _opt_ts(row[5])
            sched_arr = _opt_ts(row[6])
            actual_dep = _opt_ts(row[7])
            actual_arr = _opt_ts(row[8])
            if actual_dep is not None and actual_arr is not None and actual_arr < actual_dep:
                raise ValueError("actual_arr precedes actual_dep")
            dep_delay = (
                (actual_dep - sched_dep) / 60.0
                if actual_dep is not None and sched_dep is not None else None
            )
            arr_delay = (
                (actual_arr - sched_arr) / 60.0
                if actual_arr is not None and sched_arr is not None else None
            )
            records.append(FlightRecord(
                flight_id=row[0].strip(), tail_id=row[1].strip(),
                origin=row[2].strip(), dest=row[3].strip(), airline=row[4].strip(),
                sched_dep=sched_dep, sched_arr=sched_arr,
                actual_dep=actual_dep, actual_arr=actual_arr,
                dep_delay_min=dep_delay, arr_delay_min=arr_delay,
            ))
        except ValueError as exc:
            rejects.append(RejectedRow(line_no, str(exc), tuple(row)))
    records.sort(key=lambda r: (r.actual_arr is None, r.actual_arr or 0, r.sched_arr or 0, r.flight_id))
    return ParseResult(records, rejects)


def parse_trajectories(path) -> ParseResult:
    """Parse trajectories.csv; accepted points are sorted by timestamp."""
    records: List[TrajectoryPoint] = []
    rejects: List[RejectedRow] = []
    for line_no, row in _read_rows(path, TRAJECTORIES_COLUMNS):
        try:
            if len(row) != len(TRAJECTORIES_COLUMNS):
                raise ValueError(f"expected {len(TRAJECTORIES_COLUMNS)} fields, got {len(row)}")
            ts_raw = _opt(row[1])
            if ts_raw is None:
                raise ValueError("missing timestamp")
            lat = _opt_float(row[2], "lat")
            lon = _opt_float(row[3], "lon")
            if lat is None or lon is None:
                raise ValueError("missing position")
            speed = _opt_float(row[5], "speed_kt")
            if speed is not None and speed < 0:
                raise ValueError(f"negative speed: {speed}")
            track = _opt_float(row[6], "track_deg")
            if track is not None and not 0.0 <= track < 360.0:
                raise ValueError(f"track_deg out of [0, 360): {track}")
            records.append(TrajectoryPoint(
                tail_id=row[0].strip(), ts=parse_ts(ts_raw),
                pos=GeoPoint(lat, normalize_lon(lon)),
                alt_ft=_opt_float(row[4], "alt_ft"),
                speed_kt=speed, track_deg=track, model=_opt(row[7]),
            ))
        except ValueError as exc:
            rejects.append(RejectedRow(line_no, str(exc), tuple(row)))
    records.sort(key=lambda p: (p.ts, p.tail_id))
    return ParseResult(records, rejects)


def parse_weather(path) -> ParseResult:
    """Parse weather.csv; accepted records are sorted by timestamp."""
    records: List[WeatherRecord] = []
    rejects: List[RejectedRow] = []
    for line_no, row in _read_rows(path, WEATHER_COLUMNS):
        try:
            if len(row) != len(WEATHER_COLUMNS):
                raise ValueError(f"expected {len(WEATHER_COLUMNS)} fields, got {len(row)}")
            ts_raw = _opt(row[1])
            if ts_raw is None:
                raise ValueError("missing timestamp")
            humidity = _opt_float(row[4], "humidity_pct")
            if humidity is not None and not 0.0 <= humidity <= 100.0:
                raise ValueError(f"humidity_pct out of [0, 100]: {humidity}")
            wind_dir = _opt_float(row[6], "wind_dir_deg")
            if wind_dir is not None and not 0.0 <= wind_dir < 360.0:
                raise ValueError(f"wind_dir_deg out of [0, 360): {wind_dir}")
            records.append(WeatherRecord(
                station=row[0].strip(), ts=parse_ts(ts_raw),
                temp_c=_opt_float(row[2], "temp_c"),
                precip_mm=_opt_float(row[3], "precip_mm"),
                humidity_pct=humidity,
                wind_speed_kt=_opt_float(row[5], "wind_speed_kt"),
                wind_dir_deg=wind_dir,
                sky_condition=_opt(row[7]),
            ))
        except ValueError as exc:
            rejects.append(RejectedRow(line_no, str(exc), tuple(row)))
    records.sort(key=lambda r: (r.ts, r.station))
    return ParseResult(records, rejects)


def parse_atc(path) -> ParseResult:
    """Parse atc.csv (static facility table, no timestamps)."""
    records: List[AtcRecord] = []
    rejects: List[RejectedRow] = []
    for line_no, row in _read_rows(path, ATC_COLUMNS):
        try:
            if len(row) != len(ATC_COLUMNS):
                raise ValueError(f"expected {len(ATC_COLUMNS)} fields, got {len(row)}")
            lat = _opt_float(row[1], "lat")
            lon = _opt_float(row[2], "lon")
            if lat is None or lon is None:
                raise ValueError("missing centroid")
            staffing_raw = _opt(row[3])
            if staffing_raw is None:
                raise ValueError("missing staffing")
            staffing = int(staffing_raw)
            if staffing < 0:
                raise ValueError(f"negative staffing: {staffing}")
            training = _opt_float(row[4], "controller_training_time_hr")
            if training is None or training < 0:
                raise ValueError(f"bad controller_training_time_hr: {row[4]}")
            records.append(AtcRecord(
                facility_id=row[0].strip(),
                centroid=GeoPoint(lat, normalize_lon(lon)),
                staffing=staffing,
                controller_training_time_hr=training,
            ))
        except ValueError as exc:
            rejects.append(RejectedRow(line_no, str(exc), tuple(row)))
    return ParseResult(records, rejects)


R = TypeVar("R")


def normalize_to_utc(records: Sequence[R], source_tz_offset_min: int) -> List[R]:
    """Shift every timestamp by -offset so local times become UTC.

    A record taken at local 10:00 in a UTC-5 zone (offset -300) becomes 15:00
    UTC.  Identity when the offset is 0.
    """
    if not -MAX_TZ_OFFSET_MIN <= source_tz_offset_min <= MAX_TZ_OFFSET_MIN:
        raise ValueError(f"tz offset out of range: {source_tz_offset_min} minutes")
    shift = -source_tz_offset_min * 60
    if shift == 0:
        return list(records)
    out: List[R] = []
    for rec in records:
        if isinstance(rec, FlightRecord):
            out.append(replace(
                rec,
                sched_dep=None if rec.sched_dep is None else rec.sched_dep + shift,
                sched_arr=None if rec.sched_arr is None else rec.sched_arr + shift,
                actual_dep=None if rec.actual_dep is None else rec.actual_dep + shift,
                actual_arr=None if rec.actual_arr is None else rec.actual_arr + shift,
            ))
        elif isinstance(rec, (TrajectoryPoint, WeatherRecord)):
            out.append(replace(rec, ts=rec.ts + shift))
        elif isinstance(rec, AtcRecord):
            out.append(rec)
        else:
            raise TypeError(f"cannot normalize record of type {type(rec).__name__}")
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_flights(path, records: Sequence[FlightRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FLIGHTS_COLUMNS)
        for r in records:
            w.writerow([
                r.flight_id, r.tail_id, r.origin, r.dest, r.airline,
                "" if r.sched_dep is None else format_ts(r.sched_dep),
                "" if r.sched_arr is None else format_ts(r.sched_arr),
                "" if r.actual_dep is None else format_ts(r.actual_dep),
                "" if r.actual_arr is None else format_ts(r.actual_arr),
            ])


def write_trajectories(path, records: Sequence[TrajectoryPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORIES_COLUMNS)
        for p in records:
            w.writerow([
                p.tail_id, format_ts(p.ts), _fmt(p.pos.lat_deg), _fmt(p.pos.lon_deg),
                _fmt(p.alt_ft), _fmt(p.speed_kt), _fmt(p.track_deg), _fmt(p.model),
            ])


def write_weather(path, records: Sequence[WeatherRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(WEATHER_COLUMNS)
        for r in records:
            w.writerow([
                r.station, format_ts(r.ts), _fmt(r.temp_c), _fmt(r.precip_mm),
                _fmt(r.humidity_pct), _fmt(r.wind_speed_kt), _fmt(r.wind_dir_deg),
                _fmt(r.sky_condition),
            ])


def write_atc(path, records: Sequence[AtcRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ATC_COLUMNS)
        for r in records:
            w.writerow([
                r.facility_id, _fmt(r.centroid.lat_deg), _fmt(r.centroid.lon_deg),
                r.staffing, _fmt(r.controller_training_time_hr),
            ])


def write_rejects(path, rejects: Sequence[RejectedRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["line_no", "reason", "raw"])
        for r in rejects:
            w.writerow([r.line_no, r.reason, ",".join(r.raw)])


def load_dir(directory) -> dict:
    """Parse all four CSVs from a scenario directory; raises FileNotFoundError
    for missing files."""
    directory = Path(directory)
    out = {}
    for name, parser in (
        ("flights", parse_flights),
        ("trajectories", parse_trajectories),
        ("weather", parse_weather),
        ("atc", parse_atc),
    ):
        path = directory / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing input file: {path}")
        out[name] = parser(path)
    return out
