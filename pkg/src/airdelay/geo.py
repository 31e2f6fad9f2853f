"""Great-circle geometry and the rectangular airspace-sector partition used
by the congestion features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Tuple

if TYPE_CHECKING:  # pragma: no cover
    from .ingest import TrajectoryPoint

EARTH_RADIUS_KM = 6371.0

TERMINAL_MAX_DIST_KM = 200.0
TERMINAL_ALT_BAND_FT = (1200.0, 10000.0)


@dataclass(frozen=True)
class GeoPoint:
    """A latitude/longitude pair in degrees, longitude normalized to (-180, 180]."""

    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        if not (math.isfinite(self.lat_deg) and math.isfinite(self.lon_deg)):
            raise ValueError(f"non-finite coordinate: ({self.lat_deg}, {self.lon_deg})")
        if not -90.0 <= self.lat_deg <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat_deg}")
        if not -180.0 < self.lon_deg <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon_deg}")


def normalize_lon(lon_deg: float) -> float:
    """Map any finite longitude into (-180, 180]."""
    if not math.isfinite(lon_deg):
        raise ValueError(f"non-finite longitude: {lon_deg}")
    lon = math.fmod(lon_deg, 360.0)
    if lon <= -180.0:
        lon += 360.0
    elif lon > 180.0:
        lon -= 360.0
    return lon


@dataclass(frozen=True)
class SectorGrid:
    """Equal-sized lat/lon sectors tiling the globe above ``floor_alt_ft``.

    Cells are half-open in both axes with origin at (-90, -180); the closing
    edges (lat 90, lon 180) fold into the last row/column so every valid
    point maps to exactly one cell.
    """

    cell_lat_deg: float
    cell_lon_deg: float
    floor_alt_ft: float = 18000.0

    def __post_init__(self):
        if self.cell_lat_deg <= 0 or self.cell_lon_deg <= 0:
            raise ValueError("cell sizes must be positive")
        for extent, cell in ((180.0, self.cell_lat_deg), (360.0, self.cell_lon_deg)):
            n = extent / cell
            if abs(n - round(n)) > 1e-9:
                raise ValueError(f"cell size {cell} does not evenly tile {extent} degrees")
        if self.floor_alt_ft <= 0:
            raise ValueError("floor_alt_ft must be positive")

    @property
    def n_rows(self) -> int:
        return round(180.0 / self.cell_lat_deg)

    @property
    def n_cols(self) -> int:
        return round(360.0 / self.cell_lon_deg)


def haversine_distance(a: GeoPoint, b: GeoPoint, earth_radius_km: float = EARTH_RADIUS_KM) -> float:
    """Great-circle distance in km between two points on a sphere."""
    if earth_radius_km <= 0:
        raise ValueError("earth radius must be positive")
    phi1 = math.radians(a.lat_deg)
    phi2 = math.radians(b.lat_deg)
    dphi = phi2 - phi1
    dpsi = math.radians(b.lon_deg - a.lon_deg)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dpsi / 2.0) ** 2
    # rounding can push s a hair outside [0, 1] for near-antipodal pairs
    s = min(1.0, max(0.0, s))
    return 2.0 * earth_radius_km * math.asin(math.sqrt(s))


def sector_index(p: GeoPoint, grid: SectorGrid) -> Tuple[int, int]:
    """Map a point to its (row, col) sector under the half-open grid convention."""
    row = int(math.floor((p.lat_deg + 90.0) / grid.cell_lat_deg))
    col = int(math.floor((p.lon_deg + 180.0) / grid.cell_lon_deg))
    row = min(row, grid.n_rows - 1)
    col = min(col, grid.n_cols - 1)
    return row, col


def in_terminal_airspace(
    p: "TrajectoryPoint",
    airport: GeoPoint,
    max_dist_km: float = TERMINAL_MAX_DIST_KM,
    alt_band_ft: Tuple[float, float] = TERMINAL_ALT_BAND_FT,
) -> bool:
    """True iff the point is strictly closer than ``max_dist_km`` to the airport
    and its altitude lies in the closed band.  Missing altitude counts as out."""
    if p.alt_ft is None:
        return False
    lo, hi = alt_band_ft
    if not lo <= p.alt_ft <= hi:
        return False
    return haversine_distance(p.pos, airport) < max_dist_km
