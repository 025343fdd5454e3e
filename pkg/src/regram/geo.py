"""Haversine distances and a fixed-cell grid for radius queries."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContractError

EARTH_RADIUS_M = 6_371_000.0
M_PER_DEG_LAT = math.pi * EARTH_RADIUS_M / 180.0
# Extra latitude used when sizing longitude cells; it keeps the cell wider than
# the query radius at every indexed latitude, so 3x3 cells always suffice.
_LAT_MARGIN_DEG = 0.01


def distance_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between two (lat, lon) pairs in degrees."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def distance_many(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized haversine from one point to many; matches :func:`distance_m`."""
    lat1, lon1 = math.radians(lat), math.radians(lon)
    lat2, lon2 = np.radians(lats), np.radians(lons)
    h = np.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass
class GridIndex:
    cell_m: float
    ref_lat: float
    cells: dict[tuple[int, int], list[str]] = field(default_factory=dict)
    coords: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def cell_lat_deg(self) -> float:
        return self.cell_m / M_PER_DEG_LAT

    @property
    def cell_lon_deg(self) -> float:
        c = math.cos(math.radians(min(89.9, abs(self.ref_lat) + _LAT_MARGIN_DEG)))
        return self.cell_m / (M_PER_DEG_LAT * c)

    def cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        return (math.floor(lat / self.cell_lat_deg), math.floor(lon / self.cell_lon_deg))

    def __len__(self) -> int:
        return len(self.coords)


def build_grid(records: Iterable, cell_m: float = 500.0) -> GridIndex:
    """Index anything with ``id``, ``latitude`` and ``longitude`` attributes."""
    if not cell_m > 0:
        raise ContractError("cell size must be positive")
    records = list(records)
    ref = max((abs(r.latitude) for r in records), default=0.0)
    index = GridIndex(cell_m=cell_m, ref_lat=ref)
    cells = defaultdict(list)
    for r in records:
        cells[index.cell_of(r.latitude, r.longitude)].append(r.id)
        index.coords[r.id] = (r.latitude, r.longitude)
    index.cells = {k: sorted(v) for k, v in sorted(cells.items())}
    return index


def radius_query(index: GridIndex, center: tuple[float, float], r: float, exclude: str | None = None) -> set[str]:
    """Ids strictly closer than ``r`` meters to ``center``.

    ``r`` may not exceed the index cell size; the 3x3 block of cells around
    the center is then guaranteed to cover the disc.
    """
    if r > index.cell_m:
        raise ContractError(f"radius {r} m exceeds grid cell size {index.cell_m} m")
    if abs(center[0]) > abs(index.ref_lat) + _LAT_MARGIN_DEG and index.coords:
        # outside the latitude band the cells were sized for; fall back to a scan
        candidates = list(index.coords)
    else:
        ci, cj = index.cell_of(*center)
        candidates = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                candidates.extend(index.cells.get((ci + di, cj + dj), ()))
    out = set()
    for i in candidates:
        if i != exclude and distance_m(center, index.coords[i]) < r:
            out.add(i)
    return out
