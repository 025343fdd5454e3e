"""Synthetic city-scale transaction data with a known pricing oracle.

Each city gets a latent log-price field made of Gaussian radial bumps: a
few wide ones (district-level variation, partly recoverable from
coordinates and PoI density) and many narrow ones (block-level variation that
mostly only nearby past prices reveal). Buildings come in spatial clusters
sharing a completion month, so same-month communities arise naturally.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta

import numpy as np

from .geo import M_PER_DEG_LAT, distance_many
from .records import TransactionRecord

CITY_NAMES = ("Northport", "Riverton", "Lakeside", "Hillcrest", "Baymouth", "Eastvale")
POI_CATEGORIES = ("school", "hospital", "station", "park", "market", "bank")
POI_RADII_M = (500, 1000, 3000)
BUILDING_TYPES = ("apartment", "condo", "studio", "townhouse")
BUILDING_TYPE_WEIGHTS = (0.45, 0.3, 0.15, 0.1)
PURPOSES = ("residential", "commercial", "mixed", "office", "industrial", "parking")
PURPOSE_WEIGHTS = (0.7, 0.1, 0.1, 0.05, 0.03, 0.02)
LAND_USAGES = ("residential", "commercial", "mixed", "industrial")
LAND_USAGE_WEIGHTS = (0.6, 0.2, 0.15, 0.05)


@dataclass
class SynthConfig:
    seed: int = 0
    n_cities: int = 3
    buildings_per_city: int = 300
    txn_per_building: float = 4.0  # Poisson mean; every building trades at least once
    buildings_per_cluster: float = 3.0
    start_date: str = "2019-07-01"
    end_date: str = "2021-06-30"
    completion_start: str = "1985-01"
    city_radius_m: float = 6000.0
    cluster_spread_m: float = 60.0
    base_prices: tuple[float, ...] = (5000.0, 4000.0, 3000.0)
    field_amplitude: float = 0.3
    field_length_m: float = 2500.0
    n_field_bumps: int = 12
    # block-scale bumps: the component only nearby prices reveal
    neighbor_amplitude: float = 0.25
    neighbor_length_m: float = 300.0
    n_neighbor_bumps: int = 400
    depreciation: float = 0.015
    coefficients: dict[str, float] = field(
        default_factory=lambda: {"area_m2": -0.001, "rooms": 0.02, "floor": 0.005, "total_floors": 0.002}
    )
    noise_std: float = 80.0
    poi_sites_per_category: int = 15

    def __post_init__(self):
        for name in ("n_cities", "buildings_per_city", "txn_per_building", "buildings_per_cluster",
                     "city_radius_m", "field_length_m", "neighbor_length_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0 or self.depreciation < 0:
            raise ValueError("noise_std and depreciation must be non-negative")
        if any(p <= 0 for p in self.base_prices) or not self.base_prices:
            raise ValueError("base prices must be positive")
        self.base_prices = tuple(self.base_prices)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class CityLatent:
    name: str
    code: str
    base_price: float
    center: tuple[float, float]
    bumps: np.ndarray  # (n, 4): lat, lon, amplitude, length scale in meters
    poi_sites: dict[str, np.ndarray]  # category -> (n, 2) lat/lon

    def spatial_field(self, lat: float, lon: float) -> float:
        if self.bumps.size == 0:
            return 0.0
        d = distance_many(lat, lon, self.bumps[:, 0], self.bumps[:, 1])
        return float(np.sum(self.bumps[:, 2] * np.exp(-0.5 * (d / self.bumps[:, 3]) ** 2)))


@dataclass
class LatentTruth:
    config: SynthConfig
    cities: dict[str, CityLatent]

    def to_json(self) -> str:
        cfg = asdict(self.config)
        cfg["base_prices"] = list(cfg["base_prices"])
        return json.dumps(
            {
                "config": cfg,
                "cities": {
                    k: {
                        "code": c.code,
                        "base_price": c.base_price,
                        "center": list(c.center),
                        "bumps": c.bumps.tolist(),
                        "poi_sites": {p: s.tolist() for p, s in c.poi_sites.items()},
                    }
                    for k, c in self.cities.items()
                },
            },
            sort_keys=True,
            indent=1,
        )


def _offset(center: tuple[float, float], north_m, east_m) -> tuple[np.ndarray, np.ndarray]:
    lat = center[0] + np.asarray(north_m) / M_PER_DEG_LAT
    lon = center[1] + np.asarray(east_m) / (M_PER_DEG_LAT * math.cos(math.radians(center[0])))
    return lat, lon


def _disc(rng: np.random.Generator, n: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0, 2 * np.pi, size=n)
    return r * np.cos(th), r * np.sin(th)


def oracle_price(rec: TransactionRecord, latent: LatentTruth, rng: np.random.Generator | None = None) -> float:
    """Latent unit price of ``rec``; with ``rng``, plus Gaussian noise resampled until positive."""
    cfg = latent.config
    city = latent.cities[rec.city]
    linear = 1.0 + sum(c * rec.object_fields.get(k, 0.0) for k, c in cfg.coefficients.items())
    mean = (
        city.base_price
        * math.exp(city.spatial_field(rec.latitude, rec.longitude))
        * math.exp(-cfg.depreciation * rec.house_age)
        * linear
    )
    if rng is None or cfg.noise_std == 0:
        return mean
    while True:
        p = mean + rng.normal(0.0, cfg.noise_std)
        if p > 0:
            return p


def _city_latent(cfg: SynthConfig, k: int, rng: np.random.Generator) -> CityLatent:
    name = CITY_NAMES[k % len(CITY_NAMES)] + ("" if k < len(CITY_NAMES) else str(k))
    center = (23.0 + 0.5 * k, 120.5 + 0.3 * k)
    bumps = []
    for n, amp, length in (
        (cfg.n_field_bumps, cfg.field_amplitude, cfg.field_length_m),
        (cfg.n_neighbor_bumps, cfg.neighbor_amplitude, cfg.neighbor_length_m),
    ):
        north, east = _disc(rng, n, cfg.city_radius_m * 1.1)
        lat, lon = _offset(center, north, east)
        a = rng.uniform(-amp, amp, size=n)
        bumps.append(np.column_stack([lat, lon, a, np.full(n, length)]))
    sites = {}
    for cat in POI_CATEGORIES:
        north, east = _disc(rng, cfg.poi_sites_per_category, cfg.city_radius_m * 1.2)
        lat, lon = _offset(center, north, east)
        sites[cat] = np.column_stack([lat, lon])
    return CityLatent(
        name=name,
        code=f"C{k}",
        base_price=float(cfg.base_prices[k % len(cfg.base_prices)]),
        center=center,
        bumps=np.vstack(bumps),
        poi_sites=sites,
    )


def _month_from_index(idx: int) -> date:
    return date(idx // 12, idx % 12 + 1, 1)


def _generate_city(cfg: SynthConfig, latent_city: CityLatent, latent: LatentTruth, rng: np.random.Generator):
    start = date.fromisoformat(cfg.start_date)
    end = date.fromisoformat(cfg.end_date)
    y0, m0 = (int(x) for x in cfg.completion_start.split("-"))
    comp_lo = y0 * 12 + m0 - 1
    comp_hi = end.year * 12 + end.month - 1 - 3  # leave at least a quarter to trade
    n_clusters = max(1, int(round(cfg.buildings_per_city / cfg.buildings_per_cluster)))
    c_north, c_east = _disc(rng, n_clusters, cfg.city_radius_m)
    c_month = rng.integers(comp_lo, comp_hi + 1, size=n_clusters)
    c_land = rng.choice(len(LAND_USAGES), size=n_clusters, p=LAND_USAGE_WEIGHTS)

    records = []
    serial = 0
    for b in range(cfg.buildings_per_city):
        cl = b % n_clusters if b < n_clusters else int(rng.integers(n_clusters))
        north = c_north[cl] + rng.normal(0, cfg.cluster_spread_m)
        east = c_east[cl] + rng.normal(0, cfg.cluster_spread_m)
        lat, lon = (float(v) for v in _offset(latent_city.center, north, east))
        completion = _month_from_index(int(c_month[cl]))
        btype = BUILDING_TYPES[rng.choice(len(BUILDING_TYPES), p=BUILDING_TYPE_WEIGHTS)]
        purpose = PURPOSES[rng.choice(len(PURPOSES), p=PURPOSE_WEIGHTS)]
        total_floors = int({"apartment": rng.integers(5, 16), "condo": rng.integers(10, 31),
                            "studio": rng.integers(4, 13), "townhouse": rng.integers(2, 5)}[btype])
        poi_counts, poi_dist = {}, {}
        for cat, sites in latent_city.poi_sites.items():
            d = distance_many(lat, lon, sites[:, 0], sites[:, 1])
            for radius in POI_RADII_M:
                poi_counts[f"{cat}_{radius}"] = float(np.sum(d < radius))
            poi_dist[cat] = float(d.min())
        first_day = max(start, completion)
        span = (end - first_day).days
        n_txn = 1 + int(rng.poisson(cfg.txn_per_building - 1)) if cfg.txn_per_building > 1 else 1
        for _ in range(n_txn):
            trade = first_day + timedelta(days=int(rng.integers(0, span + 1)))
            floor = int(rng.integers(1, total_floors + 1))
            area = float(np.round(np.exp(rng.normal({"studio": 3.4, "townhouse": 4.9}.get(btype, 4.4), 0.3)), 1))
            rooms = float(max(1, min(6, int(round(area / 30 + rng.normal(0, 0.5))))))
            age = (trade - completion).days / 365.25
            rec = TransactionRecord(
                id=f"{latent_city.code}-{serial:06d}",
                city=latent_city.name,
                latitude=lat,
                longitude=lon,
                trade_date=trade,
                completion_date=completion,
                building_type=btype,
                main_purpose=purpose,
                small_house_flag=area < 40,
                shop_flag=purpose == "commercial" and floor == 1,
                first_floor_flag=floor == 1,
                land_usage=LAND_USAGES[c_land[cl]],
                house_age=age,
                unit_price=1.0,
                object_fields={"area_m2": area, "rooms": rooms, "floor": float(floor),
                               "total_floors": float(total_floors)},
                poi_counts=poi_counts,
                poi_min_dist=poi_dist,
            )
            price = oracle_price(rec, latent, rng)
            records.append(_with_price(rec, price))
            serial += 1
    return records


def _with_price(rec: TransactionRecord, price: float) -> TransactionRecord:
    return replace(rec, unit_price=float(price))


def generate(cfg: SynthConfig) -> tuple[list[TransactionRecord], LatentTruth]:
    """All cities' records (sorted by trade date, then id) and the latent truth behind them."""
    latent = LatentTruth(cfg, {})
    records = []
    for k in range(cfg.n_cities):
        rng = np.random.default_rng([cfg.seed, k])
        city = _city_latent(cfg, k, rng)
        latent.cities[city.name] = city
        records.extend(_generate_city(cfg, city, latent, rng))
    records.sort(key=lambda r: (r.trade_date, r.id))
    return records, latent
