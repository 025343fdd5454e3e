"""Shared builders for the test suite."""
from __future__ import annotations

import math
from dataclasses import replace
from datetime import date
from functools import lru_cache

import numpy as np

from regram.encoding import FeaturePair
from regram.geo import M_PER_DEG_LAT
from regram.graph import NeighborContext
from regram.records import TransactionRecord

BASE_LAT, BASE_LON = 23.0, 120.5


def offset(north_m: float = 0.0, east_m: float = 0.0, lat0: float = BASE_LAT, lon0: float = BASE_LON):
    lat = lat0 + north_m / M_PER_DEG_LAT
    lon = lon0 + east_m / (M_PER_DEG_LAT * math.cos(math.radians(lat0)))
    return lat, lon


def make_record(id: str = "r0", north_m: float = 0.0, east_m: float = 0.0, **kw) -> TransactionRecord:
    lat, lon = offset(north_m, east_m)
    base = TransactionRecord(
        id=id,
        city="Testville",
        latitude=lat,
        longitude=lon,
        trade_date=date(2020, 6, 15),
        completion_date=date(2010, 3, 1),
        building_type="apartment",
        main_purpose="residential",
        small_house_flag=False,
        shop_flag=False,
        first_floor_flag=False,
        land_usage="residential",
        house_age=10.25,
        unit_price=4000.0,
        object_fields={"area_m2": 80.0, "rooms": 3.0},
        poi_counts={"school_500": 2.0},
        poi_min_dist={"school": 300.0},
    )
    return replace(base, **kw)


def random_features(rng: np.random.Generator, d_env: int, d_obj: int) -> FeaturePair:
    return FeaturePair(rng.normal(size=d_env), rng.normal(size=d_obj), float(rng.normal()))


def micro_instance(seed: int = 0, d_env: int = 6, d_obj: int = 5, n_targets: int = 4, n_nbrs: int = 3,
                   n_comms: int = 2, n_members: int = 3):
    """Targets whose every context slot is populated with standard-normal features."""
    rng = np.random.default_rng(seed)
    feats: dict[str, FeaturePair] = {}
    ctx: dict[str, NeighborContext] = {}

    def new(name: str) -> str:
        feats[name] = random_features(rng, d_env, d_obj)
        return name

    for t in range(n_targets):
        tid = new(f"t{t}")
        nbrs = [new(f"t{t}n{j}") for j in range(n_nbrs)]
        cids = [f"t{t}c{c}" for c in range(n_comms)]
        members = {c: [new(f"{c}m{m}") for m in range(n_members)] for c in cids}
        ctx[tid] = NeighborContext(tid, nbrs, cids, members)
    return feats, ctx


@lru_cache(maxsize=None)
def synthetic(seed: int = 0, **overrides):
    """Generated records and latent truth, cached per argument set."""
    from regram.synth import SynthConfig, generate

    return generate(SynthConfig(seed=seed, **overrides))


@lru_cache(maxsize=None)
def small_dataset(seed: int = 0):
    """One small synthetic city prepared for training with a tiny model config."""
    from regram.training import TrainConfig, prepare_city

    records, latent = synthetic(seed, n_cities=1, buildings_per_city=80)
    cfg = TrainConfig(d_m=8, n_kernels=2, n_heads=2, epochs=3, batch_size=32, seed=seed)
    return prepare_city(records, sorted(latent.cities)[0], cfg), cfg
