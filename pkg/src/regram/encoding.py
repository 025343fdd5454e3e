"""Per-city normalization and environment/object feature encoding.

Environment vector layout::

    [ PoI counts | PoI min distances | latitude, longitude, house_age ]  z-scored
    [ land_usage one-hot ]

Object vector layout::

    [ numeric object fields ]  z-scored
    [ building_type | main_purpose | small_house | shop | first_floor ]  one-hot blocks

Unseen categorical values encode to an all-zero block.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NormalizerError
from .records import OBJ_PREFIX, POI_COUNT_PREFIX, POI_DIST_PREFIX, TransactionRecord

STD_FLOOR = 1e-12
ENV_CATEGORICAL = ("land_usage",)
OBJ_CATEGORICAL = ("building_type", "main_purpose", "small_house_flag", "shop_flag", "first_floor_flag")
NORMALIZER_VERSION = 1


def _env_numeric(rec: TransactionRecord) -> dict[str, float]:
    out = {POI_COUNT_PREFIX + k: v for k, v in rec.poi_counts.items()}
    out.update({POI_DIST_PREFIX + k: v for k, v in rec.poi_min_dist.items()})
    out["latitude"] = rec.latitude
    out["longitude"] = rec.longitude
    out["house_age"] = rec.house_age
    return out


def _obj_numeric(rec: TransactionRecord) -> dict[str, float]:
    return {OBJ_PREFIX + k: v for k, v in rec.object_fields.items()}


def _category(rec: TransactionRecord, name: str) -> str:
    v = getattr(rec, name)
    if isinstance(v, bool):
        return "1" if v else "0"
    return v


@dataclass(frozen=True)
class FeaturePair:
    s_env: np.ndarray
    s_obj: np.ndarray
    p_norm: float


@dataclass
class Normalizer:
    city: str
    env_fields: list[str]
    env_mean: np.ndarray
    env_std: np.ndarray
    obj_fields: list[str]
    obj_mean: np.ndarray
    obj_std: np.ndarray
    categories: dict[str, list[str]]
    price_mean: float
    price_std: float

    @property
    def d_env(self) -> int:
        return len(self.env_fields) + sum(len(self.categories[c]) for c in ENV_CATEGORICAL)

    @property
    def d_obj(self) -> int:
        return len(self.obj_fields) + sum(len(self.categories[c]) for c in OBJ_CATEGORICAL)

    @property
    def poi_slice(self) -> slice:
        """Columns of the environment vector holding the z-scored PoI block."""
        n = sum(1 for f in self.env_fields if f.startswith((POI_COUNT_PREFIX, POI_DIST_PREFIX)))
        return slice(0, n)

    def decode_price(self, p_norm):
        return np.asarray(p_norm, dtype=np.float64) * self.price_std + self.price_mean

    def encode_price(self, price):
        return (np.asarray(price, dtype=np.float64) - self.price_mean) / self.price_std

    def to_dict(self) -> dict:
        return {
            "version": NORMALIZER_VERSION,
            "city": self.city,
            "env": [[f, float(m), float(s)] for f, m, s in zip(self.env_fields, self.env_mean, self.env_std)],
            "obj": [[f, float(m), float(s)] for f, m, s in zip(self.obj_fields, self.obj_mean, self.obj_std)],
            "categories": [[c, list(self.categories[c])] for c in ENV_CATEGORICAL + OBJ_CATEGORICAL],
            "price": [float(self.price_mean), float(self.price_std)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        if d.get("version") != NORMALIZER_VERSION:
            raise NormalizerError(f"unsupported normalizer version {d.get('version')!r}")
        env = d["env"]
        obj = d["obj"]
        return cls(
            city=d["city"],
            env_fields=[e[0] for e in env],
            env_mean=np.array([e[1] for e in env], dtype=np.float64),
            env_std=np.array([e[2] for e in env], dtype=np.float64),
            obj_fields=[o[0] for o in obj],
            obj_mean=np.array([o[1] for o in obj], dtype=np.float64),
            obj_std=np.array([o[2] for o in obj], dtype=np.float64),
            categories={c: list(v) for c, v in d["categories"]},
            price_mean=float(d["price"][0]),
            price_std=float(d["price"][1]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "Normalizer":
        return cls.from_dict(json.loads(s))


def _mean_std(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)  # population convention
    std = np.where(std < STD_FLOOR, 1.0, std)
    return mean, std


def fit_normalizer(train: Iterable[TransactionRecord], city: str) -> Normalizer:
    recs = [r for r in train if r.city == city]
    if not recs:
        raise NormalizerError(f"no training records for city {city!r}")
    env_fields = list(_env_numeric(recs[0]))
    obj_fields = list(_obj_numeric(recs[0]))
    env_rows = np.array([[_env_numeric(r)[f] for f in env_fields] for r in recs], dtype=np.float64)
    obj_rows = np.array([[_obj_numeric(r)[f] for f in obj_fields] for r in recs], dtype=np.float64)
    env_rows = env_rows.reshape(len(recs), len(env_fields))
    obj_rows = obj_rows.reshape(len(recs), len(obj_fields))
    env_mean, env_std = _mean_std(env_rows)
    obj_mean, obj_std = _mean_std(obj_rows)
    cats = {c: sorted({_category(r, c) for r in recs}) for c in ENV_CATEGORICAL + OBJ_CATEGORICAL}
    prices = np.array([r.unit_price for r in recs], dtype=np.float64)
    pm, ps = _mean_std(prices[:, None])
    return Normalizer(
        city=city,
        env_fields=env_fields,
        env_mean=env_mean,
        env_std=env_std,
        obj_fields=obj_fields,
        obj_mean=obj_mean,
        obj_std=obj_std,
        categories=cats,
        price_mean=float(pm[0]),
        price_std=float(ps[0]),
    )


def _one_hot(value: str, values: Sequence[str]) -> np.ndarray:
    out = np.zeros(len(values))
    i = bisect.bisect_left(values, value)  # values are sorted at fit time
    if i < len(values) and values[i] == value:
        out[i] = 1.0
    return out


def encode_features(rec: TransactionRecord, norm: Normalizer) -> FeaturePair:
    if rec.city != norm.city:
        raise NormalizerError(f"normalizer fitted for {norm.city!r}, record {rec.id!r} is in {rec.city!r}")
    env_num = _env_numeric(rec)
    obj_num = _obj_numeric(rec)
    try:
        env_raw = np.array([env_num[f] for f in norm.env_fields], dtype=np.float64)
        obj_raw = np.array([obj_num[f] for f in norm.obj_fields], dtype=np.float64)
    except KeyError as exc:
        raise NormalizerError(f"record {rec.id!r} lacks field {exc.args[0]!r}") from None
    s_env = np.concatenate(
        [(env_raw - norm.env_mean) / norm.env_std]
        + [_one_hot(_category(rec, c), norm.categories[c]) for c in ENV_CATEGORICAL]
    )
    s_obj = np.concatenate(
        [(obj_raw - norm.obj_mean) / norm.obj_std]
        + [_one_hot(_category(rec, c), norm.categories[c]) for c in OBJ_CATEGORICAL]
    )
    s_env.flags.writeable = False
    s_obj.flags.writeable = False
    return FeaturePair(s_env, s_obj, float(norm.encode_price(rec.unit_price)))


def encode_all(records: Iterable[TransactionRecord], norm: Normalizer) -> dict[str, FeaturePair]:
    return {r.id: encode_features(r, norm) for r in records}
