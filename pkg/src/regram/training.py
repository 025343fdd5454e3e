"""Chronological splitting, per-city dataset assembly and the training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import AdamState, Tape, adam_step, ops
from .encoding import FeaturePair, Normalizer, encode_all, fit_normalizer
from .errors import ContractError, NonFiniteError, SplitError, TrainingError
from .graph import GraphBundle, NeighborContext, build_bundle, neighbor_context
from .model import ModelConfig, ModelParams, build_batch, forward_batch
from .records import TransactionRecord

log = logging.getLogger(__name__)

PHASES = ("train", "val", "test")


@dataclass
class TrainConfig:
    d_m: int = 256
    n_kernels: int = 8
    n_heads: int = 8
    tau: float = 30.0
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    neighbor_cap: int = 64
    window_months: int = 2
    use_price: bool = True
    use_relation: bool = True
    use_community: bool = True
    val_months: int = 3
    test_months: int = 3
    val_start: date | None = None
    test_start: date | None = None

    def __post_init__(self):
        for name in ("d_m", "n_kernels", "n_heads", "batch_size", "epochs", "neighbor_cap", "window_months",
                     "val_months", "test_months"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if not self.tau > 0 or self.lr < 0:
            raise ContractError("tau must be positive and lr non-negative")

    def model_config(self, d_env: int, d_obj: int) -> ModelConfig:
        return ModelConfig(
            d_env=d_env, d_obj=d_obj, d_m=self.d_m, n_kernels=self.n_kernels, n_heads=self.n_heads,
            tau=self.tau, use_price=self.use_price, use_relation=self.use_relation,
            use_community=self.use_community,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("val_start", "test_start"):
            d[k] = d[k].isoformat() if d[k] else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("val_start", "test_start"):
            if d.get(k):
                d[k] = date.fromisoformat(d[k])
        return cls(**d)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_mape: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def _month_index(d: date) -> int:
    return d.year * 12 + d.month - 1


def _month_start(idx: int) -> date:
    return date(idx // 12, idx % 12 + 1, 1)


def split_boundaries(records: Iterable[TransactionRecord], val_months: int = 3, test_months: int = 3) -> tuple[date, date]:
    """First day of the validation window and of the test window."""
    months = [_month_index(r.trade_date) for r in records]
    if not months:
        raise SplitError("no records to split")
    lo, hi = min(months), max(months)
    if hi - lo + 1 <= val_months + test_months:
        raise SplitError(
            f"records span {hi - lo + 1} month(s); need more than {val_months + test_months}"
        )
    test_start = hi - test_months + 1
    return _month_start(test_start - val_months), _month_start(test_start)


def chronological_split(
    records: Sequence[TransactionRecord], val_months: int = 3, test_months: int = 3,
    boundaries: tuple[date, date] | None = None,
) -> tuple[list[TransactionRecord], list[TransactionRecord], list[TransactionRecord]]:
    val_start, test_start = boundaries or split_boundaries(records, val_months, test_months)
    train = [r for r in records if r.trade_date < val_start]
    val = [r for r in records if val_start <= r.trade_date < test_start]
    test = [r for r in records if r.trade_date >= test_start]
    return train, val, test


def mse_loss(preds, truths) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ContractError(f"mse_loss: {preds.shape} predictions vs {truths.shape} truths")
    if preds.size == 0:
        raise ContractError("mse_loss of nothing")
    return float(np.mean((preds - truths) ** 2))


@dataclass
class CityDataset:
    """Everything one city's model needs: encoded features, splits, leakage-free contexts."""

    city: str
    normalizer: Normalizer
    records: dict[str, TransactionRecord]
    features: dict[str, FeaturePair]
    splits: dict[str, list[str]]
    bundles: dict[str, GraphBundle]
    contexts: dict[str, NeighborContext]

    def history_for(self, phase: str) -> set[str]:
        if phase == "train":
            return set(self.splits["train"])
        if phase == "val":
            return set(self.splits["train"])
        return set(self.splits["train"]) | set(self.splits["val"])

    def phase_of(self, rid: str) -> str:
        for p in PHASES:
            if rid in self._phase_sets[p]:
                return p
        raise KeyError(rid)

    def __post_init__(self):
        self._phase_sets = {p: set(v) for p, v in self.splits.items()}


def _sorted(recs: Iterable[TransactionRecord]) -> list[TransactionRecord]:
    return sorted(recs, key=lambda r: (r.trade_date, r.id))


def phase_bundles(
    train: Sequence[TransactionRecord], val: Sequence[TransactionRecord], test: Sequence[TransactionRecord],
    features: Mapping[str, FeaturePair], normalizer: Normalizer,
) -> dict[str, GraphBundle]:
    """Graphs over the records visible at the end of each phase.

    The training graph never sees validation or test records, so neither
    transaction edges nor community structure can leak into training contexts.
    """
    poi = {i: f.s_env[normalizer.poi_slice] for i, f in features.items()}
    seen: list[TransactionRecord] = []
    out = {}
    for phase, recs in zip(PHASES, (train, val, test)):
        seen = seen + list(recs)
        out[phase] = build_bundle(seen, poi)
    return out


def prepare_city(
    records: Sequence[TransactionRecord],
    city: str,
    config: TrainConfig,
    boundaries: tuple[date, date] | None = None,
    bundles: Mapping[str, GraphBundle] | None = None,
) -> CityDataset:
    """Split, normalize, build phase graphs and per-target contexts for ``city``.

    ``boundaries`` default to the config's split dates or, failing those, to
    calendar-month boundaries computed from ``records``.
    """
    if boundaries is None:
        if config.val_start and config.test_start:
            boundaries = (config.val_start, config.test_start)
        else:
            boundaries = split_boundaries(records, config.val_months, config.test_months)
    city_recs = _sorted(r for r in records if r.city == city)
    train, val, test = chronological_split(city_recs, boundaries=boundaries)
    norm = fit_normalizer(train, city)
    features = encode_all(city_recs, norm)
    if bundles is None:
        bundles = phase_bundles(train, val, test, features, norm)
    by_id = {r.id: r for r in city_recs}
    splits = {"train": [r.id for r in train], "val": [r.id for r in val], "test": [r.id for r in test]}
    ds = CityDataset(city, norm, by_id, features, splits, dict(bundles), {})
    for phase in PHASES:
        hist = ds.history_for(phase)
        for rid in splits[phase]:
            ds.contexts[rid] = neighbor_context(
                by_id[rid], bundles[phase], by_id, history=hist, cap=config.neighbor_cap,
                window_months=config.window_months,
            )
    return ds


def predict_normalized(params: ModelParams, ds: CityDataset, ids: Sequence[str], chunk: int = 512) -> np.ndarray:
    cfg = params.config
    out = []
    for s in range(0, len(ids), chunk):
        batch = build_batch(ids[s:s + chunk], ds.contexts, ds.features, cfg.use_neighbors, cfg.use_community)
        out.append(forward_batch(params, batch, "eval", update_stats=False).p_hat.data)
    return np.concatenate(out) if out else np.zeros(0)


def predict_prices(params: ModelParams, ds: CityDataset, ids: Sequence[str]) -> np.ndarray:
    return ds.normalizer.decode_price(predict_normalized(params, ds, ids))


def _mape(preds: np.ndarray, truths: np.ndarray) -> float:
    return float(100.0 * np.mean(np.abs(preds - truths) / truths))


def train_step(params: ModelParams, batch, adam: AdamState) -> float:
    with Tape() as tape:
        out = forward_batch(params, batch, "train")
        loss = ops.mse_loss(out.p_hat, batch.truth)
    params.zero_grad()
    tape.backward(loss)
    adam_step(params.tensors, {k: t.grad for k, t in params.tensors.items()}, adam)
    return loss.item()


def train(
    config: TrainConfig, ds: CityDataset, params: ModelParams | None = None
) -> tuple[ModelParams, TrainReport]:
    """Mini-batch Adam on the training split; returns the best-validation-epoch parameters.

    Without validation targets the last epoch wins.
    """
    t0 = time.perf_counter()
    mcfg = config.model_config(ds.normalizer.d_env, ds.normalizer.d_obj)
    if params is None:
        params = ModelParams.init(mcfg, config.seed)
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    train_ids = list(ds.splits["train"])
    val_ids = list(ds.splits["val"])
    if not train_ids:
        raise TrainingError(f"no training targets for city {ds.city!r}")
    val_truth = np.array([ds.records[i].unit_price for i in val_ids])
    report = TrainReport()
    best_state, best_score = None, np.inf
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_ids))
        total, count = 0.0, 0
        for bi, s in enumerate(range(0, len(order), config.batch_size)):
            ids = [train_ids[i] for i in order[s:s + config.batch_size]]
            batch = build_batch(ids, ds.contexts, ds.features, mcfg.use_neighbors, mcfg.use_community)
            try:
                loss = train_step(params, batch, adam)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {bi}: {exc}") from exc
            total += loss * len(ids)
            count += len(ids)
        report.train_loss.append(total / count)
        if val_ids:
            score = _mape(predict_prices(params, ds, val_ids), val_truth)
            report.val_mape.append(score)
        else:
            score = -epoch  # later is better
            report.val_mape.append(float("nan"))
        if score < best_score:
            best_score = score
            best_state = params.copy()
            report.best_epoch = epoch
        log.debug("epoch %d loss %.5f val_mape %.3f", epoch, report.train_loss[-1], report.val_mape[-1])
    report.seconds = time.perf_counter() - t0
    return best_state, report
