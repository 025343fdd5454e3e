"""Accuracy metrics, reference baselines and the comparison report."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, TrainingError
from .model import ModelParams
from .training import CityDataset, TrainConfig, predict_prices, train

Predictor = Callable[[CityDataset, Sequence[str]], np.ndarray]

RIDGE = 1e-6
DEFAULT_KNN_K = 5


def _check(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise ContractError(f"need equal non-empty lengths, got {p.size} predictions and {t.size} truths")
    if np.any(~(t > 0)):
        raise ContractError("every truth must be positive")
    if not np.all(np.isfinite(p)):
        raise ContractError("predictions must be finite")
    return p, t


def mape(preds, truths) -> float:
    """Mean absolute percentage error, in percent."""
    p, t = _check(preds, truths)
    return float(100.0 * np.mean(np.abs(p - t) / t))


def hit_rate(preds, truths, threshold_percent: float) -> float:
    """Percentage of predictions within ``threshold_percent`` of the truth (boundary counts as a hit)."""
    p, t = _check(preds, truths)
    return float(100.0 * np.mean(np.abs(p - t) / t <= threshold_percent / 100.0))


# --- baselines -------------------------------------------------------------

def _flat(ds: CityDataset, i: str) -> np.ndarray:
    f = ds.features[i]
    return np.concatenate([f.s_env, f.s_obj])


def knn_baseline(k: int, target: np.ndarray, pool_x: np.ndarray, pool_price: np.ndarray,
                 pool_ids: Sequence[str]) -> float:
    """Mean price of the ``k`` pool rows nearest to ``target``; equal distances go to the smaller id."""
    if k < 1:
        raise ContractError("k must be at least 1")
    if len(pool_ids) == 0:
        raise ContractError("knn_baseline needs a non-empty candidate pool")
    pool_x = np.asarray(pool_x, dtype=np.float64).reshape(len(pool_ids), -1)
    d = np.sqrt(np.sum((pool_x - np.asarray(target, dtype=np.float64)) ** 2, axis=1))
    id_rank = np.argsort(np.asarray(pool_ids, dtype=object), kind="stable")
    rank = np.empty_like(id_rank)
    rank[id_rank] = np.arange(len(id_rank))
    order = np.lexsort((rank, d))[:k]
    return float(np.mean(np.asarray(pool_price, dtype=np.float64)[order]))


def knn_pool(ds: CityDataset, target_id: str) -> list[str]:
    """Earlier same-city transactions visible to ``target_id`` under its phase's history rule."""
    t_date = ds.records[target_id].trade_date
    hist = ds.history_for(ds.phase_of(target_id))
    return sorted(i for i in hist if ds.records[i].trade_date < t_date)


def knn_predictor(k: int = DEFAULT_KNN_K) -> Predictor:
    def predict(ds: CityDataset, ids: Sequence[str]) -> np.ndarray:
        out = np.empty(len(ids))
        for j, t in enumerate(ids):
            pool = knn_pool(ds, t)
            if not pool:
                raise ContractError(f"no earlier transactions for KNN target {t!r}")
            x = np.array([_flat(ds, i) for i in pool])
            prices = np.array([ds.records[i].unit_price for i in pool])
            out[j] = knn_baseline(k, _flat(ds, t), x, prices, pool)
        return out

    return predict


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef + self.intercept


def fit_linear(x, y, ridge: float = RIDGE) -> LinearModel:
    """Least squares with an unpenalized intercept and ``ridge`` damping on the coefficients."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ContractError(f"fit_linear: {x.shape[0]} rows for {y.shape[0]} targets")
    a = np.hstack([x, np.ones((x.shape[0], 1))])
    damp = np.full(a.shape[1], ridge)
    damp[-1] = 0.0
    gram = a.T @ a + np.diag(damp)
    if np.linalg.cond(gram) > 1e14:
        raise TrainingError("normal equations are singular even with ridge damping")
    w = np.linalg.solve(gram, a.T @ y)
    return LinearModel(w[:-1], float(w[-1]))


def fit_baseline(kind: str, ds: CityDataset, config: TrainConfig | None = None) -> Predictor:
    """Fit ``LR`` or ``DNN`` on the training split of ``ds``.

    The DNN shares the appraisal network and trainer with the neighbor and
    community paths switched off, so it sees only the target's own features.
    """
    train_ids = ds.splits["train"]
    if not train_ids:
        raise TrainingError(f"no training targets for city {ds.city!r}")
    if kind == "LR":
        x = np.array([_flat(ds, i) for i in train_ids])
        y = np.array([ds.features[i].p_norm for i in train_ids])
        lm = fit_linear(x, y)

        def predict(d: CityDataset, ids: Sequence[str]) -> np.ndarray:
            xs = np.array([_flat(d, i) for i in ids])
            return d.normalizer.decode_price(lm.predict(xs))

        return predict
    if kind == "DNN":
        cfg = replace(config or TrainConfig(), use_price=False, use_relation=False, use_community=False)
        params, _ = train(cfg, ds)
        return model_predictor(params)
    raise ContractError(f"unknown baseline kind {kind!r}; expected LR or DNN")


def model_predictor(params: ModelParams) -> Predictor:
    return lambda ds, ids: predict_prices(params, ds, ids)


def oracle_predictor(ds: CityDataset, ids: Sequence[str]) -> np.ndarray:
    return np.array([ds.records[i].unit_price for i in ids])


# --- report ----------------------------------------------------------------

AVERAGE = "Average"
COLUMNS = ("model", "city", "n", "mape", "hit10", "hit20")


@dataclass(frozen=True)
class EvalRow:
    model: str
    city: str
    n: int
    mape: float
    hit10: float
    hit20: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def get(self, model: str, city: str = AVERAGE) -> EvalRow:
        for r in self.rows:
            if r.model == model and r.city == city:
                return r
        raise KeyError((model, city))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r.model, r.city, r.n, f"{r.mape:.6f}", f"{r.hit10:.6f}", f"{r.hit20:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{'model':<14} {'city':<12} {'n':>6} {'MAPE':>8} {'hit@10':>8} {'hit@20':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.model:<14} {r.city:<12} {r.n:>6d} {r.mape:>8.3f} {r.hit10:>8.2f} {r.hit20:>8.2f}")
        return "\n".join(lines)


def score(model: str, city: str, preds, truths) -> EvalRow:
    p, t = _check(preds, truths)
    return EvalRow(model, city, int(t.size), mape(p, t), hit_rate(p, t, 10), hit_rate(p, t, 20))


def average_row(model: str, rows: Sequence[EvalRow]) -> EvalRow:
    """Unweighted mean of per-city scores; ``n`` is the total sample count."""
    return EvalRow(
        model, AVERAGE, sum(r.n for r in rows),
        float(np.mean([r.mape for r in rows])),
        float(np.mean([r.hit10 for r in rows])),
        float(np.mean([r.hit20 for r in rows])),
    )


def evaluate(
    models: Mapping[str, Mapping[str, Predictor] | Predictor],
    datasets: Sequence[CityDataset],
    split: str = "test",
) -> EvalReport:
    """Score every model on every city's ``split`` targets.

    A model maps either to one predictor used for all cities or to a
    per-city dict of predictors (models are fitted per city). Rows come out
    model by model in the given order, cities sorted, then the average.
    """
    report = EvalReport()
    dss = sorted(datasets, key=lambda d: d.city)
    for name, pred in models.items():
        per_city = []
        for ds in dss:
            ids = ds.splits[split]
            if not ids:
                continue
            fn = pred[ds.city] if isinstance(pred, Mapping) else pred
            truths = np.array([ds.records[i].unit_price for i in ids])
            per_city.append(score(name, ds.city, fn(ds, ids), truths))
        report.rows.extend(per_city)
        if per_city:
            report.rows.append(average_row(name, per_city))
    return report
