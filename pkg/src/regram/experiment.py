"""Seeded multi-city comparison runs: the full model, its ablations and the baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .evaluation import EvalReport, evaluate, fit_baseline, knn_predictor, model_predictor
from .records import TransactionRecord
from .training import CityDataset, TrainConfig, prepare_city, train

log = logging.getLogger(__name__)

FULL = "ReGram"
ABLATIONS = {
    "no-price": dict(use_price=False),
    "no-relation": dict(use_relation=False),
    "no-community": dict(use_community=False),
    "single-kernel": dict(n_kernels=1),
}
BASELINES = ("DNN", "LR", "KNN")


@dataclass
class ComparisonResult:
    reports: dict[int, EvalReport] = field(default_factory=dict)  # seed -> report

    def seed_mean(self, model: str) -> float:
        """Average-row test MAPE of ``model``, averaged over seeds."""
        return float(np.mean([r.get(model).mape for r in self.reports.values()]))

    def models(self) -> list[str]:
        first = next(iter(self.reports.values()))
        return list(dict.fromkeys(r.model for r in first.rows))


def prepare_all(records: Sequence[TransactionRecord], config: TrainConfig) -> list[CityDataset]:
    cities = sorted({r.city for r in records})
    return [prepare_city(records, c, config) for c in cities]


def run_comparison(
    datasets: Sequence[CityDataset],
    config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    ablations: Sequence[str] = tuple(ABLATIONS),
    baselines: Sequence[str] = BASELINES,
) -> ComparisonResult:
    """Train every variant per city and seed, then score all of them on the test splits."""
    result = ComparisonResult()
    for seed in seeds:
        base = replace(config, seed=seed)
        variants = {FULL: base}
        variants.update({a: replace(base, **ABLATIONS[a]) for a in ablations})
        models: dict = {}
        for name, cfg in variants.items():
            models[name] = {ds.city: model_predictor(train(cfg, ds)[0]) for ds in datasets}
            log.info("seed %d: trained %s", seed, name)
        for b in baselines:
            if b == "KNN":
                models[b] = knn_predictor()
            else:
                models[b] = {ds.city: fit_baseline(b, ds, base) for ds in datasets}
        result.reports[seed] = evaluate(models, datasets)
    return result
