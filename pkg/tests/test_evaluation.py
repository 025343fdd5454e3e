from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regram.errors import ContractError, TrainingError
from regram.evaluation import (
    EvalReport, average_row, evaluate, fit_baseline, fit_linear, hit_rate, knn_baseline, knn_pool, knn_predictor,
    mape, oracle_predictor, score,
)

from helpers import small_dataset


def test_mape_examples():
    assert mape([100, 250], [100, 250]) == 0.0
    assert mape([110], [100]) == pytest.approx(10.0, abs=1e-12)
    assert mape([90, 120], [100, 100]) == pytest.approx(15.0, abs=1e-12)


def test_hit_rate_examples():
    assert hit_rate([5, 6], [5, 6], 10) == 100.0
    assert hit_rate([110, 90], [100, 100], 10) == 100.0  # exactly on the boundary
    assert hit_rate([105, 115], [100, 100], 10) == 50.0


@pytest.mark.parametrize("preds,truths", [([1.0], [0.0]), ([1.0], [-2.0]), ([], []), ([1.0, 2.0], [1.0]),
                                          ([np.nan], [1.0])])
def test_metric_contract_errors(preds, truths):
    with pytest.raises(ContractError):
        mape(preds, truths)
    with pytest.raises(ContractError):
        hit_rate(preds, truths, 10)


positive = st.floats(1e-3, 1e6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(positive, positive), min_size=1, max_size=30), st.floats(1e-3, 1e3))
def test_metrics_are_scale_invariant(pairs, c):
    p, t = np.array(pairs).T
    assert abs(mape(p * c, t * c) - mape(p, t)) <= 1e-12 * max(1.0, mape(p, t))
    for thr in (10, 20):
        # scaling can move a ratio sitting exactly at the threshold by one ulp
        ratio = np.abs(p - t) / t
        if np.all(np.abs(ratio - thr / 100) > 1e-12):
            assert hit_rate(p * c, t * c, thr) == hit_rate(p, t, thr)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(positive, positive), min_size=1, max_size=30), st.floats(0, 100), st.floats(0, 100))
def test_hit_rate_monotone_in_threshold(pairs, a, b):
    p, t = np.array(pairs).T
    lo, hi = sorted((a, b))
    assert hit_rate(p, t, lo) <= hit_rate(p, t, hi)
    assert hit_rate(p, t, 20) >= hit_rate(p, t, 10)


def test_knn_examples():
    assert knn_baseline(1, [0.0], [[3.0]], [42.0], ["a"]) == 42.0
    assert knn_baseline(3, [0.0, 0.0], np.zeros((3, 2)), [1.0, 2.0, 3.0], ["c", "a", "b"]) == 2.0
    # pool smaller than k falls back to the whole pool
    assert knn_baseline(5, [0.0], [[1.0], [2.0]], [10.0, 20.0], ["a", "b"]) == 15.0
    # equal distances resolved towards the smaller id
    assert knn_baseline(1, [0.0], [[1.0], [-1.0]], [10.0, 20.0], ["b", "a"]) == 20.0
    with pytest.raises(ContractError):
        knn_baseline(1, [0.0], np.zeros((0, 1)), [], [])
    with pytest.raises(ContractError):
        knn_baseline(0, [0.0], [[1.0]], [1.0], ["a"])


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    x = np.round(rng.normal(size=(50, 4)), 1)  # rounding creates distance ties
    x[10] = x[3]
    prices = rng.uniform(1000, 5000, size=50)
    ids = [f"id{rng.integers(1e6):07d}-{i}" for i in range(50)]
    target = rng.normal(size=4)
    ranked = sorted(range(50), key=lambda i: (float(np.sqrt(np.sum((x[i] - target) ** 2))), ids[i]))
    assert knn_baseline(5, target, x, prices, ids) == pytest.approx(np.mean(prices[ranked[:5]]), rel=1e-15)


def test_linear_recovers_line_and_constant():
    x = np.linspace(-3, 3, 40)
    lm = fit_linear(x, 2 * x)
    assert abs(lm.coef[0] - 2) <= 1e-6 and abs(lm.intercept) <= 1e-6
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(30, 3))
    lm = fit_linear(xs, np.full(30, 7.5))
    assert abs(lm.intercept - 7.5) <= 1e-6 and np.all(np.abs(lm.coef) <= 1e-6)


def test_linear_rejects_singular_system():
    with pytest.raises(TrainingError):
        fit_linear(np.zeros((5, 2)), np.ones(5), ridge=0.0)


def test_dnn_with_zero_rate_is_reproducible():
    ds, cfg = small_dataset()
    cfg0 = replace(cfg, lr=0.0, epochs=1)
    ids = ds.splits["test"]
    a = fit_baseline("DNN", ds, cfg0)(ds, ids)
    b = fit_baseline("DNN", ds, cfg0)(ds, ids)
    assert a.tobytes() == b.tobytes()
    c = fit_baseline("DNN", ds, replace(cfg0, seed=9))(ds, ids)
    assert a.tobytes() != c.tobytes()
    with pytest.raises(ContractError):
        fit_baseline("SVR", ds, cfg0)


def test_oracle_and_single_city_report():
    ds, _ = small_dataset()
    rep = evaluate({"oracle": oracle_predictor}, [ds])
    assert [r.city for r in rep.rows] == [ds.city, "Average"]
    city, avg = rep.rows
    assert city.mape == 0.0 and city.hit10 == 100.0 and city.hit20 == 100.0
    assert (avg.mape, avg.hit10, avg.hit20, avg.n) == (city.mape, city.hit10, city.hit20, city.n)
    assert city.n == len(ds.splits["test"])


def test_knn_row_replays_standalone_calls():
    ds, _ = small_dataset()
    ids = ds.splits["test"]
    rep = evaluate({"KNN": knn_predictor(5)}, [ds])
    preds = []
    for t in ids:
        pool = knn_pool(ds, t)
        assert all(ds.phase_of(i) in ("train", "val") for i in pool)
        x = [np.concatenate([ds.features[i].s_env, ds.features[i].s_obj]) for i in pool]
        tx = np.concatenate([ds.features[t].s_env, ds.features[t].s_obj])
        preds.append(knn_baseline(5, tx, x, [ds.records[i].unit_price for i in pool], pool))
    truths = [ds.records[t].unit_price for t in ids]
    assert rep.get("KNN", ds.city) == score("KNN", ds.city, preds, truths)


def test_average_is_unweighted_and_csv_layout():
    rows = [score("m", "A", [110], [100]), score("m", "B", [100, 100, 100], [100, 100, 100])]
    avg = average_row("m", rows)
    assert avg.mape == pytest.approx(5.0) and avg.n == 4 and avg.hit10 == 100.0
    rep = EvalReport(rows + [avg])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "model,city,n,mape,hit10,hit20"
    assert lines[-1] == "m,Average,4,5.000000,100.000000,100.000000"
    assert "Average" in rep.to_table()
    with pytest.raises(KeyError):
        rep.get("other")


def test_rows_follow_model_order_then_sorted_cities():
    ds, _ = small_dataset()
    other = replace(ds, city="Aardvark")
    rep = evaluate({"z": oracle_predictor, "a": oracle_predictor}, [ds, other])
    assert [(r.model, r.city) for r in rep.rows] == [
        ("z", "Aardvark"), ("z", ds.city), ("z", "Average"),
        ("a", "Aardvark"), ("a", ds.city), ("a", "Average"),
    ]
