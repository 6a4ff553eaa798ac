import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cgmlstm.baselines import naive_forecast
from cgmlstm.errors import InputError, UndefinedMetricError
from cgmlstm.metrics import (REPORT_COLUMNS, cc, count_events, evaluate, fit, mean_report, rmse, score,
                             summarize_dataset, time_lag, write_report_csv)
from cgmlstm.pipeline import Pool, SubDataset, make_windows, split_dataset

finite = st.floats(40, 400)


def shifted_fixture(n=288, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n + 40)
    return 140 + 40 * np.sin(t / 23.0) + 0.15 * t + np.cumsum(rng.normal(0, 2, t.size))


def test_rmse_examples():
    G = np.array([100.0, 120.0, 140.0])
    assert rmse(G, G) == 0.0
    assert rmse(G, G + 10) == 10.0
    assert abs(rmse(G, [110, 120, 150]) - math.sqrt(200 / 3)) <= 1e-9
    assert abs(rmse(G, [110, 120, 150]) - 8.16497) < 5e-6
    with pytest.raises(InputError):
        rmse([1, 2], [1])


def test_cc_examples():
    G = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    assert abs(cc(G, G) - 1.0) <= 1e-15
    assert cc([1, 2, 3], [3, 2, 1]) == -1.0
    assert abs(cc(G, 2.5 * G + 7) - 1.0) <= 1e-12
    with pytest.raises(UndefinedMetricError):
        cc([1, 1, 1], [1, 2, 3])


@given(st.lists(finite, min_size=3, max_size=30), st.floats(0.01, 100), st.floats(-500, 500))
def test_cc_affine_invariance(values, a, b):
    G = np.array(values)
    H = G[::-1] + np.arange(G.size)
    assume(np.ptp(G) > 1e-3 and np.ptp(H) > 1e-3)
    base = cc(G, H)
    assert abs(cc(G, a * H + b) - base) <= 1e-12
    assert abs(cc(a * G + b, H) - base) <= 1e-12
    assert abs(cc(G, -a * H + b) + base) <= 1e-12


def test_fit_examples():
    G = np.array([100.0, 150.0, 130.0])
    assert fit(G, G) == 100.0
    assert abs(fit(G, np.full(3, G.mean()))) <= 1e-12
    assert fit([0, 2], [2, 0]) == -100.0


@given(st.lists(finite, min_size=2, max_size=30), st.lists(finite, min_size=30, max_size=30))
def test_fit_bounded_and_rmse_zero_iff_equal(values, other):
    G = np.array(values)
    H = np.array(other[:G.size])
    assume(np.ptp(G) > 0)
    assert fit(G, H) <= 100.0
    assert (rmse(G, H) == 0.0) == bool(np.array_equal(G, H))
    assert (fit(G, H) == 100.0) == (rmse(G, H) == 0.0)


def test_time_lag_identity_and_planted_shifts():
    G = shifted_fixture()
    assert time_lag(G, G, 60) == 0
    for s in range(7):
        # forecast trails the actual series by s samples
        G_hat = np.concatenate([np.full(s, G[0]), G[:G.size - s]])
        assert time_lag(G, G_hat, 60) == 5 * s


def test_time_lag_fifteen_minutes_on_288_samples():
    base = shifted_fixture(291)
    G, G_hat = base[3:291], base[0:288]
    assert G.size == 288
    assert time_lag(G, G_hat, 60) == 15


def test_time_lag_tie_goes_to_smaller_shift():
    # a period-2 forecast correlates equally (perfectly) at shifts 0 and 2
    G = np.tile([1.0, 3.0], 20)
    assert time_lag(G, G.copy(), 20) == 0
    assert time_lag(G, np.roll(G, 1), 20) == 5


def test_count_events():
    assert count_events([65, 65, 100, 200, 100]) == (1, 1)
    assert count_events([70, 120, 180]) == (0, 0)
    assert count_events([69, 71, 69, 181, 180, 181]) == (2, 2)


def test_summary_counts_per_piece():
    pool = Pool([SubDataset("a", 0, np.array([60.0, 60.0])), SubDataset("b", 0, np.array([60.0, 100.0]))])
    row = summarize_dataset(pool)
    assert row == {"samples": 4, "mean_mgdl": 70.0, "hypo": 2, "hyper": 0}


def windows(seed=0, n=400):
    v = shifted_fixture(n, seed)
    return split_dataset(SubDataset("fx", 0, v), 12, 6)


def test_perfect_model_scores():
    train, _ = windows()
    rep = evaluate(lambda X: train.targets.copy(), train, "oracle")
    assert rep.rmse < 1e-12 and abs(rep.cc - 1) < 1e-12 and rep.tl_min == 0 and abs(rep.fit_pct - 100) < 1e-9


def test_naive_callable_matches_direct_scoring():
    _, test = windows(1)
    rep = evaluate(lambda X: naive_forecast(X), test, "naive")
    direct = score(test.raw_targets(), test.raw_inputs()[:, -1], 30, test.name, "naive")
    for key in ("rmse", "cc", "tl_min", "fit_pct"):
        assert abs(getattr(rep, key) - getattr(direct, key)) < 1e-10


def test_metrics_unchanged_by_scaling_round_trip():
    _, test = windows(2)
    raw = test.raw_inputs()[:, -1] + 3.0
    a = score(test.raw_targets(), raw, 30)
    b = evaluate(lambda X: test.scaler.apply(raw), test)
    for key in ("rmse", "cc", "tl_min", "fit_pct"):
        assert abs(getattr(a, key) - getattr(b, key)) <= 1e-10


def test_empty_test_set_rejected():
    _, test = windows()
    with pytest.raises(InputError):
        evaluate(lambda X: X[:, -1], test.subset([]))


def test_report_csv_and_mean(tmp_path):
    r1 = score([100, 120, 140, 130], [101, 118, 141, 128], 30, "a", "lstm", max_shift_min=5)
    r2 = score([90, 95, 130, 150], [92, 99, 120, 149], 30, "b", "lstm", max_shift_min=5)
    m = mean_report([r1, r2])
    assert m.rmse == (r1.rmse + r2.rmse) / 2 and m.n == 8
    write_report_csv([r1, r2, m], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[3].startswith("mean,lstm,30,")


def test_window_set_name_flows_into_report():
    ws = make_windows(SubDataset("pt", 12, shifted_fixture(100)), 12, 3)
    rep = evaluate(lambda X: X[:, -1], ws.rescaled(None))
    assert rep.dataset == "pt_000012" and rep.ph_min == 15
