import csv
from pathlib import Path

import numpy as np
import pytest

from cgmlstm.checkpoint import file_hash, lineage, load_model, save_model
from cgmlstm.errors import ConfigError, NumericError
from cgmlstm.metrics import evaluate
from cgmlstm.baselines import make_forecaster
from cgmlstm.network import init_model, model_backward, model_forward, predict
from cgmlstm.pipeline import Pool, SubDataset, chrono_split, fit_scaler, make_windows
from cgmlstm.synth import gen_cohort
from cgmlstm.training import (AdamState, History, TrainConfig, adam_step, batch_gradient, epoch_sweep, finetune,
                              mse_loss, patient_windows, pretrain_workflow, read_sweep_csv, select_epochs, train,
                              write_sweep_csv)

PUBLISHED_SWEEP = Path(__file__).parent / "data" / "published_sweep_ph30.csv"


def subject(seed, days=2, name="p"):
    s = gen_cohort(1, days, seed)[0]
    return SubDataset(name, 0, s.values, s.start_time)


def small_windows(n=100, seed=0, k=6):
    sub = subject(seed)
    sub = SubDataset(sub.subject_id, 0, sub.values[:n + 12 + k - 1])
    return make_windows(sub, 12, k, fit_scaler(sub.values))


def test_mse_examples():
    assert mse_loss([1, 1], [0, 2]) == 1.0
    assert mse_loss([0.3, 0.4], [0.3, 0.4]) == 0.0
    G, H = np.array([100.0, 120.0, 140.0]), np.array([110.0, 120.0, 150.0])
    assert abs(mse_loss(H, G) - 200 / 3) < 1e-12


def test_adam_first_step():
    params = {"a": np.array([0.5, -0.25]), "b": np.array([[1.0]])}
    grads = {k: np.ones_like(v) for k, v in params.items()}
    new, state = adam_step(params, grads, AdamState.like(params), 0.001)
    for k in params:
        np.testing.assert_allclose(params[k] - new[k], 0.001 / (1 + 1e-8), rtol=1e-12)
    assert state.t == 1


def test_adam_zero_gradient_is_a_no_op():
    params = {"a": np.array([0.5, -0.25])}
    state = AdamState.like(params)
    p = params
    for _ in range(50):
        p, state = adam_step(p, {"a": np.zeros(2)}, state, 0.01)
    np.testing.assert_array_equal(p["a"], params["a"])


def test_adam_rejects_non_finite_gradient():
    params = {"a": np.zeros(2)}
    with pytest.raises(NumericError, match="a"):
        adam_step(params, {"a": np.array([np.nan, 0.0])}, AdamState.like(params), 0.01)


def test_batch_gradient_is_mean_of_per_sample_gradients():
    m = init_model(4)
    ws = small_windows(3)
    loss, g = batch_gradient(m, ws.inputs, ws.targets)
    per = []
    for x, t in zip(ws.inputs, ws.targets):
        p, cache = model_forward(m, x)
        per.append(model_backward(m, cache, 2.0 * (p - t)))
    for k in g:
        np.testing.assert_allclose(g[k], sum(q[k] for q in per) / 3, rtol=1e-12, atol=1e-15)
    assert abs(loss - mse_loss(predict(m, ws.inputs), ws.targets)) < 1e-15


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(ph=32)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    assert TrainConfig(ph=45).k == 9


def test_train_history_and_determinism():
    ws = small_windows(64)
    cfg = TrainConfig(epochs=5, seed=3)
    a, ha = train(init_model(0), ws, cfg)
    b, hb = train(init_model(0), ws, cfg)
    assert len(ha) == 5 and ha.val_mse == [None] * 5
    assert ha.train_mse == hb.train_mse
    for k, v in a.named_parameters().items():
        np.testing.assert_array_equal(v, b.named_parameters()[k])
    assert a.train_config["epochs"] == 5


def test_train_reports_nan_loss():
    ws = small_windows(40)
    ws.targets[5] = np.nan
    with pytest.raises(NumericError, match="epoch 1"):
        train(init_model(0), ws, TrainConfig(epochs=2))


@pytest.mark.parametrize("batch", ["full", 1])
def test_convex_last_layer_descent(batch):
    ws = small_windows(48, seed=2)
    bs = len(ws) if batch == "full" else 1
    cfg = TrainConfig(epochs=15, batch_size=bs, learning_rate=1e-4, seed=1)
    m0 = init_model(1)
    m, hist = train(m0, ws, cfg, val=ws, trainable=["dense3."])
    losses = [mse_loss(predict(m0, ws.inputs), ws.targets)] + hist.val_mse
    assert np.all(np.diff(losses) < 0)
    for k, v in m.named_parameters().items():
        if not k.startswith("dense3."):
            np.testing.assert_array_equal(v, m0.named_parameters()[k])


def test_snapshots_match_separate_runs():
    ws = small_windows(40)
    cfg = TrainConfig(epochs=5, seed=2)
    snaps = {}
    train(init_model(0), ws, cfg, snapshots=[3], on_snapshot=lambda e, m: snaps.__setitem__(e, m.copy()))
    direct, _ = train(init_model(0), ws, cfg.with_(epochs=3))
    for k, v in direct.named_parameters().items():
        np.testing.assert_array_equal(v, snaps[3].named_parameters()[k])


def test_pretrain_lineage_and_desk_scale(tmp_path):
    sim = Pool([subject(s, 1, f"sim{s}") for s in (10, 11)])
    real = Pool([subject(12, 1, "short")])
    cfg = TrainConfig(epochs=300, seed=4, ph=30)
    g = pretrain_workflow(sim, real, 300, 3, cfg, tmp_path / "pre")
    model = load_model(g)
    assert model.train_config["phase"] == "pretrain2" and model.scaler is not None
    assert (tmp_path / "pre" / "pretrain1_history.csv").read_text().count("\n") == 301

    ft, _, _ = finetune(g, subject(13, 2), cfg.with_(epochs=2))
    (tmp_path / "ft").mkdir()
    save_model(ft, tmp_path / "ft" / "p.json", parent_hash=file_hash(g))
    chain = lineage(tmp_path / "ft" / "p.json", search_dir=tmp_path)
    assert [c["phase"] for c in chain] == ["finetune", "pretrain2", "pretrain1"]
    assert chain[-1]["init_seed"] == 4


def test_zero_round_two_copies_round_one(tmp_path):
    sim = Pool([subject(20, 1, "a")])
    real = Pool([subject(21, 1, "b")])
    g = pretrain_workflow(sim, real, 2, 0, TrainConfig(seed=1), tmp_path)
    r1, r2 = load_model(tmp_path / "pretrain1.json"), load_model(g)
    for k, v in r1.named_parameters().items():
        np.testing.assert_array_equal(v, r2.named_parameters()[k])


def test_finetune_rejects_horizon_mismatch(tmp_path):
    g = pretrain_workflow(Pool([subject(30, 1, "a")]), None, 1, 0, TrainConfig(ph=30), tmp_path)
    with pytest.raises(ConfigError, match="PH"):
        finetune(g, subject(31, 2), TrainConfig(ph=60, epochs=1))


def test_finetune_has_no_test_leakage():
    sub = subject(40, 3)
    ws = patient_windows(sub, 12, 6)
    train_ws, test_ws = chrono_split(ws)
    touched = set(train_ws.start.tolist()) | set((train_ws.target_index).tolist())
    touched |= {s + j for s in train_ws.start.tolist() for j in range(12)}
    assert touched.isdisjoint(test_ws.target_index.tolist())
    assert touched.isdisjoint({s + j for s in test_ws.start.tolist() for j in range(12)})
    assert ws.scaler == fit_scaler(np.concatenate([train_ws.raw_inputs().ravel(), train_ws.raw_targets()]))


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finetuned_model_beats_naive_at_30_minutes(tmp_path, seed):
    sim = Pool([subject(100 + seed, 3, "sim")])
    cfg = TrainConfig(seed=seed, ph=30)
    g = pretrain_workflow(sim, None, 30, 0, cfg, tmp_path)
    patient = subject(200 + seed, 5)
    model, hist, rep = finetune(g, patient, cfg)
    assert len(hist) == 100
    _, test = chrono_split(patient_windows(patient, 12, 6))
    naive = evaluate(make_forecaster("naive", test), test, "naive")
    assert np.isfinite(rep.rmse) and rep.rmse < naive.rmse


def test_select_epochs_rules():
    rows = [{"epochs": e, "rmse": 30.0 - e / 100} for e in range(100, 2001, 100)]
    assert select_epochs(rows)["epochs"] == 2000
    rows = [{"epochs": 100, "rmse": 2.0}, {"epochs": 200, "rmse": 1.0}, {"epochs": 300, "rmse": 1.0}]
    assert select_epochs(rows)["epochs"] == 200


def test_published_sweep_selection():
    rows = read_sweep_csv(PUBLISHED_SWEEP)
    assert len(rows) == 20
    best = select_epochs(rows)
    assert best["epochs"] == 1300 and best["rmse"] == 21.747


def test_epoch_sweep_rows(tmp_path):
    sim = Pool([SubDataset("s", 0, subject(50, 1).values[:80])])
    real = Pool([SubDataset("r", 0, subject(51, 1).values[:60])])
    rows = epoch_sweep(sim, real, [subject(52, 1)], TrainConfig(seed=0), 1, 4, 1, finetune_epochs=1)
    assert [r["epochs"] for r in rows] == [1, 2, 3, 4]
    write_sweep_csv(rows, tmp_path / "s.csv")
    back = read_sweep_csv(tmp_path / "s.csv")
    assert [r["epochs"] for r in back] == [1, 2, 3, 4]
    assert all(abs(a["rmse"] - b["rmse"]) < 1e-6 for a, b in zip(rows, back))
    with pytest.raises(ConfigError):
        epoch_sweep(sim, real, [], TrainConfig(), 5, 1, 1)


def test_history_csv(tmp_path):
    h = History([0.5, 0.25], [None, 0.125])
    h.write_csv(tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["epoch", "train_mse", "val_mse"], ["1", "0.5", ""], ["2", "0.25", "0.125"]]
