"""Walk through the whole forecasting workflow on synthetic CGM data.

Run with ``python demos/forecast_walkthrough.py [out_dir]``.  Takes about a
minute: a small simulated cohort is pre-trained on, one synthetic patient is
fine-tuned at a 30 minute horizon, and the result is compared with the
zero-order hold, ARIMA and SVR baselines.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from cgmlstm.baselines import make_forecaster
from cgmlstm.metrics import evaluate, summarize_dataset
from cgmlstm.pipeline import Pool, SubDataset, chrono_split
from cgmlstm.synth import gen_cohort
from cgmlstm.training import TrainConfig, finetune, patient_windows, pretrain_workflow

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cgmlstm-demo-"))
PH = 30

# %% Synthetic data: two simulated subjects for the first pre-training round,
# short pieces of two more for the second, and one "patient" with six days.
sim = Pool([SubDataset(s.subject_id, 0, s.values) for s in gen_cohort(2, 3, 101)])
short = Pool([SubDataset(f"short{i}", 0, s.values[:1000]) for i, s in enumerate(gen_cohort(2, 4, 202))])
patient = gen_cohort(1, 6, 7)[0]
patient = SubDataset("patient", 0, patient.values, patient.start_time)
print("patient summary:", summarize_dataset(patient))

# %% Two-round pre-training produces the global model checkpoint.
cfg = TrainConfig(seed=0, ph=PH)
global_ckpt = pretrain_workflow(sim, short, 20, 20, cfg, out / "pretrain")
print("global model:", global_ckpt)

# %% Fine-tune on the patient's first two thirds, score on the last third.
model, history, lstm_report = finetune(global_ckpt, patient, cfg)
print(f"fine-tune MSE: first epoch {history.train_mse[0]:.4f}, last {history.train_mse[-1]:.4f}")

# %% Baselines see exactly the same split.
train_ws, test_ws = chrono_split(patient_windows(patient, cfg.L, cfg.k))
reports = [lstm_report] + [evaluate(make_forecaster(m, train_ws), test_ws, m) for m in ("naive", "arima", "svr")]

print(f"\n{'method':8s} {'RMSE':>7s} {'CC':>6s} {'TL':>4s} {'Fit%':>6s}")
for r in reports:
    print(f"{r.method:8s} {r.rmse:7.2f} {r.cc:6.3f} {r.tl_min:4.0f} {r.fit_pct:6.1f}")

# %% A plot of the last day of the test split.
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from cgmlstm.network import predict

actual = test_ws.raw_targets()[-288:]
pred = test_ws.scaler.invert(predict(model, test_ws.inputs))[-288:]
naive = test_ws.raw_inputs()[-288:, -1]
t = np.arange(actual.size) * 5 / 60
fig, ax = plt.subplots(figsize=(10, 3.5))
ax.plot(t, actual, "k", lw=1.2, label="actual")
ax.plot(t, pred, lw=0.9, label="LSTM")
ax.plot(t, naive, lw=0.9, label="zero-order hold")
ax.set_xlabel("hours")
ax.set_ylabel("glucose (mg/dl)")
ax.legend()
fig.tight_layout()
fig.savefig(out / "last_day.png", dpi=120)
print("\nplot written to", out / "last_day.png")
