"""MSE loss, Adam, the epoch loop, and the pre-train / fine-tune protocol.

The protocol has three phases, each one a call to :func:`train`:

1. ``pretrain1`` on windows from simulated subjects, starting at :func:`init_model`;
2. ``pretrain2`` on the pool of short real sub-datasets;
3. ``finetune``, 100 epochs per patient on the first 67% of that patient's windows.

:func:`epoch_sweep` repeats 1-3 for a grid of pre-train epoch counts.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import file_hash, load_model, save_model
from .errors import ConfigError, InputError, NumericError
from .metrics import MetricsReport, evaluate, mean_report
from .network import Model, forward_batch, init_model, model_backward, predict
from .numerics import SeededRng, derive_seed
from .pipeline import Pool, SubDataset, WindowSet, chrono_split, fit_scaler, horizon_steps, make_windows, split_dataset

log = logging.getLogger(__name__)

PHASES = ("pretrain1", "pretrain2", "finetune")
FINETUNE_EPOCHS = 100


@dataclass
class TrainConfig:
    epochs: int = FINETUNE_EPOCHS
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0
    ph: int = 30
    L: int = 12
    phase: str = "finetune"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.ph <= 0 or self.ph % 5:
            raise ConfigError(f"PH must be a positive multiple of 5 minutes, got {self.ph}")
        if self.L < 1:
            raise ConfigError(f"window length must be >= 1, got {self.L}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")

    @property
    def k(self) -> int:
        return horizon_steps(self.ph)

    def with_(self, **changes) -> "TrainConfig":
        return TrainConfig(**(asdict(self) | changes))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class History:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_mse)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for e, (tr, va) in enumerate(zip(self.train_mse, self.val_mse), start=1):
                w.writerow([e, format(tr, ".10g"), "" if va is None else format(va, ".10g")])


def mse_loss(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise InputError(f"mse_loss needs equal non-empty lengths, got {p.size} and {t.size}")
    return float(np.mean((p - t) ** 2))


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter and state dicts."""
    keys = list(params)
    g = np.concatenate([grads[k].ravel() for k in keys])
    if not np.all(np.isfinite(g)):
        bad = [k for k in keys if not np.all(np.isfinite(grads[k]))]
        raise NumericError(f"non-finite gradient for {', '.join(bad)}")
    p = np.concatenate([params[k].ravel() for k in keys])
    m0 = np.concatenate([state.m[k].ravel() for k in keys])
    v0 = np.concatenate([state.v[k].ravel() for k in keys])
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * m0 + (1.0 - b1) * g
    v = b2 * v0 + (1.0 - b2) * g * g
    p = p - lr * (m / (1.0 - b1 ** t)) / (np.sqrt(v / (1.0 - b2 ** t)) + state.eps)
    return _unflatten(p, params), AdamState(_unflatten(m, params), _unflatten(v, params), t, b1, b2, state.eps)


def _unflatten(flat: np.ndarray, like: dict) -> dict:
    out, pos = {}, 0
    for k, a in like.items():
        out[k] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return out


def batch_gradient(model: Model, X: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Mean squared error of a batch and its mean gradient."""
    preds, cache = forward_batch(model, X)
    err = preds - y
    loss = float(np.mean(err * err))
    return loss, model_backward(model, cache, 2.0 * err / len(y))


def train(model: Model, ws: WindowSet, cfg: TrainConfig, val: Optional[WindowSet] = None,
          state: Optional[AdamState] = None, rng: Optional[SeededRng] = None,
          snapshots: Sequence[int] = (), on_snapshot=None,
          trainable: Optional[Sequence[str]] = None) -> tuple[Model, History]:
    """Mini-batch Adam on the MSE for ``cfg.epochs`` epochs; no early stopping.

    Windows are reshuffled every epoch by a generator seeded from
    ``cfg.seed``.  ``History.train_mse`` is the size-weighted mean of the
    batch losses seen during each epoch; ``val_mse`` is measured after it.
    ``on_snapshot(epoch, model)`` fires after each epoch listed in ``snapshots``.
    ``trainable`` restricts updates to parameters whose names start with one
    of the given prefixes (e.g. ``["dense3."]``); the rest stay frozen.
    """
    if len(ws) == 0:
        raise InputError("cannot train on an empty WindowSet")
    if ws.L != model.window_len:
        raise ConfigError(f"data window {ws.L} != model window {model.window_len}")
    rng = rng or SeededRng(cfg.seed)
    params = model.named_parameters()
    state = state or AdamState.like(params)
    hist = History()
    N = len(ws)
    snapshots = set(snapshots)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        total = 0.0
        for b, s in enumerate(range(0, N, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            loss, grads = batch_gradient(model, ws.inputs[idx], ws.targets[idx])
            if trainable is not None:
                grads = {k: g if k.startswith(tuple(trainable)) else np.zeros_like(g) for k, g in grads.items()}
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            params, state = adam_step(params, grads, state, cfg.learning_rate)
            model = model.with_parameters(params)
            total += loss * len(idx)
        hist.train_mse.append(total / N)
        hist.val_mse.append(mse_loss(predict(model, val.inputs), val.targets) if val is not None and len(val) else None)
        if epoch in snapshots and on_snapshot is not None:
            on_snapshot(epoch, model)
    model.train_config = cfg.to_dict()
    return model, hist


def _windows(data, cfg: TrainConfig) -> tuple[WindowSet, WindowSet]:
    if isinstance(data, tuple):
        return data
    return split_dataset(data, cfg.L, cfg.k)


def pretrain_workflow(sim_pool, short_real_pool, epochs_r1: int, epochs_r2: int, cfg: TrainConfig,
                      out_dir) -> Path:
    """Two pre-training rounds; writes ``pretrain1.json`` and ``pretrain2.json`` under ``out_dir``.

    Pools are :class:`Pool`/:class:`SubDataset` objects (windowed and split
    67/33 here) or ready ``(train, val)`` WindowSet pairs.  Returns the path
    of the global model.  ``epochs_r2 == 0`` (or no real pool) copies the
    round-1 parameters unchanged.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.seed, cfg.L)

    tr, va = _windows(sim_pool, cfg)
    c1 = cfg.with_(epochs=epochs_r1, phase="pretrain1")
    model, h1 = train(model, tr, c1, va)
    model.scaler = tr.scaler
    h1.write_csv(out / "pretrain1_history.csv")
    parent = save_model(model, out / "pretrain1.json")

    c2 = cfg.with_(epochs=max(epochs_r2, 1), phase="pretrain2")
    if epochs_r2 > 0 and short_real_pool is not None and len(short_real_pool):
        tr, va = _windows(short_real_pool, cfg)
        model, h2 = train(model, tr, c2, va, rng=SeededRng(derive_seed(cfg.seed, 2)))
        model.scaler = tr.scaler
        h2.write_csv(out / "pretrain2_history.csv")
    else:
        model.train_config = c2.to_dict() | {"epochs": 0}
    path = out / "pretrain2.json"
    save_model(model, path, parent_hash=parent)
    return path


def patient_windows(sub: SubDataset, L: int, k: int, train_frac: float = 0.67) -> WindowSet:
    """All windows of one patient, scaled with a scaler fitted on the training part only."""
    train, _ = chrono_split(make_windows(sub, L, k), train_frac)
    scaler = fit_scaler(np.concatenate([train.raw_inputs().ravel(), train.raw_targets()]))
    return make_windows(sub, L, k, scaler)


def _check_compatible(model: Model, cfg: TrainConfig, path) -> None:
    ckpt_cfg = model.train_config or {}
    if model.window_len != cfg.L:
        raise ConfigError(f"checkpoint {path} has L={model.window_len}, run asks for L={cfg.L}")
    if ckpt_cfg.get("ph") is not None and ckpt_cfg["ph"] != cfg.ph:
        raise ConfigError(f"checkpoint {path} was trained for PH={ckpt_cfg['ph']}, run asks for PH={cfg.ph}")


def finetune(global_ckpt, patient, cfg: TrainConfig, train_frac: float = 0.67
             ) -> tuple[Model, History, MetricsReport]:
    """Fine-tune the global model on one patient and score the held-out 33%.

    ``patient`` is a scaled WindowSet (see :func:`patient_windows`) or a
    :class:`SubDataset`.  ``global_ckpt`` is a checkpoint path or a Model.
    """
    if isinstance(global_ckpt, Model):
        model, parent = global_ckpt.copy(), None
    else:
        model, parent = load_model(global_ckpt), file_hash(global_ckpt)
    _check_compatible(model, cfg, global_ckpt)
    ws = patient if isinstance(patient, WindowSet) else patient_windows(patient, cfg.L, cfg.k, train_frac)
    if ws.k != cfg.k:
        raise ConfigError(f"patient windows use k={ws.k}, config PH={cfg.ph} needs k={cfg.k}")
    train_ws, test_ws = chrono_split(ws, train_frac)
    cfg = cfg.with_(phase="finetune")
    model, hist = train(model, train_ws, cfg, test_ws)
    model.scaler = ws.scaler
    model.meta = dict(model.meta) | {"dataset": ws.name, "parent_checkpoint_hash": parent}
    return model, hist, evaluate(model, test_ws, "lstm")


def epoch_sweep(sim_pool, short_real_pool, patients: Sequence, cfg: TrainConfig, start: int = 100,
                stop: int = 2000, step: int = 100, finetune_epochs: int = FINETUNE_EPOCHS) -> list[dict]:
    """Score the protocol for every pre-train epoch count in ``start..stop`` (inclusive).

    The same count is used for both pre-training rounds.  Round-1 models for
    all counts come from a single run snapshotted along the way, which is
    identical to separate runs because the shuffling stream is shared.
    Returns one row per count with the unweighted mean test metrics over
    ``patients``.
    """
    if step <= 0 or start < 1 or stop < start:
        raise ConfigError(f"bad sweep range {start}..{stop} step {step}")
    counts = list(range(start, stop + 1, step))
    tr1, va1 = _windows(sim_pool, cfg)
    have_r2 = short_real_pool is not None and len(short_real_pool)
    tr2, va2 = _windows(short_real_pool, cfg) if have_r2 else (None, None)
    patient_ws = [p if isinstance(p, WindowSet) else patient_windows(p, cfg.L, cfg.k) for p in patients]
    round1 = {}
    train(init_model(cfg.seed, cfg.L), tr1, cfg.with_(epochs=counts[-1], phase="pretrain1"), None,
          snapshots=counts, on_snapshot=lambda e, m: round1.__setitem__(e, m.copy()))
    rows = []
    for e in counts:
        model = round1[e]
        model.train_config = cfg.with_(epochs=e, phase="pretrain1").to_dict()
        if have_r2:
            model, _ = train(model, tr2, cfg.with_(epochs=e, phase="pretrain2"), None,
                             rng=SeededRng(derive_seed(cfg.seed, 2)))
        reports = [finetune(model, ws, cfg.with_(epochs=finetune_epochs))[2] for ws in patient_ws]
        avg = mean_report(reports)
        rows.append({"epochs": e, "rmse": avg.rmse, "cc": avg.cc, "tl_min": avg.tl_min, "fit_pct": avg.fit_pct})
        log.info("sweep %d epochs: rmse %.3f", e, avg.rmse)
    return rows


def select_epochs(rows: Sequence[dict]) -> dict:
    """Row with the lowest RMSE; ties go to the smaller epoch count."""
    if not rows:
        raise InputError("empty sweep table")
    return min(rows, key=lambda r: (r["rmse"], r["epochs"]))


SWEEP_COLUMNS = ("epochs", "rmse", "cc", "tl_min", "fit_pct")


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["epochs"]] + [format(r[c], ".6f") for c in SWEEP_COLUMNS[1:]])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"epochs": int(r["epochs"]), **{c: float(r[c]) for c in SWEEP_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]
