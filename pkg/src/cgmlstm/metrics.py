"""Forecast accuracy criteria in mg/dl and dataset summaries.

RMSE, Pearson correlation (CC), time lag (TL, minutes) and Fit (percent of
the spread around the mean that the forecast explains, in RMSE terms).
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import InputError, UndefinedMetricError
from .pipeline import STEP_SECONDS

HYPO_BELOW = 70.0
HYPER_ABOVE = 180.0
STEP_MIN = STEP_SECONDS // 60
REPORT_COLUMNS = ("dataset", "method", "ph_min", "rmse", "cc", "tl_min", "fit_pct", "n", "hypo", "hyper")

# LSTM at a 30-minute horizon on the original patient cohort; documentation only
REFERENCE_PH30_LSTM = {"rmse": 21.747, "cc": 0.909, "tl_min": 20.385, "fit_pct": 58.523}


def _pair(G, G_hat, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    G = np.asarray(G, dtype=np.float64).ravel()
    G_hat = np.asarray(G_hat, dtype=np.float64).ravel()
    if G.shape != G_hat.shape:
        raise InputError(f"length mismatch: {G.size} actual vs {G_hat.size} predicted")
    if G.size < min_len:
        raise InputError(f"need at least {min_len} samples, got {G.size}")
    return G, G_hat


def rmse(G, G_hat) -> float:
    G, G_hat = _pair(G, G_hat)
    return float(np.sqrt(np.mean((G - G_hat) ** 2)))


def cc(G, G_hat) -> float:
    G, G_hat = _pair(G, G_hat, 2)
    dg = G - G.mean()
    dh = G_hat - G_hat.mean()
    sgg = np.sum(dg * dg)
    shh = np.sum(dh * dh)
    if sgg == 0.0 or shh == 0.0:
        raise UndefinedMetricError("correlation is undefined for a constant series")
    return float(np.clip(np.sum(dg * dh) / np.sqrt(sgg * shh), -1.0, 1.0))


def time_lag(G, G_hat, max_shift_min: int) -> int:
    """Smallest shift (minutes) of the forecast that maximises its correlation with ``G``.

    Shift ``s`` pairs ``G[t]`` with ``G_hat[t + s]``, so a forecast that trails
    the actual signal reports a positive lag.  Shifts whose pair is constant
    are skipped.
    """
    G, G_hat = _pair(G, G_hat)
    max_steps = int(max_shift_min) // STEP_MIN
    if G.size <= max_steps + 2:
        raise InputError(f"series of {G.size} samples is too short for shifts up to {max_shift_min} min")
    best, best_s = -np.inf, None
    for s in range(max_steps + 1):
        try:
            r = cc(G[:G.size - s], G_hat[s:])
        except UndefinedMetricError:
            continue
        if r > best + 1e-12:
            best, best_s = r, s
    if best_s is None:
        raise UndefinedMetricError("every shifted pair is constant")
    return best_s * STEP_MIN


def fit(G, G_hat) -> float:
    G, G_hat = _pair(G, G_hat, 2)
    spread = np.sqrt(np.mean((G - G.mean()) ** 2))
    if spread == 0.0:
        raise UndefinedMetricError("fit is undefined for a constant actual series")
    return float((1.0 - rmse(G, G_hat) / spread) * 100.0)


def _runs(mask: np.ndarray) -> int:
    m = mask.astype(np.int8)
    return int(np.sum(np.diff(np.concatenate([[0], m])) == 1))


def count_events(values) -> tuple[int, int]:
    """(hypo, hyper) events: maximal runs strictly below 70 / strictly above 180 mg/dl."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return _runs(v < HYPO_BELOW), _runs(v > HYPER_ABOVE)


def summarize_dataset(data) -> dict:
    """Samples, mean glucose and hypo/hyper event counts of a series, sub-dataset or pool.

    Missing samples are skipped; events are counted over the present samples
    of each contiguous piece so a gap never joins two runs.
    """
    v = np.asarray(data.values, dtype=np.float64)
    present = v[~np.isnan(v)]
    hypo = hyper = 0
    pieces = getattr(data, "segments", None) or [data]
    for piece in pieces:
        pv = np.asarray(piece.values, dtype=np.float64)
        bounds = np.flatnonzero(np.diff(np.concatenate([[1], np.isnan(pv).astype(np.int8), [1]])))
        for a, b in zip(bounds[::2], bounds[1::2]):
            h, H = count_events(pv[a:b])
            hypo += h
            hyper += H
    return {
        "samples": int(present.size),
        "mean_mgdl": float(present.mean()) if present.size else float("nan"),
        "hypo": hypo,
        "hyper": hyper,
    }


@dataclass
class MetricsReport:
    dataset: str
    method: str
    ph_min: int
    rmse: float
    cc: float
    tl_min: float
    fit_pct: float
    n: int
    hypo: int
    hyper: int

    def row(self) -> dict:
        return asdict(self)


def score(G, G_hat, ph_min: int, dataset: str = "", method: str = "",
          max_shift_min: Optional[int] = None) -> MetricsReport:
    """All four criteria for mg/dl actual/predicted series at one horizon."""
    G, G_hat = _pair(G, G_hat, 2)
    hypo, hyper = count_events(G)
    shift = 2 * ph_min if max_shift_min is None else max_shift_min
    return MetricsReport(dataset, method, int(ph_min), rmse(G, G_hat), cc(G, G_hat),
                         float(time_lag(G, G_hat, shift)), fit(G, G_hat), int(G.size), hypo, hyper)


def evaluate(model, test, method: str = "lstm", max_shift_min: Optional[int] = None) -> MetricsReport:
    """Score a forecaster on a test :class:`~cgmlstm.pipeline.WindowSet`.

    ``model`` is a network :class:`~cgmlstm.network.Model` or any callable
    mapping a ``(N, L)`` array of scaled windows to ``N`` scaled predictions.
    """
    from .network import Model, predict

    if len(test) == 0:
        raise InputError("empty test set")
    if isinstance(model, Model):
        if model.window_len != test.L:
            raise InputError(f"model window {model.window_len} != data window {test.L}")
        preds = predict(model, test.inputs)
    else:
        preds = np.asarray(model(test.inputs), dtype=np.float64)
    scaler = test.scaler
    G = test.raw_targets()
    G_hat = scaler.invert(preds) if scaler is not None else preds
    return score(G, G_hat, test.k * STEP_MIN, test.name, method, max_shift_min)


def mean_report(reports: Iterable[MetricsReport], dataset: str = "mean") -> MetricsReport:
    """Unweighted mean over datasets (how the summary rows aggregate)."""
    reports = list(reports)
    if not reports:
        raise InputError("nothing to average")
    first = reports[0]
    avg = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("rmse", "cc", "tl_min", "fit_pct")}
    return MetricsReport(dataset, first.method, first.ph_min, n=sum(r.n for r in reports),
                         hypo=sum(r.hypo for r in reports), hyper=sum(r.hyper for r in reports), **avg)


def _fmt(v) -> str:
    return format(v, ".6f") if isinstance(v, float) else str(v)


def write_report_csv(reports: Iterable[MetricsReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])


def write_summary_csv(rows: Iterable[tuple[str, str, dict]], path) -> None:
    """Dataset overview: one row per dataset with its usage, size, mean and event counts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "usage", "samples", "mean_glucose_mgdl", "hypo_number", "hyper_number"])
        for name, usage, s in rows:
            w.writerow([name, usage, s["samples"], format(s["mean_mgdl"], ".2f"), s["hypo"], s["hyper"]])
