"""Classical comparison forecasters: ARI(p, d), linear epsilon-SVR and zero-order hold.

All of them consume the same :class:`~cgmlstm.pipeline.WindowSet` splits as
the network, so train/test boundaries are identical across methods.
Moving-average terms are not estimated; ``ArimaModel`` is ARIMA(p, d, 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import FitError, InputError, ShapeError
from .numerics import SeededRng
from .pipeline import WindowSet

ArrayLike = Union[np.ndarray, Sequence[float]]


@dataclass
class ArimaModel:
    """AR(p) on the ``d``-times differenced series.

    The intercept is estimated only for ``d == 0``; integrated models carry
    no drift, which makes ARIMA(0, 1, 0) the random walk.
    """

    p: int
    d: int
    coefficients: np.ndarray
    intercept: float = 0.0
    fitted: bool = True

    @property
    def label(self) -> str:
        return f"ARI({self.p},{self.d})"


def _segments(series) -> list[np.ndarray]:
    if isinstance(series, np.ndarray) and series.ndim == 1:
        return [series.astype(np.float64)]
    if len(series) and np.ndim(series[0]) == 0:
        return [np.asarray(series, dtype=np.float64)]
    return [np.asarray(s, dtype=np.float64) for s in series]


def arima_fit(series, p: int = 3, d: int = 1) -> ArimaModel:
    """Least-squares ARI(p, d) fit, conditional on the first ``p`` differenced values.

    ``series`` is one mg/dl array or a list of independent segments whose
    regression rows are pooled.
    """
    if p < 0 or d not in (0, 1):
        raise ValueError("need p >= 0 and d in {0, 1}")
    rows, ys = [], []
    for seg in _segments(series):
        if np.isnan(seg).any():
            raise InputError("series contains missing samples")
        if len(seg) <= p + d + 10:
            continue
        y = np.diff(seg, n=d) if d else seg
        lags = [y[p - j - 1:len(y) - j - 1] for j in range(p)]
        X = np.column_stack(lags) if p else np.empty((len(y) - p, 0))
        if d == 0:
            X = np.column_stack([X, np.ones(len(y) - p)])
        rows.append(X)
        ys.append(y[p:])
    if not rows:
        raise InputError(f"series too short for ARI({p},{d}); need more than {p + d + 10} samples")
    X = np.concatenate(rows)
    y = np.concatenate(ys)
    if X.shape[1] == 0 or not y.any():
        # nothing to explain (e.g. a constant series differenced once): zero residuals with zero coefficients
        return ArimaModel(p, d, np.zeros(p), 0.0)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise FitError(f"singular normal equations for ARI({p},{d})")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    coef = beta[:p]
    intercept = float(beta[p]) if d == 0 else 0.0
    return ArimaModel(p, d, coef, intercept)


def arima_forecast(m: ArimaModel, history, k: int):
    """Iterate the recurrence ``k`` steps past ``history``.

    ``history`` may be 1-D or a ``(N, L)`` batch of windows; the result has
    one forecast per row.  ``k == 0`` returns the last observation.
    """
    h = np.asarray(history, dtype=np.float64)
    single = h.ndim == 1
    H = np.atleast_2d(h)
    if H.shape[1] < m.p + m.d or H.shape[1] == 0:
        raise InputError(f"need at least {max(m.p + m.d, 1)} history samples, got {H.shape[1]}")
    last = H[:, -1].copy()
    if k == 0:
        return last[0] if single else last
    y = np.diff(H, n=m.d, axis=1) if m.d else H
    lags = list(y[:, y.shape[1] - m.p:][:, ::-1].T) if m.p else []  # most recent first
    level = last
    for _ in range(k):
        nxt = np.full(H.shape[0], m.intercept)
        for c, lag in zip(m.coefficients, lags):
            nxt = nxt + c * lag
        if m.p:
            lags = [nxt] + lags[:-1]
        level = level + nxt if m.d else nxt
    return level[0] if single else level


def naive_forecast(window, k: int = 0):
    """Zero-order hold: the last value of each window, whatever the horizon."""
    w = np.asarray(window, dtype=np.float64)
    if w.shape[-1] == 0:
        raise InputError("empty window")
    return w[..., -1] if w.ndim > 1 else float(w[-1])


@dataclass
class SvrModel:
    weights: np.ndarray
    bias: float
    epsilon: float
    c: float
    objective_history: list = field(default_factory=list)


def svr_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, epsilon: float, c: float) -> float:
    r = X @ w + b - y
    return float(c * np.sum(np.maximum(0.0, np.abs(r) - epsilon)) + 0.5 * w @ w)


def svr_fit(windows: Union[WindowSet, tuple], epsilon: float = 0.01, c: float = 1.0, epochs: int = 100,
            seed: int = 0, lr: float = 0.5, batch_size: int = 32) -> SvrModel:
    """Linear epsilon-insensitive regression on lag features by stochastic subgradient descent.

    Minimises ``c * sum(max(0, |w.x + b - y| - epsilon)) + |w|^2 / 2``.  Each
    epoch visits the windows in a seeded random order with a step that
    decays as ``1/sqrt(batch number)``.  An epoch that raises the objective
    is undone and the base step halved; an accepted epoch grows it by 20%.
    The recorded objective therefore never increases.
    """
    if isinstance(windows, WindowSet):
        X, y = windows.inputs, windows.targets
    else:
        X, y = (np.asarray(a, dtype=np.float64) for a in windows)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(y):
        raise InputError("svr_fit needs a non-empty (N, L) input array and N targets")
    N, L = X.shape
    rng = SeededRng(seed)
    w = np.zeros(L)
    b = float(np.median(y))
    step = lr / (c * N + 1.0)
    J = svr_objective(w, b, X, y, epsilon, c)
    history = [J]
    for _ in range(epochs):
        w_new, b_new = w.copy(), b
        order = rng.permutation(N)
        for j, s in enumerate(range(0, N, batch_size)):
            idx = order[s:s + batch_size]
            r = X[idx] @ w_new + b_new - y[idx]
            sgn = np.where(np.abs(r) > epsilon, np.sign(r), 0.0) * (c * N / len(idx))
            eta = step / np.sqrt(1.0 + j)
            w_new -= eta * (sgn @ X[idx] + w_new)
            b_new -= eta * float(sgn.sum())
        J_new = svr_objective(w_new, b_new, X, y, epsilon, c)
        if J_new <= J:
            w, b, J = w_new, b_new, J_new
            step *= 1.2
        else:
            step *= 0.5
        history.append(J)
    return SvrModel(w, b, epsilon, c, history)


def svr_predict(m: SvrModel, window):
    x = np.asarray(window, dtype=np.float64)
    if x.shape[-1] != m.weights.shape[0]:
        raise ShapeError(f"window length {x.shape[-1]} does not match {m.weights.shape[0]} SVR weights")
    out = x @ m.weights + m.bias
    return float(out) if x.ndim == 1 else out


def training_segments(train: WindowSet) -> list[np.ndarray]:
    """The unscaled samples touched by the training windows, one array per segment."""
    out = []
    for seg in np.unique(train.segment):
        sel = train.segment == seg
        lo = int(train.start[sel].min())
        hi = int(train.target_index[sel].max())
        out.append(train.source[lo:hi + 1])
    return out


def make_forecaster(method: str, train: WindowSet, *, arima_order=(3, 1), svr_epochs: int = 100,
                    seed: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    """Fit ``method`` ('arima', 'svr' or 'naive') on ``train``.

    Returns a callable mapping scaled ``(N, L)`` windows to scaled
    predictions ``k`` steps ahead, suitable for :func:`cgmlstm.metrics.evaluate`.
    """
    k, scaler = train.k, train.scaler

    def to_mgdl(x):
        return scaler.invert(x) if scaler is not None else np.asarray(x)

    def to_scaled(x):
        return scaler.apply(x) if scaler is not None else np.asarray(x)

    if method == "naive":
        return lambda X: naive_forecast(np.atleast_2d(X), k)
    if method == "arima":
        m = arima_fit(training_segments(train), *arima_order)
        return lambda X: to_scaled(arima_forecast(m, to_mgdl(np.atleast_2d(X)), k))
    if method == "svr":
        m = svr_fit(train, epochs=svr_epochs, seed=seed)
        return lambda X: svr_predict(m, np.atleast_2d(X))
    raise ValueError(f"unknown baseline {method!r}")
