"""LSTM, bidirectional LSTM and dense layers with hand-written backpropagation.

The predictor is a fixed stack::

    window (L x 1) -> LSTM(4, full sequence) -> Bi-LSTM(4 + 4, final states)
                   -> Dense(8, relu) -> Dense(64, relu) -> Dense(8, relu) -> Dense(1)

All layer functions accept either a single example or a leading batch axis;
gradients are always summed over the batch, so a caller wanting the mean
gradient passes ``dL/dpred`` already divided by the batch size.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from .errors import InputError, ShapeError
from .numerics import SeededRng, sigmoid

__all__ = [
    "LSTM_UNITS",
    "DENSE_WIDTHS",
    "LstmParams",
    "LstmState",
    "StepCache",
    "SequenceCache",
    "DenseParams",
    "Model",
    "ForwardCache",
    "lstm_cell_step",
    "lstm_forward",
    "lstm_backward",
    "bilstm_forward",
    "bilstm_backward",
    "dense_forward",
    "dense_backward",
    "model_forward",
    "forward_batch",
    "model_backward",
    "predict",
    "init_model",
]

LSTM_UNITS = 4
# (width, activation) for every dense layer after the Bi-LSTM
DENSE_WIDTHS = ((8, "relu"), (64, "relu"), (8, "relu"), (1, "linear"))
GATES = ("i", "f", "C", "o")


@dataclass
class LstmParams:
    """Weights of one LSTM cell; each matrix acts on ``[h_prev, x]``."""

    W_i: np.ndarray
    W_f: np.ndarray
    W_C: np.ndarray
    W_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_C: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        shape = self.W_i.shape
        for g in GATES:
            W, b = getattr(self, "W_" + g), getattr(self, "b_" + g)
            if W.ndim != 2 or W.shape != shape:
                raise ShapeError(f"W_{g} has shape {W.shape}, expected {shape}")
            if b.shape != (shape[0],):
                raise ShapeError(f"b_{g} has shape {b.shape}, expected ({shape[0]},)")
        if shape[1] <= shape[0]:
            raise ShapeError(f"gate matrices {shape} leave no room for input features")

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        W = np.concatenate([self.W_i, self.W_f, self.W_C, self.W_o], axis=0)
        b = np.concatenate([self.b_i, self.b_f, self.b_C, self.b_o])
        return W, b

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"W_{g}": getattr(self, f"W_{g}") for g in GATES} | {
            f"b_{g}": getattr(self, f"b_{g}") for g in GATES
        }

    @classmethod
    def zeros(cls, hidden: int, input_dim: int) -> "LstmParams":
        n = hidden + input_dim
        return cls(**{f"W_{g}": np.zeros((hidden, n)) for g in GATES},
                   **{f"b_{g}": np.zeros(hidden) for g in GATES})


@dataclass
class LstmState:
    h: np.ndarray
    C: np.ndarray


@dataclass
class StepCache:
    """Gate values recorded at one timestep (``g`` is the candidate memory)."""

    z: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    C_prev: np.ndarray
    C: np.ndarray
    tanh_C: np.ndarray
    h: np.ndarray


def _as_float(x) -> np.ndarray:
    # float64 unless the caller already works in a wider float (finite-difference oracles do)
    x = np.asarray(x)
    return x if x.dtype in (np.float64, np.longdouble) else x.astype(np.float64)


def lstm_cell_step(p: LstmParams, prev: LstmState, x: np.ndarray) -> tuple[LstmState, StepCache]:
    """Advance one timestep.  ``x`` is ``(D,)`` or ``(B, D)``."""
    x = _as_float(x)
    if x.shape[-1] != p.input_dim or prev.h.shape[-1] != p.hidden:
        raise ShapeError(
            f"cell expects h of width {p.hidden} and x of width {p.input_dim}, "
            f"got {prev.h.shape} and {x.shape}")
    W, b = p.stacked()
    return _step(W, b, p.hidden, prev.h, prev.C, x)


def _step(W, b, H, h_prev, C_prev, x):
    z = np.concatenate([h_prev, x], axis=-1)
    a = z @ W.T + b
    s = sigmoid(a)
    i, f, o = s[..., :H], s[..., H:2 * H], s[..., 3 * H:]
    g = np.tanh(a[..., 2 * H:3 * H])
    C = f * C_prev + i * g
    tanh_C = np.tanh(C)
    h = o * tanh_C
    return LstmState(h, C), StepCache(z, i, f, g, o, C_prev, C, tanh_C, h)


class SequenceCache:
    """Per-timestep gate values of one :func:`lstm_forward` call, stacked on axis 0.

    Indexing yields the :class:`StepCache` of that timestep.
    """

    def __init__(self, xs, hs, i, f, g, o, C, tanh_C):
        self.xs, self.hs = xs, hs
        self.i, self.f, self.g, self.o, self.C, self.tanh_C = i, f, g, o, C, tanh_C

    def __len__(self) -> int:
        return self.i.shape[0]

    @property
    def h_prev(self) -> np.ndarray:
        return np.concatenate([np.zeros_like(self.tanh_C[:1]), np.moveaxis(self.hs, -2, 0)[:-1]])

    @property
    def C_prev(self) -> np.ndarray:
        return np.concatenate([np.zeros_like(self.C[:1]), self.C[:-1]])

    def __getitem__(self, t: int) -> StepCache:
        h_prev, C_prev = self.h_prev[t], self.C_prev[t]
        x = self.xs[..., t, :]
        return StepCache(np.concatenate([h_prev, x], axis=-1), self.i[t], self.f[t], self.g[t], self.o[t],
                         C_prev, self.C[t], self.tanh_C[t], np.moveaxis(self.hs, -2, 0)[t])


def lstm_forward(p: LstmParams, xs) -> tuple[np.ndarray, SequenceCache]:
    """Run the cell over ``xs`` of shape ``(T, D)`` or ``(B, T, D)`` from a zero state.

    Returns the hidden sequence with the same leading axes as ``xs`` and the
    gate values needed by :func:`lstm_backward`.
    """
    xs = _as_float(xs)
    if xs.ndim < 2 or xs.shape[-2] == 0:
        raise InputError("lstm_forward needs a non-empty sequence")
    if xs.shape[-1] != p.input_dim:
        raise ShapeError(f"input width {xs.shape[-1]} does not match cell input {p.input_dim}")
    H = p.hidden
    W, b = p.stacked()
    # sigmoid(x) = (1 + tanh(x / 2)) / 2: halve the sigmoid-gate rows so one tanh serves all gates
    half = np.full(4 * H, 0.5)
    half[2 * H:3 * H] = 1.0
    Wh_T = (W[:, :H] * half[:, None]).T
    ax = xs @ (W[:, H:] * half[:, None]).T + b * half
    lead = xs.shape[:-2]
    dt = np.result_type(xs, W)
    h = np.zeros(lead + (H,), dtype=dt)
    C = np.zeros(lead + (H,), dtype=dt)
    out = {k: [] for k in ("s", "g", "C", "tanh_C", "h")}
    for t in range(xs.shape[-2]):
        a = np.tanh(ax[..., t, :] + h @ Wh_T)
        s = 0.5 * a + 0.5
        C = s[..., H:2 * H] * C + s[..., :H] * a[..., 2 * H:3 * H]
        tanh_C = np.tanh(C)
        h = s[..., 3 * H:] * tanh_C
        out["s"].append(s)
        out["g"].append(a[..., 2 * H:3 * H])
        out["C"].append(C)
        out["tanh_C"].append(tanh_C)
        out["h"].append(h)
    hs = np.stack(out["h"], axis=-2)
    S = np.stack(out["s"])
    return hs, SequenceCache(xs, hs, S[..., :H], S[..., H:2 * H], np.stack(out["g"]), S[..., 3 * H:],
                             np.stack(out["C"]), np.stack(out["tanh_C"]))


def lstm_backward(p: LstmParams, cache: SequenceCache, dhs: np.ndarray
                  ) -> tuple[LstmParams, np.ndarray]:
    """Backpropagate through time.

    ``dhs`` holds the upstream gradient for every emitted hidden vector (same
    shape as the forward output).  Returns parameter gradients, summed over
    any batch axis, and the gradient with respect to the inputs.
    """
    H = p.hidden
    W, _ = p.stacked()
    T = len(cache)
    lead = dhs.shape[:-2]
    i, f, g, o, tanh_C = cache.i, cache.f, cache.g, cache.o, cache.tanh_C
    C_prev = cache.C_prev
    # da_{i,f,C} = dC * P_{i,f,C};  da_o = dh * Q;  dC gains dh * R from h = o * tanh(C)
    P = np.stack([g * i * (1.0 - i), C_prev * f * (1.0 - f), i * (1.0 - g * g)], axis=-2)
    Q = tanh_C * o * (1.0 - o)
    R = o * (1.0 - tanh_C * tanh_C)
    Wh = W[:, :H]
    das = np.empty((T,) + lead + (4 * H,), dtype=W.dtype)
    dh_next = np.zeros(lead + (H,), dtype=W.dtype)
    dC = np.zeros(lead + (H,), dtype=W.dtype)
    for t in range(T - 1, -1, -1):
        dh = dhs[..., t, :] + dh_next
        if t + 1 < T:
            dC = dC * f[t + 1]
        dC = dC + dh * R[t]
        da = das[t]
        da[..., :3 * H] = (P[t] * dC[..., None, :]).reshape(lead + (3 * H,))
        da[..., 3 * H:] = dh * Q[t]
        dh_next = da @ Wh
    das_seq = np.moveaxis(das, 0, -2)  # (..., T, 4H)
    dxs = das_seq @ W[:, H:]
    das2 = das_seq.reshape(-1, 4 * H)
    zs = np.concatenate([np.moveaxis(cache.h_prev, 0, -2), cache.xs], axis=-1)
    dW = das2.T @ zs.reshape(-1, W.shape[1])
    db = das2.sum(axis=0)
    grads = LstmParams(
        **{f"W_{g}": dW[k * H:(k + 1) * H] for k, g in enumerate(GATES)},
        **{f"b_{g}": db[k * H:(k + 1) * H] for k, g in enumerate(GATES)},
    )
    return grads, dxs


def bilstm_forward(pf: LstmParams, pb: LstmParams, xs):
    """Final forward state concatenated with the final backward state.

    The backward direction reads ``xs`` reversed, so its final state is the
    one aligned with ``xs[0]``.
    """
    xs = _as_float(xs)
    if xs.ndim < 2 or xs.shape[-2] == 0:
        raise InputError("bilstm_forward needs a non-empty sequence")
    hf, cf = lstm_forward(pf, xs)
    hb, cb = lstm_forward(pb, xs[..., ::-1, :])
    out = np.concatenate([hf[..., -1, :], hb[..., -1, :]], axis=-1)
    return out, (cf, cb, xs.shape)


def bilstm_backward(pf: LstmParams, pb: LstmParams, caches, dout: np.ndarray):
    cf, cb, shape = caches
    Hf = pf.hidden
    dhf = np.zeros(shape[:-1] + (Hf,), dtype=dout.dtype)
    dhb = np.zeros(shape[:-1] + (pb.hidden,), dtype=dout.dtype)
    dhf[..., -1, :] = dout[..., :Hf]
    dhb[..., -1, :] = dout[..., Hf:]
    gf, dxf = lstm_backward(pf, cf, dhf)
    gb, dxb = lstm_backward(pb, cb, dhb)
    return gf, gb, dxf + dxb[..., ::-1, :]


@dataclass
class DenseParams:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense W {self.W.shape} and b {self.b.shape} disagree")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


def dense_forward(p: DenseParams, v) -> np.ndarray:
    v = _as_float(v)
    if v.shape[-1] != p.W.shape[1]:
        raise ShapeError(f"dense layer expects width {p.W.shape[1]}, got {v.shape[-1]}")
    a = v @ p.W.T + p.b
    return np.maximum(a, 0.0) if p.activation == "relu" else a


def dense_backward(p: DenseParams, v: np.ndarray, out: np.ndarray, dout: np.ndarray):
    """Gradients of a dense layer given its input ``v`` and output ``out``."""
    da = dout * (out > 0.0) if p.activation == "relu" else dout
    da2 = da.reshape(-1, p.W.shape[0])
    dW = da2.T @ v.reshape(-1, p.W.shape[1])
    return DenseParams(dW, da2.sum(axis=0), p.activation), da @ p.W


@dataclass
class Model:
    """Parameters of the full stack plus the metadata that travels with it."""

    lstm: LstmParams
    bilstm_fwd: LstmParams
    bilstm_bwd: LstmParams
    dense: list[DenseParams]
    window_len: int
    scaler: Optional[Any] = None
    train_config: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        H = LSTM_UNITS
        if (self.lstm.hidden, self.bilstm_fwd.hidden, self.bilstm_bwd.hidden) != (H, H, H):
            raise ShapeError("every recurrent layer must have 4 units")
        if self.bilstm_fwd.input_dim != H or self.bilstm_bwd.input_dim != H:
            raise ShapeError("Bi-LSTM must consume the 4-wide LSTM sequence")
        widths = tuple((d.W.shape[0], d.activation) for d in self.dense)
        if widths != DENSE_WIDTHS:
            raise ShapeError(f"dense stack {widths} differs from {DENSE_WIDTHS}")
        prev = 2 * H
        for d in self.dense:
            if d.W.shape[1] != prev:
                raise ShapeError(f"dense input width {d.W.shape[1]} does not chain from {prev}")
            prev = d.W.shape[0]
        if self.window_len < 1:
            raise ShapeError("window_len must be positive")

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("lstm", "bilstm_fwd", "bilstm_bwd"):
            for k, v in getattr(self, name).arrays().items():
                out[f"{name}.{k}"] = v
        for j, d in enumerate(self.dense):
            out[f"dense{j}.W"] = d.W
            out[f"dense{j}.b"] = d.b
        return out

    def with_parameters(self, params: dict[str, np.ndarray]) -> "Model":
        """Copy of the model with parameters replaced from a name->array mapping."""
        def lstm(name):
            return LstmParams(**{k: _as_float(params[f"{name}.{k}"]).copy()
                                 for k in self.lstm.arrays()})
        dense = [DenseParams(_as_float(params[f"dense{j}.W"]).copy(),
                             _as_float(params[f"dense{j}.b"]).copy(), d.activation)
                 for j, d in enumerate(self.dense)]
        return replace(self, lstm=lstm("lstm"), bilstm_fwd=lstm("bilstm_fwd"),
                       bilstm_bwd=lstm("bilstm_bwd"), dense=dense)

    def astype(self, dtype) -> "Model":
        return self.with_parameters({k: v.astype(dtype) for k, v in self.named_parameters().items()})

    def copy(self) -> "Model":
        return self.with_parameters(self.named_parameters())

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.named_parameters().values())


@dataclass
class ForwardCache:
    windows: np.ndarray
    lstm_caches: list
    lstm_out: np.ndarray
    bilstm_caches: tuple
    dense_inputs: list
    dense_outputs: list
    model_id: int


def forward_batch(m: Model, windows) -> tuple[np.ndarray, ForwardCache]:
    """Predict a ``(B, L)`` batch of scaled windows; returns ``(B,)`` predictions."""
    X = _as_float(windows)
    if X.ndim != 2 or X.shape[1] != m.window_len:
        raise InputError(f"expected windows of shape (B, {m.window_len}), got {X.shape}")
    hs, lc = lstm_forward(m.lstm, X[:, :, None])
    v, bc = bilstm_forward(m.bilstm_fwd, m.bilstm_bwd, hs)
    ins, outs = [], []
    for d in m.dense:
        ins.append(v)
        v = dense_forward(d, v)
        outs.append(v)
    return v[:, 0], ForwardCache(X, lc, hs, bc, ins, outs, id(m))


def predict(m: Model, windows, batch_size: int = 4096) -> np.ndarray:
    X = _as_float(windows)
    if X.ndim == 1:
        X = X[None, :]
    parts = [forward_batch(m, X[s:s + batch_size])[0] for s in range(0, len(X), batch_size)]
    return np.concatenate(parts) if parts else np.empty(0)


def model_forward(m: Model, window) -> tuple[float, ForwardCache]:
    """Prediction for one window of ``m.window_len`` scaled samples."""
    w = _as_float(window)
    if w.ndim != 1 or w.shape[0] != m.window_len:
        raise InputError(f"window length {w.shape} does not match L={m.window_len}")
    preds, cache = forward_batch(m, w[None, :])
    return preds[0].item() if preds.dtype == np.float64 else preds[0], cache


def model_backward(m: Model, cache: ForwardCache, dL_dpred) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the loss w.r.t. every parameter of ``m``.

    ``dL_dpred`` is a scalar or one value per window in the cached batch; the
    result is keyed like :meth:`Model.named_parameters` and sums over windows.
    """
    if cache.model_id != id(m):
        raise RuntimeError("forward cache was produced by a different model")
    B = cache.windows.shape[0]
    dpred = np.broadcast_to(np.asarray(dL_dpred, dtype=np.float64), (B,))
    grads: dict[str, np.ndarray] = {}
    dv = dpred[:, None]
    for j in range(len(m.dense) - 1, -1, -1):
        g, dv = dense_backward(m.dense[j], cache.dense_inputs[j], cache.dense_outputs[j], dv)
        grads[f"dense{j}.W"], grads[f"dense{j}.b"] = g.W, g.b
    gf, gb, dhs = bilstm_backward(m.bilstm_fwd, m.bilstm_bwd, cache.bilstm_caches, dv)
    g1, _ = lstm_backward(m.lstm, cache.lstm_caches, dhs)
    for name, g in (("lstm", g1), ("bilstm_fwd", gf), ("bilstm_bwd", gb)):
        for k, v in g.arrays().items():
            grads[f"{name}.{k}"] = v
    return {k: grads[k] for k in m.named_parameters()}


def _glorot(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, (rows, cols))


def _init_lstm(rng: SeededRng, hidden: int, input_dim: int) -> LstmParams:
    n = hidden + input_dim
    p = LstmParams(**{f"W_{g}": _glorot(rng, hidden, n) for g in GATES},
                   **{f"b_{g}": np.zeros(hidden) for g in GATES})
    p.b_f[:] = 1.0
    return p


def init_model(seed: int, L: int = 12) -> Model:
    """Glorot-uniform weights, zero biases except unit forget-gate biases."""
    rng = SeededRng(seed)
    H = LSTM_UNITS
    lstm = _init_lstm(rng, H, 1)
    fwd = _init_lstm(rng, H, H)
    bwd = _init_lstm(rng, H, H)
    dense, prev = [], 2 * H
    for width, act in DENSE_WIDTHS:
        dense.append(DenseParams(_glorot(rng, width, prev), np.zeros(width), act))
        prev = width
    return Model(lstm, fwd, bwd, dense, int(L), meta={"init_seed": int(seed)})
