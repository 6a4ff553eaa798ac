"""Reference computations that share no code with the package under test.

Each oracle is written from the defining equations with plain Python
floats (or numpy extended precision) so that agreement with the vectorised
implementation is evidence, not tautology.
"""
import math

import numpy as np


def triple_loop_matmul(a, b):
    n, m = len(a), len(a[0])
    p = len(b[0])
    assert len(b) == m
    out = [[0.0] * p for _ in range(n)]
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for r in range(m):
                acc += float(a[i][r]) * float(b[r][j])
            out[i][j] = acc
    return out


def logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_lstm_step(w, h_prev, c_prev, x):
    """One step of a 1-unit, 1-feature cell.

    ``w`` maps gate name to ``(weight on h_prev, weight on x, bias)``.
    """
    def pre(g):
        wh, wx, b = w[g]
        return wh * h_prev + wx * x + b

    i = logistic(pre("i"))
    f = logistic(pre("f"))
    g = math.tanh(pre("C"))
    o = logistic(pre("o"))
    c = f * c_prev + i * g
    h = o * math.tanh(c)
    return {"i": i, "f": f, "g": g, "o": o, "C": c, "h": h}


def fd_gradient(model, window, forward, step=1e-5):
    """Central differences of the scalar prediction w.r.t. every parameter.

    The model is promoted to ``np.longdouble`` so that the quotient is
    limited by truncation error rather than by float64 cancellation.
    """
    wide = model.astype(np.longdouble)
    params = wide.named_parameters()
    x = np.asarray(window, dtype=np.longdouble)
    h = np.longdouble(step)
    grads = {}
    for name, arr in params.items():
        g = np.zeros(arr.shape, dtype=np.longdouble)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = forward(wide.with_parameters(params), x)
            arr[idx] = orig - h
            down = forward(wide.with_parameters(params), x)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.longdouble)
    n = np.asarray(numeric, dtype=np.longdouble)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def hand_arima_p2(coefs, history, k):
    """ARI(2,1) forecast by explicit iteration over differences."""
    y = list(history)
    d = [y[t] - y[t - 1] for t in range(1, len(y))]
    level = y[-1]
    for _ in range(k):
        nxt = coefs[0] * d[-1] + coefs[1] * d[-2]
        d.append(nxt)
        level += nxt
    return level
