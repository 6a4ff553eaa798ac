"""Check the hand-written backward pass against finite differences.

Run with ``python demos/gradient_check.py``.  For each parameter tensor the
analytic gradient of the prediction is compared with a central difference
computed in extended precision.
"""
import numpy as np

from cgmlstm.network import init_model, model_backward, model_forward

model = init_model(seed=3)
window = np.random.default_rng(3).uniform(0, 1, model.window_len)
print(f"{model.n_parameters} parameters, window of {model.window_len} samples")

pred, cache = model_forward(model, window)
grads = model_backward(model, cache, 1.0)

# %% Central differences on a long-double copy of the model.
wide = model.astype(np.longdouble)
params = wide.named_parameters()
x = window.astype(np.longdouble)
h = np.longdouble(1e-5)
print(f"\n{'tensor':15s} {'size':>5s} {'max rel err':>12s}")
for name, arr in params.items():
    num = np.zeros(arr.shape, dtype=np.longdouble)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = model_forward(wide.with_parameters(params), x)[0]
        arr[idx] = orig - h
        down = model_forward(wide.with_parameters(params), x)[0]
        arr[idx] = orig
        num[idx] = (up - down) / (2 * h)
    err = np.abs(grads[name] - num) / np.maximum(np.maximum(np.abs(grads[name]), np.abs(num)), 1e-8)
    print(f"{name:15s} {arr.size:5d} {float(err.max()):12.2e}")
