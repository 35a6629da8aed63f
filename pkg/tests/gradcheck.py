"""Finite-difference gradient utilities shared by the test modules.

These stay deliberately independent of the autodiff engine: they only
ever call a scalar-valued function on perturbed raw arrays.
"""

import numpy as np

from relvae.autodiff import Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max |a-n| / max(floor, |a|, |n|) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float((np.abs(a - n) / denom).max())


def check_param_grads(loss_fn, params: dict[str, Tensor], eps: float = 1e-6,
                      floor: float = 1e-3) -> float:
    """Compare backward() grads of loss_fn() against central differences.

    loss_fn must rebuild the forward pass from the current parameter
    values on every call. Returns the worst relative error over all
    parameter coordinates.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached parameter {name}"
        analytic = p.grad.copy()
        base = p.data

        def f_at(x, _p=p, _base=base):
            _p.data = x.astype(_base.dtype)
            try:
                return float(loss_fn().data)
            finally:
                _p.data = _base
        numeric = numeric_grad(f_at, base.copy(), eps=eps)
        worst = max(worst, max_rel_error(analytic, numeric, floor=floor))
    return worst
