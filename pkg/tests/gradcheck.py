"""Central finite-difference gradient oracle shared by the test suite.

Kept independent of the autodiff implementation: it only calls the
forward function and reads/writes raw parameter buffers.
"""

import numpy as np

from pointvideo.tensor import Tensor, backward, no_grad

STEP = 1e-5
TOL = 1e-4


def numerical_grad(f, t: Tensor, step: float = STEP) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative disagreement between two gradient buffers."""
    num = np.abs(a - b).max() if a.size else 0.0
    den = max(np.abs(a).max() if a.size else 0.0,
              np.abs(b).max() if b.size else 0.0, 1e-12)
    return float(num / den)


def check_grads(f, params: list[Tensor], tol: float = TOL, step: float = STEP) -> float:
    """Assert analytic grads of scalar ``f()`` match finite differences.

    Returns the worst relative error across ``params`` for reporting.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        fd = numerical_grad(f, p, step=step)
        err = rel_error(g, fd)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} (tol {tol}) on shape {p.shape}"
    return worst
