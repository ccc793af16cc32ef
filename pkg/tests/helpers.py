"""Shared test utilities: the finite-difference gradient oracle.

The oracle perturbs raw parameter buffers and re-runs the forward
closure, so it stays independent of the reverse-mode path it checks.
"""

import numpy as np

from gridattn.autodiff import Tensor, backward

FD_EPS = 1e-4
FD_RTOL = 1e-4


def numeric_grad(forward, param: Tensor, eps: float = FD_EPS) -> np.ndarray:
    """Central finite differences of scalar ``forward()`` w.r.t. ``param``."""
    base = param.data.copy()
    flat = base.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        param.data = flat.reshape(base.shape)
        f_plus = float(forward().data)
        flat[i] = orig - eps
        param.data = flat.reshape(base.shape)
        f_minus = float(forward().data)
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2.0 * eps)
    param.data = base
    return g.reshape(base.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def check_grads(forward, params, rtol: float = FD_RTOL) -> float:
    """Assert analytic grads of ``forward()`` match finite differences.

    ``params`` is a dict name -> Tensor. Returns the worst relative error.
    """
    for p in params.values():
        p.zero_grad()
    loss = forward()
    backward(loss)
    worst = 0.0
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached {name}"
        num = numeric_grad(forward, p)
        err = rel_err(p.grad, num)
        assert err < rtol, f"gradient mismatch for {name}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst
