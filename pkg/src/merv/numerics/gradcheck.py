"""Central finite differences for checking analytic gradients."""
import numpy as np


def finite_diff_grad(f, x, eps=1e-5, coords=None):
    """Estimate the gradient of scalar ``f`` at ``x`` in float64.

    ``coords`` restricts the estimate to a list of flat indices; the other
    entries of the returned array are left at zero.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
