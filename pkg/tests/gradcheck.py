"""Central finite-difference gradient checking used across the test suite."""

import numpy as np


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at array x (float64)."""
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


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return np.linalg.norm((a - b).ravel()) / denom


def check_grad(f, analytic, x, eps=1e-5, tol=1e-5):
    """Assert analytic gradient of scalar f matches central differences."""
    num = numeric_grad(f, x, eps=eps)
    err = rel_err(analytic, num)
    assert err < tol, f"gradient mismatch: rel err {err:.3g} >= {tol}"
    return err
