import numpy as np


def numeric_grad(f, arrays, index, step=1e-5):
    """Central finite-difference gradient of scalar f w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[index])
    flat = g.reshape(-1)
    x = base[index].reshape(-1)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = f(base)
        x[i] = orig - step
        fm = f(base)
        x[i] = orig
        flat[i] = (fp - fm) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, tol=1e-5):
    denom = max(1.0, float(np.max(np.abs(numeric))))
    err = float(np.max(np.abs(analytic - numeric))) / denom
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
