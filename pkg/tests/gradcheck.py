"""Central finite-difference oracle used across the test suite."""

import numpy as np


def finite_difference(f, arrays, eps=1e-5):
    """Per-element central differences of scalar ``f()`` wrt each array.

    ``f`` rebuilds its computation from the (mutated in place) arrays on
    every call, so it stays independent of the autodiff path it checks.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + eps
            f_plus = f()
            arr[i] = orig - eps
            f_minus = f()
            arr[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a)
    b = np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
