"""Shared numeric helpers for the test suite."""

import numpy as np


def rand(rng, *shape):
    return rng.standard_normal(shape)


def central_diff(f, arr, h=1e-6, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    it = np.ndindex(arr.shape) if idx is None else idx
    for i in it:
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        dn = f()
        arr[i] = old
        out[i] = (up - dn) / (2 * h)
    return out


def rel_err(a, b):
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
