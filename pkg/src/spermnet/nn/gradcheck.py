"""Central finite-difference gradient checking."""

from __future__ import annotations

import hashlib

import numpy as np

from . import functional


def _evaluate(f, track: bool):
    if not track:
        return float(f()), None
    functional._kink_trace = []
    try:
        value = float(f())
        h = hashlib.sha1()
        for arr in functional._kink_trace:
            h.update(np.ascontiguousarray(arr).tobytes())
        return value, h.digest()
    finally:
        functional._kink_trace = None


def numerical_grad(f, arr: np.ndarray, step: float = 1e-3, indices=None, track_kinks: bool = False):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    Only flat positions in ``indices`` are evaluated; the rest stay zero.  With
    ``track_kinks`` a boolean mask is returned as well, false wherever a ReLU
    mask or pooling argmax differs between the stencil points and the base
    point (the difference quotient straddles a kink there).
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    valid = np.ones(arr.shape, dtype=bool)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    vflat = valid.reshape(-1)
    _, base = _evaluate(f, track_kinks)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        hi, sig_hi = _evaluate(f, track_kinks)
        flat[i] = orig - step
        lo, sig_lo = _evaluate(f, track_kinks)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
        vflat[i] = sig_hi == base and sig_lo == base
    return (grad, valid) if track_kinks else grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0
