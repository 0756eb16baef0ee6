"""Scalar minimization on an interval: coarse scan plus golden-section refinement.

The objectives optimized in this package can be flat, or kinked where a bound
saturates at 1, so a coarse scan guards against locking onto the wrong basin
before the golden-section pass narrows the bracket.
"""

from __future__ import annotations

import math

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, lo: float, hi: float, tol: float):
    """Minimize f on [lo, hi]; returns (x, f(x)) with |bracket| <= tol."""
    a, b = float(lo), float(hi)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    if fc <= fd:
        return c, fc
    return d, fd


def scan_then_golden(f, lo: float, hi: float, n_scan: int, tol: float):
    """Scan n_scan evenly spaced points, then refine around the best one.

    Returns (x, f(x)).  The refinement bracket spans one scan cell on either
    side of the scan argmin.
    """
    if n_scan < 2:
        raise ValueError("n_scan must be at least 2")
    step = (hi - lo) / (n_scan - 1)
    xs = [lo + i * step for i in range(n_scan)]
    fs = [f(x) for x in xs]
    i_best = min(range(n_scan), key=fs.__getitem__)
    a = xs[max(i_best - 1, 0)]
    b = xs[min(i_best + 1, n_scan - 1)]
    x_ref, f_ref = golden_section(f, a, b, tol)
    if fs[i_best] < f_ref:
        return xs[i_best], fs[i_best]
    return x_ref, f_ref
