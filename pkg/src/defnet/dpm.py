"""Brute-force quadratic part-deformation score, kept free of any code shared
with :mod:`defnet.defpool` so it can serve as ground truth.

Coordinates are ``(i, j) = (row, col)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError


@dataclass(frozen=True)
class QuadraticDeformation:
    a1: float
    a2: float
    a3: float
    a4: float
    b1: int
    b2: int

    def a5(self) -> float:
        if self.a1 <= 0 or self.a2 <= 0:
            raise ParameterError("a5 needs a1 > 0 and a2 > 0")
        return self.a3 * self.a3 / (4.0 * self.a1) + self.a4 * self.a4 / (4.0 * self.a2)


def _check(m, q):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ParameterError("oracle handles a single part map")
        m = m[0]
    H, W = m.shape
    if not (0 <= q.b1 < H and 0 <= q.b2 < W):
        raise ParameterError("anchor outside map")
    return m


def dpm_penalized_map(m, q: QuadraticDeformation) -> np.ndarray:
    """Completed-square form ``m - a1 (i - b1 + a3/2a1)^2 - a2 (j - b2 + a4/2a2)^2``.

    With ``a1 == 0`` (resp. ``a2 == 0``) the row (column) term is taken as
    the linear limit ``a3 (i - b1)``, i.e. no curvature.
    """
    m2 = _check(m, q)
    H, W = m2.shape
    out = np.empty((1, H, W))
    for i in range(H):
        for j in range(W):
            if q.a1 != 0:
                ti = q.a1 * (i - q.b1 + q.a3 / (2.0 * q.a1)) ** 2
            else:
                ti = q.a3 * (i - q.b1)
            if q.a2 != 0:
                tj = q.a2 * (j - q.b2 + q.a4 / (2.0 * q.a2)) ** 2
            else:
                tj = q.a4 * (j - q.b2)
            out[0, i, j] = m2[i, j] - ti - tj
    return out


def dpm_expanded_map(m, q: QuadraticDeformation) -> np.ndarray:
    """Expanded form ``m - a1 d1 - a2 d2 - a3 d3 - a4 d4 - a5``."""
    m2 = _check(m, q)
    H, W = m2.shape
    a5 = q.a5()
    out = np.empty((1, H, W))
    for i in range(H):
        for j in range(W):
            d1 = (i - q.b1) ** 2
            d2 = (j - q.b2) ** 2
            d3 = i - q.b1
            d4 = j - q.b2
            out[0, i, j] = m2[i, j] - q.a1 * d1 - q.a2 * d2 - q.a3 * d3 - q.a4 * d4 - a5
    return out


def dpm_score(m, q: QuadraticDeformation) -> float:
    pm = dpm_penalized_map(m, q)
    best = -np.inf
    for v in pm.ravel():
        if v > best:
            best = v
    return float(best)
