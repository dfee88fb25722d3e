"""Triangle quadrature rules in barycentric coordinates (weights sum to 1)."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class TriangleRule:
    bary: np.ndarray  # (nq, 3)
    weights: np.ndarray  # (nq,), sum 1
    degree: int


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)], [w] * 3


@lru_cache(maxsize=None)
def gauss_degree4() -> TriangleRule:
    """Six-point symmetric rule, exact for polynomials of degree 4."""
    p1, w1 = _orbit3(0.445948490915965, 0.223381589678011)
    p2, w2 = _orbit3(0.091576213509771, 0.109951743655322)
    bary = np.array(p1 + p2)
    w = np.array(w1 + w2)
    return TriangleRule(bary, w / w.sum(), 4)


@lru_cache(maxsize=None)
def collapsed_gauss(n: int) -> TriangleRule:
    """Duffy-collapsed tensor Gauss-Legendre rule, exact to degree ``2n - 2``."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    U, Vv = np.meshgrid(x, x, indexing="ij")
    WU, WV = np.meshgrid(w, w, indexing="ij")
    xi = (U * (1.0 - Vv)).ravel()
    eta = Vv.ravel()
    wt = (WU * WV * (1.0 - Vv)).ravel() * 2.0
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    return TriangleRule(bary, wt, 2 * n - 2)


def rule(degree: int) -> TriangleRule:
    if degree <= 4:
        return gauss_degree4()
    return collapsed_gauss(degree // 2 + 1)
