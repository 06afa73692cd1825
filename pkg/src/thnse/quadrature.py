"""Positive-weight quadrature on the reference simplex.

Rules are collapsed (conical) Gauss-Jacobi products: the cube [0,1]^d is
mapped onto the simplex by x1 = u1, x2 = u2 (1 - u1), x3 = u3 (1 - u1)(1 - u2),
and the Jacobian factors are absorbed in Gauss-Jacobi weights, so every
weight is positive and exactness holds to any requested degree.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil, factorial, prod

import numpy as np
from scipy.special import roots_jacobi

DEFAULT_DEGREE = {2: 8, 3: 12}


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (npts, dim) on the reference simplex
    weights: np.ndarray  # (npts,), sum = 1/dim!
    degree: int

    def same_as(self, other: "QuadratureRule") -> bool:
        return (self.degree == other.degree and self.points.shape == other.points.shape
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.weights, other.weights))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.weights)


def _gauss_jacobi_01(k: int, a: int):
    """Nodes/weights for int_0^1 f(u) (1 - u)^a du."""
    t, w = roots_jacobi(k, a, 0)
    return (1.0 + t) / 2.0, w / 2.0 ** (a + 1)


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int) -> QuadratureRule:
    k = max(1, ceil((degree + 1) / 2))
    nodes, weights = zip(*(_gauss_jacobi_01(k, dim - 1 - j) for j in range(dim)))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrid = np.meshgrid(*weights, indexing="ij")
    u = np.stack([g.ravel() for g in grids], axis=1)
    w = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)

    x = np.empty_like(u)
    scale = np.ones(len(u))
    for j in range(dim):
        x[:, j] = u[:, j] * scale
        scale = scale * (1.0 - u[:, j])
    return QuadratureRule(points=x, weights=w, degree=degree)


def simplex_moment(exponents) -> float:
    """Exact integral of prod x_i**a_i over the reference simplex."""
    exponents = list(exponents)
    return prod(factorial(a) for a in exponents) / factorial(sum(exponents) + len(exponents))


def default_rule(dim: int) -> QuadratureRule:
    return simplex_rule(dim, DEFAULT_DEGREE[dim])
