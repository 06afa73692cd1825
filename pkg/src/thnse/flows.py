"""Closed-form velocity fields used as initial data and reference solutions."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaylorGreen:
    """Decaying Taylor-Green vortex with unit viscosity.

    u = (sin x1 cos x2, -cos x1 sin x2, 0) exp(-2t),
    p = (cos 2x1 + cos 2x2) exp(-4t) / 4.
    In 3D the planar vortex is extruded along x3 (still an exact solution).
    """

    dim: int = 2

    def velocity(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        s1, c1 = np.sin(x[..., 0]), np.cos(x[..., 0])
        s2, c2 = np.sin(x[..., 1]), np.cos(x[..., 1])
        u = np.zeros(x.shape)
        u[..., 0] = s1 * c2
        u[..., 1] = -c1 * s2
        return u * np.exp(-2.0 * t)

    def velocity_gradient(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        """(..., component, derivative)."""
        s1, c1 = np.sin(x[..., 0]), np.cos(x[..., 0])
        s2, c2 = np.sin(x[..., 1]), np.cos(x[..., 1])
        g = np.zeros(x.shape + (self.dim,))
        g[..., 0, 0] = c1 * c2
        g[..., 0, 1] = -s1 * s2
        g[..., 1, 0] = s1 * s2
        g[..., 1, 1] = -c1 * c2
        return g * np.exp(-2.0 * t)

    def pressure(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return 0.25 * (np.cos(2 * x[..., 0]) + np.cos(2 * x[..., 1])) * np.exp(-4.0 * t)

    def convection(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        """(u . grad) u."""
        return np.einsum("...j,...ij->...i", self.velocity(x, t), self.velocity_gradient(x, t))

    def kinetic_energy(self, t: float = 0.0) -> float:
        """1/2 ||u(t)||_2^2 over the 2pi-box."""
        return 0.25 * (2 * np.pi) ** self.dim * np.exp(-4.0 * t)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.velocity(x, 0.0)


@dataclass(frozen=True)
class RandomDivergenceFree:
    """Seeded low-wavenumber field, the curl of a trigonometric potential.

    2D: u = (d2 psi, -d1 psi) for a stream function psi. 3D: u = curl A.
    Modes with |k|_inf <= kmax are weighted by 1/|k|^2.
    """

    dim: int
    seed: int
    kmax: int = 2

    def _modes(self):
        rng = np.random.default_rng(self.seed)
        ks = [k for k in itertools.product(range(-self.kmax, self.kmax + 1), repeat=self.dim)
              if any(k)]
        ks = np.array(ks, dtype=float)
        ncomp = 1 if self.dim == 2 else 3
        a = rng.standard_normal((len(ks), ncomp))
        b = rng.standard_normal((len(ks), ncomp))
        scale = 1.0 / np.sum(ks**2, axis=1)
        return ks, a * scale[:, None], b * scale[:, None]

    def potential_gradient(self, x: np.ndarray) -> np.ndarray:
        """(..., ncomp, dim): gradients of every potential component."""
        ks, a, b = self._modes()
        phase = x @ ks.T  # (..., nk)
        dc = -np.sin(phase)
        ds = np.cos(phase)
        # d/dx_j [a cos(k.x) + b sin(k.x)] = k_j (-a sin + b cos)
        coef = dc[..., :, None] * a[None, :, :] + ds[..., :, None] * b[None, :, :]
        return np.einsum("...kc,kj->...cj", coef, ks)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        g = self.potential_gradient(x)
        if self.dim == 2:
            return np.stack([g[..., 0, 1], -g[..., 0, 0]], axis=-1)
        return np.stack([
            g[..., 2, 1] - g[..., 1, 2],
            g[..., 0, 2] - g[..., 2, 0],
            g[..., 1, 0] - g[..., 0, 1],
        ], axis=-1)
