"""Assembled bilinear forms and the skew-symmetrized convection form.

    b_h(u, v, w) = ((u . grad) v, w) + 1/2 ((div u) v, w)

vanishes for w = v whenever the integral is computed exactly, because the
integrand is then div(u |v|^2 / 2) of a continuous piecewise polynomial.
Assembly therefore refuses quadrature rules below the degree of the
trilinear integrand.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigurationError
from .spaces import Field, PressureSpace, VelocitySpace, divergence_matrix


def required_degree(dim: int) -> int:
    """Polynomial degree of (u . grad v) . w for MINI fields."""
    return 3 * (dim + 1) - 1


@dataclass(eq=False)
class AssembledForms:
    vspace: VelocitySpace
    pspace: PressureSpace
    M: sp.csr_matrix  # velocity mass
    K: sp.csr_matrix  # vector Laplacian (componentwise stiffness)
    B: sp.csr_matrix  # (B u)_a = (div u, q_a)
    Mp: sp.csr_matrix  # pressure mass
    velocity_mean_rows: np.ndarray  # (dim, nu)
    pressure_mean_row: np.ndarray  # (np,)

    @property
    def dim(self) -> int:
        return self.vspace.dim

    @property
    def mesh(self):
        return self.vspace.mesh

    def nonlinear_scalar(self, w: np.ndarray) -> sp.csr_matrix:
        """Scalar block of v -> b_h(w, v, .), identical for every component."""
        V = self.vspace
        wv = V.evaluate(w)
        divw = np.trace(V.gradient(w), axis1=2, axis2=3)
        G, Phi = V.basis_grads, V.basis_values
        A = np.einsum("cqd,cqjd->cqj", wv, G) + 0.5 * divw[..., None] * Phi[None, :, :]
        return V._assemble(np.einsum("cq,qi,cqj->cij", V.weights, Phi, A))

    def nonlinear_matrix(self, w: np.ndarray) -> sp.csr_matrix:
        return sp.block_diag([self.nonlinear_scalar(w)] * self.dim, format="csr")

    def convect(self, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Dual vector of b_h(w, v, .) from coefficient arrays."""
        Ns = self.nonlinear_scalar(w)
        return np.concatenate([Ns @ c for c in self.vspace.split(v)])

    @cached_property
    def _dual_lu(self):
        V = self.vspace
        A = (V.stiffness_scalar + V.mass_scalar).tocsr()
        c = sp.csr_matrix(V.integrals[None, :])
        S = sp.bmat([[A, c.T], [c, None]], format="csc")
        return splu(S)

    def dual_norm(self, r: np.ndarray) -> float:
        """sqrt(r^T (K + M)^{-1} r) over mean-zero velocity test fields."""
        lu = self._dual_lu
        total = 0.0
        for rk in self.vspace.split(np.asarray(r, dtype=float)):
            z = lu.solve(np.append(rk, 0.0))[:-1]
            total += rk @ z
        return float(np.sqrt(max(total, 0.0)))


def assemble_forms(vspace: VelocitySpace, pspace: PressureSpace, quadrature=None) -> AssembledForms:
    """Assemble M, K, B, M_p and the mean-value constraint rows.

    ``quadrature`` defaults to the rule already carried by the velocity
    space; a rule passed here must match it, since all cell-level tables are
    built from that rule.
    """
    if vspace.mesh is not pspace.mesh:
        raise ValueError("velocity and pressure spaces must share one mesh")
    quad = quadrature or vspace.quad
    if not (quad.same_as(vspace.quad) and pspace.quad.same_as(vspace.quad)):
        raise ValueError("spaces and assembly must share one quadrature rule")
    need = required_degree(vspace.dim)
    if quad.degree < need:
        raise ConfigurationError(
            f"quadrature degree {quad.degree} < {need}: b_h(u, v, v) = 0 would not hold")
    return AssembledForms(
        vspace=vspace,
        pspace=pspace,
        M=vspace.mass,
        K=vspace.stiffness,
        B=divergence_matrix(vspace, pspace),
        Mp=pspace.mass,
        velocity_mean_rows=vspace.mean_rows,
        pressure_mean_row=pspace.integrals.copy(),
    )


def _check(forms: AssembledForms, *fields: Field):
    for f in fields:
        if f.space is not forms.vspace:
            raise ValueError("field does not belong to the assembled velocity space")


def apply_nl(forms: AssembledForms, u: Field, v: Field) -> np.ndarray:
    """Dual vector w -> b_h(u, v, w) over the velocity basis."""
    _check(forms, u, v)
    return forms.convect(u.coeffs, v.coeffs)


def trilinear(forms: AssembledForms, u: Field, v: Field, w: Field) -> float:
    _check(forms, w)
    return float(w.coeffs @ apply_nl(forms, u, v))


def nl_dual_norm(forms: AssembledForms, u: Field, v: Field) -> float:
    """Discrete H^{-1} norm of nl_h(u, v) = (u . grad) v + 1/2 v div u."""
    return forms.dual_norm(apply_nl(forms, u, v))
