"""MINI velocity space, P1 pressure space, L2 projections, norms and
numerical probes of the structural hypotheses on the pair.

Velocity dofs are laid out component-major: component ``k`` occupies
``[k * ns, (k + 1) * ns)`` with ``ns = num_vertices + num_cells`` (vertex
hat functions first, then one bubble per cell). Zero mean is not built into
the bases; it is imposed with explicit linear constraints where needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import BOX_LENGTH, PeriodicMesh
from .quadrature import QuadratureRule, default_rule

NORM_KINDS = ("L2", "H1_semi", "H1", "L3", "mean")


def _barycentric(points: np.ndarray) -> np.ndarray:
    return np.column_stack([1.0 - points.sum(axis=1), points])


def _ref_barycentric_grads(dim: int) -> np.ndarray:
    return np.vstack([-np.ones(dim), np.eye(dim)])


class _ScalarElementSpace:
    """Continuous P1, optionally enriched with the cell bubble."""

    bubble = False

    def __init__(self, mesh: PeriodicMesh, quad: QuadratureRule | None = None):
        quad = quad or default_rule(mesh.dim)
        if quad.dim != mesh.dim:
            raise ValueError("quadrature dimension does not match mesh")
        self.mesh = mesh
        self.quad = quad
        self.dim = mesh.dim
        nv, nc = mesh.num_vertices, mesh.num_cells
        if self.bubble:
            self.num_scalar = nv + nc
            self.cell_dofs = np.hstack([mesh.cells, nv + np.arange(nc)[:, None]])
        else:
            self.num_scalar = nv
            self.cell_dofs = mesh.cells

    @property
    def num_local(self) -> int:
        return self.cell_dofs.shape[1]

    @cached_property
    def basis_values(self) -> np.ndarray:
        """(nq, nloc) reference values; identical on every cell."""
        lam = _barycentric(self.quad.points)
        if not self.bubble:
            return lam
        d = self.dim
        bub = (d + 1) ** (d + 1) * np.prod(lam, axis=1)
        return np.column_stack([lam, bub])

    @cached_property
    def basis_grads(self) -> np.ndarray:
        """(nc, nq, nloc, dim) physical gradients."""
        d = self.dim
        nq = len(self.quad)
        glam = np.einsum("cij,kj->cki", self.mesh.inv_jac_t, _ref_barycentric_grads(d))
        p1 = np.broadcast_to(glam[:, None, :, :], (glam.shape[0], nq, d + 1, d))
        if not self.bubble:
            return np.ascontiguousarray(p1)
        lam = _barycentric(self.quad.points)
        excl = np.stack([np.prod(np.delete(lam, j, axis=1), axis=1) for j in range(d + 1)], axis=1)
        gbub = (d + 1) ** (d + 1) * np.einsum("qj,cjd->cqd", excl, glam)
        return np.concatenate([p1, gbub[:, :, None, :]], axis=2)

    @cached_property
    def weights(self) -> np.ndarray:
        """(nc, nq) physical quadrature weights."""
        return np.abs(self.mesh.dets)[:, None] * self.quad.weights[None, :]

    @cached_property
    def points(self) -> np.ndarray:
        """(nc, nq, dim) physical quadrature points (unwrapped)."""
        return self.mesh.map_points(self.quad.points)

    def _assemble(self, local: np.ndarray) -> sp.csr_matrix:
        rows = np.broadcast_to(self.cell_dofs[:, :, None], local.shape)
        cols = np.broadcast_to(self.cell_dofs[:, None, :], local.shape)
        ns = self.num_scalar
        mat = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(ns, ns))
        return mat.tocsr()

    @cached_property
    def mass_scalar(self) -> sp.csr_matrix:
        V = self.basis_values
        return self._assemble(np.einsum("cq,qi,qj->cij", self.weights, V, V))

    @cached_property
    def stiffness_scalar(self) -> sp.csr_matrix:
        G = self.basis_grads
        return self._assemble(np.einsum("cq,cqid,cqjd->cij", self.weights, G, G))

    @cached_property
    def integrals(self) -> np.ndarray:
        """Integral of every scalar basis function."""
        out = np.zeros(self.num_scalar)
        np.add.at(out, self.cell_dofs, self.weights @ self.basis_values)
        return out

    @cached_property
    def _mass_lu(self):
        return splu(self.mass_scalar.tocsc())

    def eval_scalar(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs[self.cell_dofs] @ self.basis_values.T

    def grad_scalar(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("cl,cqld->cqd", coeffs[self.cell_dofs], self.basis_grads)

    def load_scalar(self, values: np.ndarray) -> np.ndarray:
        """Vector of integrals of ``values`` (at quadrature points) against each basis function."""
        local = np.einsum("cq,cq,qi->ci", self.weights, values, self.basis_values)
        out = np.zeros(self.num_scalar)
        np.add.at(out, self.cell_dofs, local)
        return out

    def load_grad_scalar(self, values: np.ndarray) -> np.ndarray:
        """Integrals of ``values . grad(basis)`` for vector-valued ``values`` (nc, nq, dim)."""
        local = np.einsum("cq,cqd,cqid->ci", self.weights, values, self.basis_grads)
        out = np.zeros(self.num_scalar)
        np.add.at(out, self.cell_dofs, local)
        return out


class VelocitySpace(_ScalarElementSpace):
    """Vector MINI element: P1 plus cell bubble, per component."""

    bubble = True
    kind = "velocity"

    @property
    def ndof(self) -> int:
        return self.dim * self.num_scalar

    def component(self, coeffs: np.ndarray, k: int) -> np.ndarray:
        ns = self.num_scalar
        return coeffs[k * ns:(k + 1) * ns]

    def split(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs.reshape(self.dim, self.num_scalar)

    def evaluate(self, coeffs: np.ndarray) -> np.ndarray:
        """Values at quadrature points, (nc, nq, dim)."""
        return np.stack([self.eval_scalar(c) for c in self.split(coeffs)], axis=-1)

    def gradient(self, coeffs: np.ndarray) -> np.ndarray:
        """Gradient at quadrature points, (nc, nq, dim[component], dim[derivative])."""
        return np.stack([self.grad_scalar(c) for c in self.split(coeffs)], axis=2)

    def load(self, values: np.ndarray) -> np.ndarray:
        return np.concatenate([self.load_scalar(values[..., k]) for k in range(self.dim)])

    def load_grad(self, values: np.ndarray) -> np.ndarray:
        """Integrals of ``values : grad(basis)`` for tensor values (nc, nq, dim, dim)."""
        return np.concatenate([self.load_grad_scalar(values[:, :, k, :]) for k in range(self.dim)])

    def load_div(self, values: np.ndarray) -> np.ndarray:
        """Integrals of ``values * div(basis)`` for scalar values (nc, nq)."""
        d = self.dim
        out = []
        for k in range(d):
            vec = np.zeros(values.shape + (d,))
            vec[..., k] = values
            out.append(self.load_grad_scalar(vec))
        return np.concatenate(out)

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return sp.block_diag([self.mass_scalar] * self.dim, format="csr")

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return sp.block_diag([self.stiffness_scalar] * self.dim, format="csr")

    @cached_property
    def mean_rows(self) -> np.ndarray:
        """(dim, ndof): row k integrates component k."""
        ns = self.num_scalar
        rows = np.zeros((self.dim, self.ndof))
        for k in range(self.dim):
            rows[k, k * ns:(k + 1) * ns] = self.integrals
        return rows

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        return np.concatenate([self._mass_lu.solve(r) for r in self.split(rhs)])


class PressureSpace(_ScalarElementSpace):
    """Continuous piecewise-linear scalars."""

    kind = "pressure"

    @property
    def ndof(self) -> int:
        return self.num_scalar

    def evaluate(self, coeffs: np.ndarray) -> np.ndarray:
        return self.eval_scalar(coeffs)

    def gradient(self, coeffs: np.ndarray) -> np.ndarray:
        return self.grad_scalar(coeffs)

    def load(self, values: np.ndarray) -> np.ndarray:
        return self.load_scalar(values)

    @property
    def mass(self) -> sp.csr_matrix:
        return self.mass_scalar

    @property
    def stiffness(self) -> sp.csr_matrix:
        return self.stiffness_scalar

    @property
    def mean_rows(self) -> np.ndarray:
        return self.integrals[None, :]

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        return self._mass_lu.solve(rhs)


Space = VelocitySpace | PressureSpace


@dataclass
class Field:
    space: Space
    coeffs: np.ndarray
    mean_zero: bool = False

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndof,):
            raise ValueError(f"expected {self.space.ndof} coefficients, got {self.coeffs.shape}")

    def values(self) -> np.ndarray:
        return self.space.evaluate(self.coeffs)

    def gradients(self) -> np.ndarray:
        return self.space.gradient(self.coeffs)

    def means(self) -> np.ndarray:
        return self.space.mean_rows @ self.coeffs / self.space.mesh.volume


@dataclass(frozen=True)
class Weight:
    """Smooth periodic scalar multiplier with closed-form derivatives.

    Callables take points of shape (..., dim). ``hessian`` is optional and
    only used for W^{2,inf} norms.
    """

    value: Callable
    grad: Callable
    laplacian: Callable | None = None
    hessian: Callable | None = None
    label: str = ""
    _sample: int = field(default=48, repr=False)

    def w_inf_norm(self, order: int, dim: int) -> float:
        """Max over derivatives up to ``order`` of sup norms, sampled on a grid."""
        axes = [np.linspace(0.0, BOX_LENGTH, self._sample, endpoint=False)] * dim
        x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        out = np.max(np.abs(self.value(x)))
        if order >= 1:
            out = max(out, np.max(np.abs(self.grad(x))))
        if order >= 2:
            if self.hessian is None:
                raise ValueError("second derivatives not available for this weight")
            out = max(out, np.max(np.abs(self.hessian(x))))
        return float(out)


def constant_weight(c: float = 1.0) -> Weight:
    return Weight(
        value=lambda x: np.full(x.shape[:-1], float(c)),
        grad=lambda x: np.zeros(x.shape),
        laplacian=lambda x: np.zeros(x.shape[:-1]),
        hessian=lambda x: np.zeros(x.shape + (x.shape[-1],)),
        label=f"const({c:g})",
    )


def cosine_weight() -> Weight:
    """1 + cos(x1)/2."""

    def grad(x):
        g = np.zeros(x.shape)
        g[..., 0] = -0.5 * np.sin(x[..., 0])
        return g

    def hess(x):
        H = np.zeros(x.shape + (x.shape[-1],))
        H[..., 0, 0] = -0.5 * np.cos(x[..., 0])
        return H

    return Weight(
        value=lambda x: 1.0 + 0.5 * np.cos(x[..., 0]),
        grad=grad,
        laplacian=lambda x: -0.5 * np.cos(x[..., 0]),
        hessian=hess,
        label="1+cos(x1)/2",
    )


def cosine_product_weight() -> Weight:
    """1 + cos(x1) cos(x2)/2."""

    def grad(x):
        g = np.zeros(x.shape)
        g[..., 0] = -0.5 * np.sin(x[..., 0]) * np.cos(x[..., 1])
        g[..., 1] = -0.5 * np.cos(x[..., 0]) * np.sin(x[..., 1])
        return g

    def hess(x):
        c0, c1 = np.cos(x[..., 0]), np.cos(x[..., 1])
        s0, s1 = np.sin(x[..., 0]), np.sin(x[..., 1])
        H = np.zeros(x.shape + (x.shape[-1],))
        H[..., 0, 0] = H[..., 1, 1] = -0.5 * c0 * c1
        H[..., 0, 1] = H[..., 1, 0] = 0.5 * s0 * s1
        return H

    return Weight(
        value=lambda x: 1.0 + 0.5 * np.cos(x[..., 0]) * np.cos(x[..., 1]),
        grad=grad,
        laplacian=lambda x: -np.cos(x[..., 0]) * np.cos(x[..., 1]),
        hessian=hess,
        label="1+cos(x1)cos(x2)/2",
    )


def interpolate(space: Space, f: Callable) -> Field:
    """Nodal interpolant: vertex values of ``f``, bubble coefficients zero."""
    vals = np.asarray(f(space.mesh.vertices), dtype=float)
    if isinstance(space, PressureSpace):
        return Field(space, vals.reshape(-1))
    nv = space.mesh.num_vertices
    coeffs = np.zeros((space.dim, space.num_scalar))
    coeffs[:, :nv] = vals.reshape(nv, space.dim).T
    return Field(space, coeffs.ravel())


def _quadrature_values(space: Space, w) -> np.ndarray:
    if isinstance(w, Field):
        if w.space is space:
            return None
        return w.values()
    if callable(w):
        return np.asarray(w(space.points), dtype=float)
    return np.asarray(w, dtype=float)


def _project(space: Space, w) -> Field:
    vals = _quadrature_values(space, w)
    rhs = space.mass @ w.coeffs if vals is None else space.load(vals)
    return Field(space, space.solve_mass(rhs))


def l2_project_velocity(space: VelocitySpace, w) -> Field:
    """L2 projection onto the velocity space.

    ``w`` may be a Field, a callable of physical points (..., dim) returning
    (..., dim), or an array of values at the space's quadrature points.
    """
    return _project(space, w)


def l2_project_pressure(space: PressureSpace, q) -> Field:
    return _project(space, q)


def subtract_mean(f: Field) -> Field:
    """Remove the mean of every component (constants are representable)."""
    space = f.space
    means = f.means()
    coeffs = f.coeffs.copy()
    nv = space.mesh.num_vertices  # hat functions sum to one; bubbles stay untouched
    if isinstance(space, VelocitySpace):
        coeffs = space.split(coeffs)
        coeffs[:, :nv] -= means[:, None]
        coeffs = coeffs.ravel()
    else:
        coeffs[:nv] -= means[0]
    return Field(space, coeffs, mean_zero=True)


def norm(f: Field, kind: str = "L2") -> float:
    space = f.space
    c = f.coeffs
    if kind == "L2":
        return float(np.sqrt(max(c @ (space.mass @ c), 0.0)))
    if kind == "H1_semi":
        return float(np.sqrt(max(c @ (space.stiffness @ c), 0.0)))
    if kind == "H1":
        return float(np.sqrt(max(c @ (space.mass @ c) + c @ (space.stiffness @ c), 0.0)))
    if kind == "L3":
        # quadrature-approximate: |u|^3 is not polynomial for vector fields
        vals = f.values()
        mag = np.abs(vals) if vals.ndim == 2 else np.linalg.norm(vals, axis=-1)
        return float(np.sum(space.weights * mag**3) ** (1.0 / 3.0))
    if kind == "mean":
        return float(np.linalg.norm(f.means()))
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def _product_with_weight(v: Field, phi: Weight):
    space = v.space
    x = space.points
    pv, pg = phi.value(x), phi.grad(x)
    vals = v.values()
    if isinstance(space, PressureSpace):
        return vals * pv, v.gradients() * pv[..., None] + vals[..., None] * pg
    grads = v.gradients() * pv[..., None, None] + vals[..., :, None] * pg[..., None, :]
    return vals * pv[..., None], grads


def _error_norms(space: Space, z: Field, vals, grads):
    e = z.values() - vals
    ge = z.gradients() - grads
    W = space.weights
    sq = e**2 if e.ndim == 2 else np.sum(e**2, axis=-1)
    gsq = np.sum(ge.reshape(ge.shape[0], ge.shape[1], -1) ** 2, axis=-1)
    return float(np.sum(W * sq)), float(np.sum(W * gsq))


def commutator_defect(v_h: Field, phi: Weight, l: int = 0, m: int = 1) -> float:
    """Norm of ``v_h phi - P(v_h phi)`` in H^l, P the L2 projection onto v_h's space.

    The product is integrated against the basis by quadrature, never
    interpolated. ``m`` only enters through the admissibility check l <= m;
    see :func:`commutator_constant` for the scaled quantity.
    """
    if l not in (0, 1) or m not in (0, 1):
        raise ValueError("l and m must be 0 or 1")
    if l > m:
        raise ValueError(f"commutator estimate requires l <= m, got l={l}, m={m}")
    space = v_h.space
    vals, grads = _product_with_weight(v_h, phi)
    z = _project(space, vals)
    l2sq, semisq = _error_norms(space, z, vals, grads)
    return float(np.sqrt(l2sq if l == 0 else l2sq + semisq))


def commutator_constant(v_h: Field, phi: Weight, l: int, m: int) -> float:
    """Defect divided by h^(1+m-l) ||v_h||_{H^m} ||phi||_{W^{m+1,inf}}."""
    h = v_h.space.mesh.h
    vnorm = norm(v_h, "L2" if m == 0 else "H1")
    scale = h ** (1 + m - l) * vnorm * phi.w_inf_norm(m + 1, v_h.space.dim)
    return commutator_defect(v_h, phi, l, m) / scale if scale > 0 else 0.0


def inverse_constant_probe(space: VelocitySpace, samples: int = 64, seed: int = 0,
                           exact: bool = False) -> float:
    """Estimate c in ||v||_{H1} <= c h^{-1} ||v||_2 as max of h ||v||_{H1} / ||v||_2.

    The default draws ``samples`` Gaussian coefficient vectors; ``exact``
    solves the generalized eigenproblem (components decouple, so the scalar
    matrices suffice).
    """
    h = space.mesh.h
    M, K = space.mass_scalar, space.stiffness_scalar
    if exact:
        lam = scipy.linalg.eigh((K + M).toarray(), M.toarray(), eigvals_only=True)
        return float(h * np.sqrt(lam[-1]))
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(samples):
        f = Field(space, rng.standard_normal(space.ndof))
        best = max(best, h * norm(f, "H1") / norm(f, "L2"))
    return best


def divergence_matrix(vspace: VelocitySpace, pspace: PressureSpace) -> sp.csr_matrix:
    """B with (B u)_a = (div u, q_a) for pressure basis q_a."""
    if vspace.mesh is not pspace.mesh:
        raise ValueError("velocity and pressure spaces live on different meshes")
    Q = pspace.basis_values  # (nq, d+1)
    G = vspace.basis_grads  # (nc, nq, nloc, d)
    W = vspace.weights
    local = np.einsum("cq,qa,cqjk->ckaj", W, Q, G)  # (nc, d, d+1, nloc)
    ns = vspace.num_scalar
    rows, cols, data = [], [], []
    for k in range(vspace.dim):
        r = np.broadcast_to(pspace.cell_dofs[:, :, None], local[:, k].shape)
        c = np.broadcast_to(vspace.cell_dofs[:, None, :] + k * ns, local[:, k].shape)
        rows.append(r.ravel())
        cols.append(c.ravel())
        data.append(local[:, k].ravel())
    shape = (pspace.ndof, vspace.ndof)
    return sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                         shape=shape).tocsr()


def coercivity_probe(vspace: VelocitySpace, pspace: PressureSpace) -> float:
    """min over mean-zero q of ||pi_h grad q||_2 / ||q||_2.

    (grad q, v) = -(q, div v) on the torus, so pi_h grad q = -M^{-1} B^T q and
    ||pi_h grad q||^2 = q^T B M^{-1} B^T q; the value is the square root of
    the smallest generalized eigenvalue against the pressure mass matrix on
    the mean-zero subspace.
    """
    B = divergence_matrix(vspace, pspace)
    BT = B.T.toarray()
    MinvBT = np.column_stack([vspace.solve_mass(col) for col in BT.T])
    S = B @ MinvBT
    S = 0.5 * (S + S.T)
    Z = scipy.linalg.null_space(pspace.integrals[None, :])
    Mp = pspace.mass.toarray()
    lam = scipy.linalg.eigh(Z.T @ S @ Z, Z.T @ Mp @ Z, eigvals_only=True)
    return float(np.sqrt(max(lam[0], 0.0)))
