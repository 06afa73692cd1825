"""Theta-method time stepping of the discrete Navier-Stokes problem.

Each step solves, for all velocity tests v and pressure tests q,

    (u - u_prev, v)/dt + (grad u_th, grad v) + b_h(u_th, u_th, v) - (p, div v) = 0,
    (div u, q) = 0,

with u_th = theta u + (1 - theta) u_prev. The first argument of b_h is frozen
and updated by Picard iteration, so every iterate is a linear saddle-point
solve. Zero means of the velocity components and of the pressure are
imposed through Lagrange multipliers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, SolverError
from .mesh import build_periodic_mesh
from .operators import AssembledForms, assemble_forms
from .quadrature import default_rule, simplex_rule
from .spaces import Field, PressureSpace, VelocitySpace, subtract_mean

log = logging.getLogger(__name__)

# first argument of b_h: theta average (the analysed scheme), new or old
# iterate (experimental), or no convection at all (Stokes)
CONVECTION_MODES = ("theta", "new", "old", "off")


@dataclass(frozen=True)
class SchemeConfig:
    theta: float
    T: float
    N: int
    picard_tol: float = 1e-12
    picard_max_iters: int = 50
    quad_degree: int | None = None
    convection: str = "theta"
    force_theta_half: bool = False

    def __post_init__(self):
        th = self.theta
        if th == 0.5 and not self.force_theta_half:
            raise ConfigurationError(
                "theta = 1/2 lies outside the admissible range (1/2, 1]; "
                "it is only available with the force flag")
        if not (0.5 < th <= 1.0 or (th == 0.5 and self.force_theta_half)):
            raise ConfigurationError(f"theta = {th} lies outside the admissible range (1/2, 1]")
        if not self.T > 0:
            raise ConfigurationError(f"final time must be positive, got {self.T}")
        if isinstance(self.N, bool) or int(self.N) != self.N or self.N < 1:
            raise ConfigurationError(f"step count must be a positive integer, got {self.N}")
        if not self.picard_tol > 0 or self.picard_max_iters < 1:
            raise ConfigurationError("picard_tol must be > 0 and picard_max_iters >= 1")
        if self.convection not in CONVECTION_MODES:
            raise ConfigurationError(
                f"convection must be one of {CONVECTION_MODES}, got {self.convection!r}")

    @classmethod
    def from_step(cls, theta: float, dt: float, T: float, **kwargs) -> "SchemeConfig":
        if not dt > 0:
            raise ConfigurationError(f"time step must be positive, got {dt}")
        N = int(round(T / dt))
        if N < 1 or abs(T / N - dt) > 1e-12 * dt:
            raise ConfigurationError(f"T = {T} is not an integer multiple of dt = {dt}")
        return cls(theta=theta, T=T, N=N, **kwargs)

    @property
    def dt(self) -> float:
        return self.T / self.N

    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass
class StepResult:
    velocity: np.ndarray
    pressure: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list)


@dataclass(eq=False)
class SnapshotSequence:
    """Discrete trajectory u^0..u^N, p^1..p^N plus per-step solver records."""

    config: SchemeConfig
    forms: AssembledForms
    velocities: np.ndarray  # (N + 1, nu)
    pressures: np.ndarray  # (N, np); row m - 1 holds p^m
    iterations: np.ndarray
    residuals: np.ndarray

    @property
    def N(self) -> int:
        return self.velocities.shape[0] - 1

    @property
    def theta(self) -> float:
        return self.config.theta

    @property
    def dt(self) -> float:
        return self.config.dt

    def velocity(self, m: int) -> Field:
        return Field(self.forms.vspace, self.velocities[m], mean_zero=True)

    def pressure(self, m: int) -> Field:
        if not 1 <= m <= self.N:
            raise IndexError(f"pressure exists for m = 1..{self.N}, got {m}")
        return Field(self.forms.pspace, self.pressures[m - 1], mean_zero=True)

    def theta_average(self, m: int) -> np.ndarray:
        th = self.theta
        return th * self.velocities[m] + (1.0 - th) * self.velocities[m - 1]


def build_forms(dim: int, n: int, quad_degree: int | None = None) -> AssembledForms:
    mesh = build_periodic_mesh(dim, n)
    quad = default_rule(dim) if quad_degree is None else simplex_rule(dim, quad_degree)
    V, P = VelocitySpace(mesh, quad), PressureSpace(mesh, quad)
    return assemble_forms(V, P)


def saddle_matrix(forms: AssembledForms, A: sp.spmatrix) -> sp.csc_matrix:
    """[[A, -B^T, C^T, 0], [-B, 0, 0, c], [C, 0, 0, 0], [0, c^T, 0, 0]]."""
    B = forms.B
    C = sp.csr_matrix(forms.velocity_mean_rows)
    c = sp.csr_matrix(forms.pressure_mean_row[:, None])
    return sp.bmat([
        [A, -B.T, C.T, None],
        [-B, None, None, c],
        [C, None, None, None],
        [None, c.T, None, None],
    ], format="csc")


def _factor_solve(S: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
    """Direct solve; a symmetric minimum-degree ordering without pivoting is
    far cheaper on these saddle matrices, with partial pivoting as fallback."""
    scale = np.max(np.abs(rhs)) * max(abs(S).max(), 1.0)
    try:
        Z = splu(S, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                 options={"SymmetricMode": True}).solve(rhs)
        if np.all(np.isfinite(Z)) and np.max(np.abs(S @ Z - rhs)) <= 1e-10 * scale:
            return Z
    except RuntimeError:
        pass
    log.debug("falling back to partial-pivoting factorization")
    try:
        return splu(S).solve(rhs)
    except RuntimeError as exc:  # singular factor
        raise SolverError(f"saddle-point system is singular: {exc}") from exc


def _solve_saddle(forms: AssembledForms, A, rhs_u: np.ndarray):
    """Solve the system of ``saddle_matrix`` for zero pressure right-hand side.

    The dense mean rows would ruin the fill-reducing ordering of a direct
    factorization, so the sparse core [[A, -B^T], [-B, e e^T]] is factored
    instead, with e selecting one pressure dof. The only kernel mode of the
    unpinned core is the constant pressure, and the right-hand side is
    orthogonal to it, so the pin is inactive (that pressure multiplier is
    zero). The d velocity-mean constraints are then imposed through a d x d
    Schur complement and the pressure mean is removed afterwards.
    """
    nu, npr = forms.vspace.ndof, forms.pspace.ndof
    B = forms.B
    pin = sp.csr_matrix(([1.0], ([0], [0])), shape=(npr, npr))
    S = sp.bmat([[A, -B.T], [-B, pin]], format="csc")
    C = forms.velocity_mean_rows
    rhs = np.zeros((nu + npr, C.shape[0] + 1))
    rhs[:nu, 0] = rhs_u
    rhs[:nu, 1:] = C.T
    Z = _factor_solve(S, rhs)
    x, Y = Z[:, 0], Z[:, 1:]
    lam = np.linalg.solve(C @ Y[:nu], C @ x[:nu])
    sol = x - Y @ lam
    if not np.all(np.isfinite(sol)):
        raise SolverError("saddle-point solve produced non-finite values")
    u, p = sol[:nu], sol[nu:]
    c = forms.pressure_mean_row
    p = p - (c @ p) / c.sum()
    return u, p


def _l2(forms: AssembledForms, c: np.ndarray) -> float:
    return float(np.sqrt(max(c @ (forms.M @ c), 0.0)))


def project_initial(forms: AssembledForms, u0, divergence_free: bool = True) -> Field:
    """L2 projection of the initial velocity onto the mean-zero velocity space.

    With ``divergence_free`` (the default) the projection is onto the
    discretely divergence-free subspace, which makes the energy identity hold
    from the first step on for every theta. ``divergence_free=False`` gives
    the plain projection followed by mean subtraction.
    """
    V = forms.vspace
    if isinstance(u0, Field):
        rhs = forms.M @ u0.coeffs if u0.space is V else V.load(u0.values())
    elif callable(u0):
        rhs = V.load(np.asarray(u0(V.points), dtype=float))
    else:
        rhs = V.load(np.asarray(u0, dtype=float))
    if not divergence_free:
        return subtract_mean(Field(V, V.solve_mass(rhs)))
    u, _ = _solve_saddle(forms, forms.M, rhs)
    return Field(V, u, mean_zero=True)


def momentum_residual(forms: AssembledForms, u_prev, u_new, p, theta, dt,
                      convection: str = "theta") -> float:
    """Relative discrete dual norm of the momentum equation at (u_new, p)."""
    u_th = theta * u_new + (1.0 - theta) * u_prev
    w = {"theta": u_th, "new": u_new, "old": u_prev}.get(convection)
    terms = [forms.M @ (u_new - u_prev) / dt, forms.K @ u_th, -(forms.B.T @ p)]
    if w is not None:
        terms.append(forms.convect(w, u_th))
    scale = sum(forms.dual_norm(t) for t in terms)
    total = forms.dual_norm(sum(terms))
    return total / scale if scale > 0 else total


def theta_step(forms: AssembledForms, u_prev: np.ndarray, config: SchemeConfig,
               step: int | None = None, forcing: np.ndarray | None = None) -> StepResult:
    """Advance one step; ``forcing`` is an optional load vector (f, v)."""
    u_prev = np.asarray(u_prev.coeffs if isinstance(u_prev, Field) else u_prev, dtype=float)
    th, dt = config.theta, config.dt
    M, K = forms.M, forms.K
    mode = config.convection
    w = u_prev.copy()
    history = []
    for it in range(1, config.picard_max_iters + 1):
        L = K if mode == "off" else K + forms.nonlinear_matrix(w)
        A = M / dt + th * L
        rhs = M @ u_prev / dt - (1.0 - th) * (L @ u_prev)
        if forcing is not None:
            rhs = rhs + forcing
        u_new, p = _solve_saddle(forms, A, rhs)
        if mode in ("off", "old"):
            history.append(0.0)
            return StepResult(u_new, p, it, 0.0, history)
        target = th * u_new + (1.0 - th) * u_prev if mode == "theta" else u_new
        diff = _l2(forms, w - target)
        ref = _l2(forms, target)
        res = diff / ref if ref > 0 else diff
        history.append(res)
        if res <= config.picard_tol:
            return StepResult(u_new, p, it, res, history)
        w = target
    where = f" at step {step}" if step is not None else ""
    raise SolverError(
        f"Picard iteration did not converge{where} after {config.picard_max_iters} iterations "
        f"(last relative increment {history[-1]:.3e}); try a smaller time step",
        step=step, residuals=history)


def run_scheme(forms: AssembledForms, u0, config: SchemeConfig,
               divergence_free_initial: bool = True,
               forcing: Callable[[int], np.ndarray] | None = None) -> SnapshotSequence:
    """Run N steps from the projected initial datum.

    ``forcing(m)`` may return a load vector for step m; the default is f = 0.
    """
    uh0 = project_initial(forms, u0, divergence_free=divergence_free_initial)
    vel = [uh0.coeffs]
    pres, iters, res = [], [], []
    for m in range(1, config.N + 1):
        try:
            out = theta_step(forms, vel[-1], config, step=m,
                             forcing=None if forcing is None else forcing(m))
        except SolverError as exc:
            if exc.step is None:
                exc.step = m
            raise
        vel.append(out.velocity)
        pres.append(out.pressure)
        iters.append(out.iterations)
        res.append(out.residual)
        log.debug("step %d: %d Picard iterations, increment %.3e", m, out.iterations, out.residual)
    return SnapshotSequence(
        config=config,
        forms=forms,
        velocities=np.array(vel),
        pressures=np.array(pres),
        iterations=np.array(iters, dtype=np.int64),
        residuals=np.array(res),
    )
