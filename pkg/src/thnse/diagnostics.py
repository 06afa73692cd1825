"""Energy bookkeeping, a priori bounds and local-energy remainders measured
on a discrete trajectory.

On [t_{m-1}, t_m) the trajectory is reconstructed as

    v(t) = u^{m-1} + (t - t_{m-1})/dt (u^m - u^{m-1})   (continuous, piecewise linear)
    u(t) = theta u^m + (1 - theta) u^{m-1}             (piecewise constant)
    p(t) = p^m                                        (piecewise constant)

with the right endpoint t = T mapped to (u^N, u^{N,theta}, p^N). Time
integrals against a test function use Gauss-Legendre points per step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .spaces import (Field, Weight, constant_weight, cosine_product_weight, cosine_weight, norm,
                     subtract_mean)
from .stepper import SnapshotSequence

TIME_GAUSS_POINTS = 4
_GAUSS = np.polynomial.legendre.leggauss(TIME_GAUSS_POINTS)


def _time_nodes(t0: float, dt: float):
    x, w = _GAUSS
    return t0 + 0.5 * dt * (x + 1.0), 0.5 * dt * w


class ReconstructedTrajectory:
    def __init__(self, snapshots: SnapshotSequence):
        self.snapshots = snapshots
        self.theta = snapshots.theta
        self.dt = snapshots.dt
        self.T = snapshots.config.T
        self.N = snapshots.N

    def locate(self, t: float) -> tuple[int, float]:
        """Interval index m (t in [t_{m-1}, t_m)) and local fraction in [0, 1]."""
        if not 0.0 <= t <= self.T * (1 + 1e-14):
            raise ValueError(f"t = {t} outside [0, {self.T}]")
        k = int(np.floor(t / self.dt))
        if abs(t - (k + 1) * self.dt) <= 1e-12 * self.dt:
            k += 1
        if k >= self.N:
            return self.N, 1.0
        return k + 1, max((t - k * self.dt) / self.dt, 0.0)

    def coefficients(self, t: float):
        m, s = self.locate(t)
        S = self.snapshots
        if m == self.N and s == 1.0:
            v = S.velocities[self.N].copy()
        else:
            v = S.velocities[m - 1] + s * (S.velocities[m] - S.velocities[m - 1])
        return v, S.theta_average(m), S.pressures[m - 1].copy()


def reconstruct_eval(traj: ReconstructedTrajectory, t: float) -> tuple[Field, Field, Field]:
    v, u, p = traj.coefficients(t)
    forms = traj.snapshots.forms
    return Field(forms.vspace, v), Field(forms.vspace, u), Field(forms.pspace, p)


@dataclass
class EnergyLedger:
    theta: float
    dt: float
    kinetic: np.ndarray  # 1/2 ||u^m||^2, m = 0..N
    increment_sq: np.ndarray  # ||u^m - u^{m-1}||^2, m = 1..N
    dissipation: np.ndarray  # dt ||grad u^{m,theta}||^2
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    picard_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def increment_term(self) -> np.ndarray:
        return 0.5 * (2 * self.theta - 1) * self.increment_sq

    @property
    def identity_residual(self) -> np.ndarray:
        return np.diff(self.kinetic) + self.increment_term + self.dissipation

    @property
    def scale(self) -> float:
        return float(self.kinetic[0])

    @property
    def max_residual(self) -> float:
        r = self.identity_residual
        return float(np.max(np.abs(r))) if r.size else 0.0

    @property
    def summed_residual(self) -> float:
        """Defect of 1/2|u^N|^2 + sum(increment) + sum(dissipation) = 1/2|u^0|^2."""
        return float(self.kinetic[-1] + self.increment_term.sum() + self.dissipation.sum()
                     - self.kinetic[0])

    @property
    def cumulative_slack(self) -> float:
        return float(np.sum(np.abs(self.identity_residual)))

    def global_energy_gap(self) -> float:
        """1/2|u^0|^2 + slack - (1/2|u^N|^2 + sum dissipation); >= 0 when the inequality holds."""
        return float(self.kinetic[0] + self.cumulative_slack
                     - self.kinetic[-1] - self.dissipation.sum())


def energy_ledger(snapshots: SnapshotSequence) -> EnergyLedger:
    f = snapshots.forms
    U = snapshots.velocities
    kin = 0.5 * np.einsum("mi,mi->m", U, (f.M @ U.T).T)
    D = np.diff(U, axis=0)
    inc = np.einsum("mi,mi->m", D, (f.M @ D.T).T)
    th = snapshots.theta
    Uth = th * U[1:] + (1 - th) * U[:-1]
    diss = snapshots.dt * np.einsum("mi,mi->m", Uth, (f.K @ Uth.T).T)
    return EnergyLedger(theta=th, dt=snapshots.dt, kinetic=kin, increment_sq=inc,
                        dissipation=diss, iterations=snapshots.iterations.copy(),
                        picard_residuals=snapshots.residuals.copy())


def gap_factor(theta: float) -> float:
    return theta * theta - theta + 1.0 / 3.0


def interpolation_gap(snapshots: SnapshotSequence) -> tuple[float, float, float]:
    """(integral of ||v - u||^2 dt, theta^2 - theta + 1/3, dt * factor * sum ||u^m - u^{m-1}||^2).

    The left side is integrated with Gauss points in time (exact for the
    quadratic integrand) from reconstructed coefficients.
    """
    traj = ReconstructedTrajectory(snapshots)
    M = snapshots.forms.M
    dt = snapshots.dt
    lhs = 0.0
    for m in range(1, snapshots.N + 1):
        ts, ws = _time_nodes((m - 1) * dt, dt)
        u = snapshots.theta_average(m)
        for t, w in zip(ts, ws):
            v, _, _ = traj.coefficients(t)
            e = v - u
            lhs += w * (e @ (M @ e))
    factor = gap_factor(snapshots.theta)
    D = np.diff(snapshots.velocities, axis=0)
    rhs = dt * factor * float(np.einsum("mi,mi->", D, (M @ D.T).T))
    return float(lhs), factor, rhs


def pressure_ratio(snapshots: SnapshotSequence) -> np.ndarray:
    """||p^m|| / (||u^{m,theta}||_H1 + ||u^{m,theta}||_L3 ||u^{m,theta}||_H1) per step.

    Steps with a vanishing denominator are flagged with NaN.
    """
    V = snapshots.forms.vspace
    out = np.full(snapshots.N, np.nan)
    for m in range(1, snapshots.N + 1):
        u = Field(V, snapshots.theta_average(m))
        h1 = norm(u, "H1")
        den = h1 + norm(u, "L3") * h1
        if den > 0:
            out[m - 1] = norm(snapshots.pressure(m), "L2") / den
    return out


def dual_norm_time_derivative(snapshots: SnapshotSequence) -> float:
    """(dt * sum ||(u^m - u^{m-1})/dt||_{H^-1}^{4/3})^{3/4}."""
    f = snapshots.forms
    dt = snapshots.dt
    vals = [f.dual_norm(f.M @ ((snapshots.velocities[m] - snapshots.velocities[m - 1]) / dt))
            for m in range(1, snapshots.N + 1)]
    return float((dt * np.sum(np.array(vals) ** (4.0 / 3.0))) ** 0.75)


def divergence_defect(snapshots: SnapshotSequence) -> float:
    """max over m >= 1 and pressure basis q of |(div u^m, q)|, relative to the round-off scale."""
    B = snapshots.forms.B
    absB = abs(B)
    worst = 0.0
    for u in snapshots.velocities[1:]:
        scale = np.max(absB @ np.abs(u))
        if scale > 0:
            worst = max(worst, float(np.max(np.abs(B @ u)) / scale))
    return worst


@dataclass(frozen=True)
class TestFunction:
    """Nonnegative phi(t, x) with closed-form derivatives, vanishing at t = 0 and t = T.

    Callables take a time and points of shape (..., dim).
    """

    value: Callable
    dt: Callable
    grad: Callable
    laplacian: Callable
    T: float
    label: str = ""

    __test__ = False  # not a pytest class

    @classmethod
    def separable(cls, s, ds, weight: Weight, T: float, label: str = "") -> "TestFunction":
        return cls(
            value=lambda t, x: s(t) * weight.value(x),
            dt=lambda t, x: ds(t) * weight.value(x),
            grad=lambda t, x: s(t) * weight.grad(x),
            laplacian=lambda t, x: s(t) * weight.laplacian(x),
            T=T,
            label=label or weight.label,
        )

    def check(self, dim: int, samples: int = 16):
        """Raise if phi fails to vanish at the time endpoints or goes negative."""
        axes = [np.linspace(0, 2 * np.pi, samples, endpoint=False)] * dim
        x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        for t in (0.0, self.T):
            if np.max(np.abs(self.value(t, x))) > 1e-14:
                raise ValueError(f"test function {self.label!r} does not vanish at t = {t}")
        for t in np.linspace(0, self.T, 9):
            if np.min(self.value(t, x)) < 0:
                raise ValueError(f"test function {self.label!r} is negative at t = {t}")


def bump(T: float):
    """s(t) = (4 t (T - t) / T^2)^2 and its derivative."""

    def s(t):
        return (4.0 * t * (T - t) / T**2) ** 2

    def ds(t):
        return 2.0 * (4.0 * t * (T - t) / T**2) * 4.0 * (T - 2.0 * t) / T**2

    return s, ds


STANDARD_PHI_IDS = ("g0", "g1", "g2")


def standard_family(T: float) -> dict[str, TestFunction]:
    """s(t) g(x) with g in {1, 1 + cos(x1)/2, 1 + cos(x1)cos(x2)/2}."""
    s, ds = bump(T)
    weights = (constant_weight(1.0), cosine_weight(), cosine_product_weight())
    return {pid: TestFunction.separable(s, ds, w, T, label=pid)
            for pid, w in zip(STANDARD_PHI_IDS, weights)}


def _check_phi(traj: ReconstructedTrajectory, phi: TestFunction):
    if abs(phi.T - traj.T) > 1e-12 * traj.T:
        raise ValueError(f"test function horizon {phi.T} differs from run horizon {traj.T}")
    phi.check(traj.snapshots.forms.dim)


def telescoping_check(traj: ReconstructedTrajectory, phi: TestFunction) -> tuple[float, float]:
    """(int (dv/dt, v phi) dt, -int (|v|^2/2, dphi/dt) dt)."""
    _check_phi(traj, phi)
    S = traj.snapshots
    V = S.forms.vspace
    x, W = V.points, V.weights
    lhs = rhs = 0.0
    for m in range(1, S.N + 1):
        dv = V.evaluate((S.velocities[m] - S.velocities[m - 1]) / traj.dt)
        ts, ws = _time_nodes((m - 1) * traj.dt, traj.dt)
        for t, w in zip(ts, ws):
            v = V.evaluate(traj.coefficients(t)[0])
            lhs += w * np.sum(W * np.sum(dv * v, axis=-1) * phi.value(t, x))
            rhs -= w * np.sum(W * 0.5 * np.sum(v * v, axis=-1) * phi.dt(t, x))
    return float(lhs), float(rhs)


@dataclass
class LeiReport:
    phi_id: str
    dissipation: float
    transport: float
    R_visc: float
    R_nl: float
    R_p1: float
    R_p2: float
    I2: float
    I12: float
    time_term_gap: float  # int (|u|^2 - |v|^2)/2 dphi/dt
    equation_residual: float  # int of the momentum equation tested with P_h(u phi)
    dual_norm_dtv: float

    @property
    def D(self) -> float:
        return self.transport - self.dissipation

    @property
    def budget_residual(self) -> float:
        """D + int E - (gap + I12 + I2 + R_visc + R_nl - R_p1 - R_p2); zero up to quadrature."""
        return (self.D + self.equation_residual
                - (self.time_term_gap + self.I12 + self.I2 + self.R_visc + self.R_nl
                   - self.R_p1 - self.R_p2))

    def remainders(self) -> dict[str, float]:
        return {"I2": self.I2, "R_nl": self.R_nl, "R_visc": self.R_visc,
                "R_p1": self.R_p1, "R_p2": self.R_p2, "I12": self.I12}


def lei_functional(traj: ReconstructedTrajectory, phi: TestFunction, phi_id: str = "") -> LeiReport:
    """Local energy defect D(phi) = RHS - LHS of the local energy inequality and
    the remainders left when P_h(u phi) is used as test function."""
    _check_phi(traj, phi)
    S = traj.snapshots
    forms = S.forms
    V, P = forms.vspace, forms.pspace
    x, W = V.points, V.weights
    dt = traj.dt
    acc = dict.fromkeys(("diss", "trans", "visc", "nl", "p1", "p2", "i2", "i12", "gap", "eq"), 0.0)

    for m in range(1, S.N + 1):
        uc = S.theta_average(m)
        pc = S.pressures[m - 1]
        dvc = (S.velocities[m] - S.velocities[m - 1]) / dt
        U, GU = V.evaluate(uc), V.gradient(uc)
        Pv = P.evaluate(pc)
        DV = V.evaluate(dvc)
        divU = np.trace(GU, axis1=2, axis2=3)
        usq = np.sum(U * U, axis=-1)
        gusq = np.sum(GU * GU, axis=(2, 3))
        nl = np.einsum("cqj,cqij->cqi", U, GU) + 0.5 * U * divU[..., None]
        eq_dual = forms.M @ dvc + forms.K @ uc + forms.convect(uc, uc) - forms.B.T @ pc

        ts, ws = _time_nodes((m - 1) * dt, dt)
        for t, w in zip(ts, ws):
            ph, pht = phi.value(t, x), phi.dt(t, x)
            gph, lph = phi.grad(t, x), phi.laplacian(t, x)
            if np.min(ph) < 0:
                raise ValueError(f"test function {phi.label!r} negative at t = {t}")
            vv = V.evaluate(traj.coefficients(t)[0])

            acc["diss"] += w * np.sum(W * gusq * ph)
            acc["trans"] += w * np.sum(W * (0.5 * usq * (pht + lph)
                                            + (0.5 * usq + Pv) * np.sum(U * gph, axis=-1)))

            # P_h(u phi): L2 projection onto the mean-zero velocity space, the
            # space on which the discrete momentum equation is posed
            uphi = U * ph[..., None]
            zc = subtract_mean(Field(V, V.solve_mass(V.load(uphi)))).coeffs
            E = V.evaluate(zc) - uphi
            GE = V.gradient(zc) - (GU * ph[..., None, None] + U[..., :, None] * gph[..., None, :])
            divE = np.trace(GE, axis1=2, axis2=3)

            acc["visc"] += w * np.sum(W * np.sum(GU * GE, axis=(2, 3)))
            acc["nl"] += w * np.sum(W * np.sum(nl * E, axis=-1))
            acc["p1"] += w * np.sum(W * Pv * divE)
            acc["p2"] += w * np.sum(W * ph * Pv * divU)
            acc["i2"] += w * np.sum(W * np.sum(DV * E, axis=-1))
            acc["i12"] += w * np.sum(W * np.sum(DV * (U - vv), axis=-1) * ph)
            acc["gap"] += w * np.sum(W * 0.5 * (usq - np.sum(vv * vv, axis=-1)) * pht)
            acc["eq"] += w * (zc @ eq_dual)

    return LeiReport(
        phi_id=phi_id or phi.label,
        dissipation=float(acc["diss"]),
        transport=float(acc["trans"]),
        R_visc=float(acc["visc"]),
        R_nl=float(acc["nl"]),
        R_p1=float(acc["p1"]),
        R_p2=float(acc["p2"]),
        I2=float(acc["i2"]),
        I12=float(acc["i12"]),
        time_term_gap=float(acc["gap"]),
        equation_residual=float(acc["eq"]),
        dual_norm_dtv=dual_norm_time_derivative(S),
    )


def solution_errors(snapshots: SnapshotSequence, exact) -> tuple[float, float]:
    """L2(0,T;L2) and L2(0,T;H1-seminorm) errors of the piecewise-linear
    reconstruction against ``exact.velocity(x, t)`` / ``exact.velocity_gradient(x, t)``."""
    traj = ReconstructedTrajectory(snapshots)
    V = snapshots.forms.vspace
    x, W = V.points, V.weights
    l2 = h1 = 0.0
    for m in range(1, snapshots.N + 1):
        ts, ws = _time_nodes((m - 1) * traj.dt, traj.dt)
        for t, w in zip(ts, ws):
            vc = traj.coefficients(t)[0]
            e = V.evaluate(vc) - exact.velocity(x, t)
            ge = V.gradient(vc) - exact.velocity_gradient(x, t)
            l2 += w * np.sum(W * np.sum(e * e, axis=-1))
            h1 += w * np.sum(W * np.sum(ge * ge, axis=(2, 3)))
    return float(np.sqrt(l2)), float(np.sqrt(h1))
