import numpy as np
import pytest
from numpy.polynomial import Polynomial

from thnse import diagnostics as D
from thnse.flows import RandomDivergenceFree, TaylorGreen
from thnse.stepper import SchemeConfig, SnapshotSequence, build_forms, run_scheme

T = 0.1


@pytest.fixture(scope="module")
def forms():
    return build_forms(2, 4)


@pytest.fixture(scope="module")
def tg_runs(forms):
    return {th: run_scheme(forms, TaylorGreen(2), SchemeConfig(theta=th, T=T, N=10))
            for th in (0.6, 0.75, 1.0)}


@pytest.fixture(scope="module")
def random_run(forms):
    return run_scheme(forms, RandomDivergenceFree(2, 11), SchemeConfig(theta=0.75, T=T, N=8))


def manual_sequence(forms, velocities, theta=1.0, pressures=None):
    velocities = np.asarray(velocities, dtype=float)
    N = velocities.shape[0] - 1
    if pressures is None:
        pressures = np.zeros((N, forms.pspace.ndof))
    cfg = SchemeConfig(theta=theta, T=T, N=N, force_theta_half=theta == 0.5)
    return SnapshotSequence(cfg, forms, velocities, pressures, np.ones(N, dtype=np.int64),
                            np.zeros(N))


def zero_sequence(forms, N=4):
    return manual_sequence(forms, np.zeros((N + 1, forms.vspace.ndof)))


def bump_poly(T):
    t = Polynomial([0, 1])
    return (4 * t * (T - t) / T**2) ** 2


# --------------------------------------------------------------- reconstruction

def test_reconstruction_clauses(tg_runs):
    seq = tg_runs[0.75]
    traj = D.ReconstructedTrajectory(seq)
    dt = seq.dt
    for m in (1, 4, 10):
        v, u, p = traj.coefficients((m - 1) * dt)
        np.testing.assert_array_equal(v, seq.velocities[m - 1])
        v, u, p = traj.coefficients((m - 0.5) * dt)
        np.testing.assert_allclose(v, 0.5 * (seq.velocities[m - 1] + seq.velocities[m]), atol=1e-15)
        np.testing.assert_allclose(u, 0.75 * seq.velocities[m] + 0.25 * seq.velocities[m - 1],
                                   atol=1e-15)
        np.testing.assert_array_equal(p, seq.pressures[m - 1])


def test_right_endpoint_convention(tg_runs):
    seq = tg_runs[1.0]
    traj = D.ReconstructedTrajectory(seq)
    v, u, p = D.reconstruct_eval(traj, T)
    np.testing.assert_array_equal(v.coeffs, seq.velocities[-1])
    np.testing.assert_array_equal(u.coeffs, seq.theta_average(seq.N))
    np.testing.assert_array_equal(p.coeffs, seq.pressures[-1])


@pytest.mark.parametrize("t", [-1e-3, T * 1.01])
def test_reconstruction_outside_interval(tg_runs, t):
    with pytest.raises(ValueError):
        D.ReconstructedTrajectory(tg_runs[1.0]).coefficients(t)


# --------------------------------------------------------------- energy ledger

def test_ledger_zero(forms):
    led = D.energy_ledger(zero_sequence(forms))
    for arr in (led.kinetic, led.increment_term, led.dissipation, led.identity_residual):
        assert np.all(arr == 0)


def test_ledger_theta_one_coefficient(tg_runs):
    led = D.energy_ledger(tg_runs[1.0])
    np.testing.assert_allclose(led.increment_term, 0.5 * led.increment_sq, rtol=1e-15)


@pytest.mark.parametrize("theta", [0.6, 0.75, 1.0])
def test_ledger_identity_and_signs(tg_runs, theta):
    led = D.energy_ledger(tg_runs[theta])
    assert np.all(led.increment_term >= 0) and np.all(led.dissipation >= 0)
    assert led.max_residual <= 10 * 1e-12 * led.scale
    assert abs(led.summed_residual) <= led.increment_sq.size * 10 * 1e-12 * led.scale
    assert led.global_energy_gap() >= 0


# --------------------------------------------------------------- interpolation gap

def test_gap_factors():
    assert D.gap_factor(1.0) == 1 / 3
    assert D.gap_factor(0.6) == pytest.approx(0.0933333333333333, rel=1e-14)
    assert D.gap_factor(0.5) == pytest.approx(1 / 12)


@pytest.mark.parametrize("theta", [0.6, 0.75, 1.0])
def test_gap_equality(tg_runs, theta):
    lhs, factor, rhs = D.interpolation_gap(tg_runs[theta])
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_gap_equality_arbitrary_trajectory(forms, rng):
    seq = manual_sequence(forms, rng.standard_normal((5, forms.vspace.ndof)), theta=0.5)
    lhs, factor, rhs = D.interpolation_gap(seq)
    assert factor == pytest.approx(1 / 12)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_gap_constant_trajectory(forms, rng):
    u0 = rng.standard_normal(forms.vspace.ndof)
    lhs, _, rhs = D.interpolation_gap(manual_sequence(forms, [u0] * 4))
    assert lhs == 0 and rhs == 0


# --------------------------------------------------------------- bounds

def test_pressure_ratio_zero_flagged(forms):
    r = D.pressure_ratio(zero_sequence(forms))
    assert np.all(np.isnan(r))


def test_pressure_ratio_random_regression():
    forms = build_forms(2, 8)
    seq = run_scheme(forms, RandomDivergenceFree(2, 7), SchemeConfig(theta=0.75, T=0.1, N=10))
    assert np.nanmax(D.pressure_ratio(seq)) == pytest.approx(0.06500965312984323, rel=1e-8)


def test_dual_norm_zero_cases(forms, rng):
    assert D.dual_norm_time_derivative(zero_sequence(forms)) == 0
    u0 = rng.standard_normal(forms.vspace.ndof)
    assert D.dual_norm_time_derivative(manual_sequence(forms, [u0, u0])) == 0


def test_dual_norm_single_step_value(forms, tg_runs):
    seq = tg_runs[1.0]
    vals = [forms.dual_norm(forms.M @ (seq.velocities[m] - seq.velocities[m - 1]) / seq.dt)
            for m in range(1, seq.N + 1)]
    expected = (seq.dt * np.sum(np.array(vals) ** (4 / 3))) ** 0.75
    assert D.dual_norm_time_derivative(seq) == pytest.approx(expected, rel=1e-14)


def test_divergence_defect(tg_runs):
    assert D.divergence_defect(tg_runs[0.6]) < 1e-12


# --------------------------------------------------------------- test functions

def test_standard_family_properties():
    fam = D.standard_family(T)
    assert tuple(fam) == D.STANDARD_PHI_IDS
    x = np.random.default_rng(0).uniform(0, 2 * np.pi, (30, 2))
    s = bump_poly(T)
    for phi in fam.values():
        phi.check(2)
        t, eps = 0.037, 1e-6
        fd = (phi.value(t + eps, x) - phi.value(t - eps, x)) / (2 * eps)
        np.testing.assert_allclose(phi.dt(t, x), fd, atol=1e-6)
    assert fam["g0"].value(0.03, x[:1])[0] == pytest.approx(s(0.03), rel=1e-14)


def test_invalid_test_functions(tg_runs):
    traj = D.ReconstructedTrajectory(tg_runs[1.0])
    with pytest.raises(ValueError):
        D.lei_functional(traj, D.standard_family(2 * T)["g0"])
    one = lambda t, x: np.ones(x.shape[:-1])
    zero = lambda t, x: np.zeros(x.shape[:-1])
    nonvanishing = D.TestFunction(one, zero, lambda t, x: np.zeros(x.shape), zero, T, "one")
    with pytest.raises(ValueError, match="vanish"):
        D.telescoping_check(traj, nonvanishing)
    s, ds = D.bump(T)
    negative = D.TestFunction(lambda t, x: -s(t) * np.ones(x.shape[:-1]), zero,
                              lambda t, x: np.zeros(x.shape), zero, T, "neg")
    with pytest.raises(ValueError, match="negative"):
        D.lei_functional(traj, negative)


# --------------------------------------------------------------- telescoping

def test_telescoping_zero(forms):
    traj = D.ReconstructedTrajectory(zero_sequence(forms))
    assert D.telescoping_check(traj, D.standard_family(T)["g1"]) == (0.0, 0.0)


def closed_form_space_constant(seq):
    """Per-interval exact integrals for phi = s(t): returns (lhs, rhs, D, I12)."""
    M, K = seq.forms.M, seq.forms.K
    s = bump_poly(T)
    ds = s.deriv()
    dt, th = seq.dt, seq.theta
    lhs = rhs = Dval = i12 = 0.0
    for m in range(1, seq.N + 1):
        a, b = seq.velocities[m - 1], seq.velocities[m]
        d = b - a
        t0 = (m - 1) * dt
        tau = Polynomial([-t0 / dt, 1 / dt])
        ad, dd, aa = a @ M @ d, d @ M @ d, a @ M @ a

        def integral(p):
            P = p.integ()
            return P(m * dt) - P(t0)

        lhs += integral((ad / dt + tau * dd / dt) * s)
        rhs -= integral(0.5 * (aa + 2 * tau * ad + tau**2 * dd) * ds)
        u = th * b + (1 - th) * a
        Dval += 0.5 * (u @ M @ u) * integral(ds) - (u @ K @ u) * integral(s)
        i12 += dd / dt * integral((th - tau) * s)
    return lhs, rhs, Dval, i12


@pytest.mark.parametrize("theta", [0.6, 1.0])
def test_telescoping_space_constant_against_closed_form(tg_runs, theta):
    seq = tg_runs[theta]
    lhs, rhs = D.telescoping_check(D.ReconstructedTrajectory(seq), D.standard_family(T)["g0"])
    c_lhs, c_rhs, _, _ = closed_form_space_constant(seq)
    assert lhs == pytest.approx(c_lhs, rel=1e-12)
    assert rhs == pytest.approx(c_rhs, rel=1e-12)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_telescoping_random(random_run):
    traj = D.ReconstructedTrajectory(random_run)
    scale = D.energy_ledger(random_run).scale
    for phi in D.standard_family(T).values():
        lhs, rhs = D.telescoping_check(traj, phi)
        assert abs(lhs - rhs) <= 1e-9 * scale


# --------------------------------------------------------------- local energy functional

def test_lei_zero(forms):
    traj = D.ReconstructedTrajectory(zero_sequence(forms))
    rep = D.lei_functional(traj, D.standard_family(T)["g2"])
    assert rep.D == 0 and rep.dissipation == 0 and rep.dual_norm_dtv == 0
    assert all(v == 0 for v in rep.remainders().values())


@pytest.mark.parametrize("theta", [0.6, 0.75, 1.0])
def test_lei_space_constant_against_ledger(tg_runs, theta):
    seq = tg_runs[theta]
    rep = D.lei_functional(D.ReconstructedTrajectory(seq), D.standard_family(T)["g0"])
    # rebuild D from ledger quantities: ||u^{m,th}||^2 from kinetic and increments
    led = D.energy_ledger(seq)
    s = bump_poly(T)
    ds = s.deriv()
    Dval = 0.0
    for m in range(1, seq.N + 1):
        t0, t1 = (m - 1) * seq.dt, m * seq.dt
        usq = (2 * theta * led.kinetic[m] + 2 * (1 - theta) * led.kinetic[m - 1]
               - theta * (1 - theta) * led.increment_sq[m - 1])
        Dval += 0.5 * usq * (s(t1) - s(t0)) - led.dissipation[m - 1] / seq.dt * (
            s.integ()(t1) - s.integ()(t0))
    assert rep.D == pytest.approx(Dval, rel=1e-9)
    _, _, c_D, c_i12 = closed_form_space_constant(seq)
    assert rep.D == pytest.approx(c_D, rel=1e-9)
    assert rep.I12 == pytest.approx(c_i12, rel=1e-9)
    # P_h(u s) = u s, so the projection remainders vanish
    for key in ("I2", "R_visc", "R_nl", "R_p1"):
        assert abs(rep.remainders()[key]) < 1e-12 * led.scale
    assert rep.dissipation >= 0


def test_lei_budget_closes(random_run):
    traj = D.ReconstructedTrajectory(random_run)
    scale = D.energy_ledger(random_run).scale
    for pid, phi in D.standard_family(T).items():
        rep = D.lei_functional(traj, phi, pid)
        assert rep.phi_id == pid
        assert abs(rep.budget_residual) <= 1e-6 * scale
        assert abs(rep.equation_residual) <= 1e-9 * scale
        assert rep.dissipation >= 0


def test_i2_vanishes_for_l2_projection(random_run):
    # dv/dt lies in the velocity space and P_h is L2-orthogonal
    traj = D.ReconstructedTrajectory(random_run)
    scale = D.energy_ledger(random_run).scale
    for phi in D.standard_family(T).values():
        assert abs(D.lei_functional(traj, phi).I2) <= 1e-12 * scale


def test_random_data_has_nonzero_remainders(random_run):
    rep = D.lei_functional(D.ReconstructedTrajectory(random_run), D.standard_family(T)["g1"])
    assert abs(rep.R_visc) > 1e-8 and abs(rep.R_p1) > 1e-8


def test_solution_errors_of_exact_coefficients_small():
    forms = build_forms(2, 16)
    seq = run_scheme(forms, TaylorGreen(2), SchemeConfig(theta=1.0, T=0.01, N=2))
    e0, e1 = D.solution_errors(seq, TaylorGreen(2))
    assert e0 < 0.05 and e1 < 0.5
