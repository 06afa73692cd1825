import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from thnse.diagnostics import energy_ledger
from thnse.errors import ConfigurationError, SolverError
from thnse.flows import RandomDivergenceFree, TaylorGreen
from thnse.spaces import Field, norm
from thnse.stepper import (SchemeConfig, _solve_saddle, build_forms, momentum_residual,
                           project_initial, run_scheme, saddle_matrix, theta_step)


@pytest.mark.parametrize("theta", [0.4, 0.5, 1.01, -1.0])
def test_theta_range(theta):
    with pytest.raises(ConfigurationError, match=r"\(1/2, 1\]"):
        SchemeConfig(theta=theta, T=1.0, N=10)


def test_theta_half_needs_force():
    cfg = SchemeConfig(theta=0.5, T=1.0, N=10, force_theta_half=True)
    assert cfg.theta == 0.5


@pytest.mark.parametrize("kwargs", [dict(T=0.0, N=1), dict(T=1.0, N=0), dict(T=1.0, N=2.5),
                                    dict(T=1.0, N=3, convection="upwind"),
                                    dict(T=1.0, N=3, picard_tol=0.0)])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigurationError):
        SchemeConfig(theta=1.0, **kwargs)


def test_from_step():
    cfg = SchemeConfig.from_step(0.75, 0.01, 0.1)
    assert cfg.N == 10
    assert abs(cfg.dt * cfg.N - cfg.T) <= 1e-14 * cfg.T
    with pytest.raises(ConfigurationError):
        SchemeConfig.from_step(1.0, 0.03, 0.1)


def test_saddle_solve_matches_monolithic_system(forms2, rng):
    A = forms2.M / 0.01 + forms2.K + forms2.nonlinear_matrix(rng.standard_normal(forms2.vspace.ndof))
    r = rng.standard_normal(forms2.vspace.ndof)
    u, p = _solve_saddle(forms2, A, r)
    S = saddle_matrix(forms2, A)
    b = np.zeros(S.shape[0])
    b[:r.size] = r
    x = spsolve(S, b)
    np.testing.assert_allclose(u, x[:u.size], atol=1e-11)
    np.testing.assert_allclose(p, x[u.size:u.size + p.size], atol=1e-10)


def test_project_zero():
    forms = build_forms(2, 2)
    assert np.all(project_initial(forms, lambda x: np.zeros(x.shape)).coeffs == 0)


def test_projected_taylor_green_energy():
    forms = build_forms(2, 16)
    u0 = project_initial(forms, TaylorGreen(2))
    assert norm(u0) ** 2 == pytest.approx((2 * np.pi) ** 2 / 2, rel=0.01)


@pytest.mark.parametrize("div_free", [True, False])
def test_projected_random_field_mean_zero(forms2, div_free):
    u0 = project_initial(forms2, RandomDivergenceFree(2, 3), divergence_free=div_free)
    assert np.abs(u0.means()).max() < 1e-12
    if div_free:
        assert np.abs(forms2.B @ u0.coeffs).max() < 1e-12


def test_plain_projection_is_l2_projection_minus_mean(forms2):
    from thnse.spaces import l2_project_velocity, subtract_mean
    f = lambda x: np.stack([np.cos(x[..., 0]) + 0.3, np.sin(x[..., 1] + x[..., 0])], -1)
    a = project_initial(forms2, f, divergence_free=False)
    b = subtract_mean(l2_project_velocity(forms2.vspace, f))
    np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-13)


def test_zero_is_fixed_point(forms2):
    out = theta_step(forms2, np.zeros(forms2.vspace.ndof), SchemeConfig(theta=0.75, T=0.1, N=1))
    assert out.iterations == 1
    assert np.all(out.velocity == 0) and np.all(out.pressure == 0)


def test_zero_run(forms2):
    seq = run_scheme(forms2, lambda x: np.zeros(x.shape), SchemeConfig(theta=0.6, T=0.1, N=4))
    assert np.all(seq.velocities == 0) and np.all(seq.pressures == 0)


def test_single_step_decay_matches_exact_rate():
    forms = build_forms(2, 16)
    u0 = project_initial(forms, TaylorGreen(2))
    dt = 1e-3
    out = theta_step(forms, u0.coeffs, SchemeConfig(theta=1.0, T=dt, N=1))
    ratio = norm(Field(forms.vspace, out.velocity)) ** 2 / norm(u0) ** 2
    assert ratio < 1
    h = forms.mesh.h
    assert abs(ratio - np.exp(-4 * dt)) <= 4 * dt * h**2 + dt**2


def test_converged_step_satisfies_equations(forms8):
    u0 = project_initial(forms8, TaylorGreen(2))
    cfg = SchemeConfig(theta=0.75, T=0.01, N=1)
    out = theta_step(forms8, u0.coeffs, cfg)
    assert out.residual <= cfg.picard_tol
    assert momentum_residual(forms8, u0.coeffs, out.velocity, out.pressure, 0.75, 0.01) <= 10 * cfg.picard_tol
    assert np.abs(forms8.B @ out.velocity).max() < 1e-12
    assert np.abs(forms8.velocity_mean_rows @ out.velocity).max() < 1e-12
    assert abs(forms8.pressure_mean_row @ out.pressure) < 1e-12


@pytest.mark.parametrize("theta", [1.0, 0.6])
def test_taylor_green_run_monotone(forms8, theta):
    seq = run_scheme(forms8, TaylorGreen(2), SchemeConfig(theta=theta, T=0.1, N=10))
    norms = np.array([norm(seq.velocity(m)) for m in range(seq.N + 1)])
    assert np.all(np.diff(norms) <= 0)
    for m in range(1, seq.N + 1):
        assert np.abs(seq.velocity(m).means()).max() < 1e-12
        assert abs(seq.pressure(m).means()[0]) < 1e-12
    if theta == 0.6:
        # first-run regression of the increment sum
        inc = energy_ledger(seq).increment_sq.sum()
        assert inc == pytest.approx(0.09567280101016479, rel=1e-8)


def test_stokes_backward_euler_single_iteration(forms2):
    cfg = SchemeConfig(theta=1.0, T=0.05, N=5, convection="off")
    seq = run_scheme(forms2, TaylorGreen(2), cfg)
    assert np.all(seq.iterations == 1)
    # Stokes backward Euler: M(u^m - u^{m-1})/dt + K u^m - B^T p^m = multiplier terms only
    r = forms2.M @ (seq.velocities[1] - seq.velocities[0]) / cfg.dt + forms2.K @ seq.velocities[1] \
        - forms2.B.T @ seq.pressures[0]
    assert forms2.dual_norm(r) < 1e-10


@pytest.mark.parametrize("mode", ["new", "old"])
def test_experimental_convection_modes_run(forms2, mode):
    seq = run_scheme(forms2, TaylorGreen(2), SchemeConfig(theta=1.0, T=0.02, N=2, convection=mode))
    assert np.all(np.isfinite(seq.velocities))


def test_picard_failure_reports_step_and_history(forms8):
    cfg = SchemeConfig(theta=1.0, T=0.2, N=2, picard_max_iters=2)
    with pytest.raises(SolverError) as info:
        run_scheme(forms8, TaylorGreen(2), cfg)
    assert info.value.step == 1
    assert len(info.value.residuals) == 2
    assert "smaller time step" in str(info.value)


def test_pressure_index_checked(forms2):
    seq = run_scheme(forms2, TaylorGreen(2), SchemeConfig(theta=1.0, T=0.01, N=1))
    with pytest.raises(IndexError):
        seq.pressure(0)


def test_3d_run_divergence_free():
    forms = build_forms(3, 2)
    seq = run_scheme(forms, RandomDivergenceFree(3, 1), SchemeConfig(theta=1.0, T=0.02, N=2))
    assert np.abs(forms.B @ seq.velocities[-1]).max() < 1e-12
    led = energy_ledger(seq)
    assert led.max_residual <= 10 * 1e-12 * led.scale
