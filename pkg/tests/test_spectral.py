"""Characteristic roots, adjoint basis, projections, fundamental solution.

The worked system throughout is dx/dt = -(pi/2) x(t-1), which places a
conjugate root pair at +-i pi/2 with everything else strictly stable.
Closed-form oracles (computed by hand, rechecked with sympy-level algebra):

  Delta(lambda) = lambda + (pi/2) e^{-lambda}
  Gram matrix   [[1/2, -pi/4], [pi/4, 1/2]],   det = 1/4 + pi^2/16
  Psi(0)        (2, pi) / (1 + pi^2/4)
  <1, Psi_j>    (0.90603..., -0.57680...)   (integrals of cos, sin over one lag)
  x(2) = 1 - pi/2,   x(3) = 1 - pi + pi^2/8  (method of steps polynomials)
"""

import numpy as np
import pytest

from hopfavg.spectral import (
    DelayOperator,
    SpectralError,
    adjoint_basis,
    analyze,
    bilinear_form,
    char_fn,
    estimate_gap,
    find_critical_frequency,
    fundamental_solution,
    planar_rotation,
    project,
    stable_segment_table,
    verify_spectrum,
)

HOPF_OP = DelayOperator(r=1.0, delays=np.array([1.0]), weights=np.array([-np.pi / 2]))

GRAM_EXACT = np.array([[0.5, -np.pi / 4], [np.pi / 4, 0.5]])
PSI0_EXACT = np.array([2.0, np.pi]) / (1.0 + np.pi ** 2 / 4.0)
# <1, Psi_j> = -beta_j since int_0^1 cos(pi v/2) dv = int_0^1 sin(pi v/2) dv = 2/pi,
# and the Psi coefficient columns are Gram-inverse columns: (4/(4+pi^2))*(2,-pi | pi,2)
ONES_COORDS = np.array([4.0 * np.pi, -8.0]) / (4.0 + np.pi ** 2)


def phi1(theta):
    return np.cos(np.pi / 2 * np.asarray(theta, dtype=float))


def phi2(theta):
    return np.sin(np.pi / 2 * np.asarray(theta, dtype=float))


@pytest.fixture(scope="module")
def spectral_data():
    return analyze(HOPF_OP, dt=1e-3)


# --- characteristic function -------------------------------------------------

def test_char_fn_vanishes_at_critical_root():
    assert abs(char_fn(HOPF_OP, 1j * np.pi / 2)) < 1e-15


def test_char_fn_at_zero_is_minus_l0_of_ones():
    assert char_fn(HOPF_OP, 0.0) == pytest.approx(np.pi / 2, abs=1e-15)


def test_char_fn_without_delays_is_identity_shift():
    op = DelayOperator(r=1.0, delays=np.array([]), weights=np.array([]))
    assert char_fn(op, 1.0) == pytest.approx(1.0, abs=1e-15)


def test_find_critical_frequency_hopf_case():
    pair = find_critical_frequency(HOPF_OP, omega_max=10.0)
    assert pair.omega_c == pytest.approx(np.pi / 2, abs=1e-10)
    assert pair.residual <= 1e-12


def test_find_critical_frequency_rejects_off_axis_roots():
    op = DelayOperator(r=1.0, delays=np.array([1.0]), weights=np.array([-np.pi]))
    with pytest.raises(SpectralError):
        find_critical_frequency(op, omega_max=10.0)


def test_find_critical_frequency_rejects_pure_instantaneous():
    op = DelayOperator(r=1.0, delays=np.array([]), weights=np.array([]),
                       instantaneous=1.0)
    with pytest.raises(SpectralError):
        find_critical_frequency(op, omega_max=10.0)


def test_verify_spectrum_passes_hopf_case():
    report = verify_spectrum(HOPF_OP, np.pi / 2)
    assert report.passed
    roots = np.atleast_1d(report.roots)
    assert any(abs(root - 1j * np.pi / 2) < 1e-8 for root in roots)
    # the critical pair is alone in the strip Re > -delta
    strip = roots[np.real(roots) > -0.1]
    assert strip.size == 1


def test_verify_spectrum_flags_unstable_root():
    op = DelayOperator(r=1.0, delays=np.array([1.0]), weights=np.array([-2.0]))
    report = verify_spectrum(op, None)
    assert not report.passed


def test_verify_spectrum_flags_root_at_origin():
    op = DelayOperator(r=1.0, delays=np.array([]), weights=np.array([]))
    report = verify_spectrum(op, None)
    assert not report.passed


# --- bilinear form and adjoint basis ------------------------------------------

def test_bilinear_form_closed_forms():
    assert bilinear_form(HOPF_OP, phi1, phi1) == pytest.approx(0.5, abs=1e-10)
    assert bilinear_form(HOPF_OP, phi2, phi1) == pytest.approx(np.pi / 4, abs=1e-10)
    assert bilinear_form(HOPF_OP, phi1, phi2) == pytest.approx(-np.pi / 4, abs=1e-10)
    assert bilinear_form(HOPF_OP, phi2, phi2) == pytest.approx(0.5, abs=1e-10)


def test_bilinear_form_no_delays_reduces_to_endpoint_product():
    op = DelayOperator(r=1.0, delays=np.array([]), weights=np.array([]))
    value = bilinear_form(op, lambda u: 3.0 + 0.0 * np.asarray(u),
                          lambda u: -2.0 + 0.0 * np.asarray(u))
    assert value == pytest.approx(-6.0, abs=1e-14)


def test_adjoint_basis_gram_and_psi0():
    basis = adjoint_basis(HOPF_OP, np.pi / 2)
    assert np.max(np.abs(basis.gram - GRAM_EXACT)) < 1e-9
    assert np.max(np.abs(basis.psi0 - PSI0_EXACT)) < 1e-8
    assert basis.biorth_residual <= 1e-10


def test_adjoint_basis_biorthogonality_direct():
    basis = adjoint_basis(HOPF_OP, np.pi / 2)
    for i, phi in enumerate((phi1, phi2)):
        for j in range(2):
            value = bilinear_form(
                HOPF_OP, phi, lambda s, j=j: basis.psi_values(s)[..., j])
            assert value == pytest.approx(1.0 if i == j else 0.0, abs=1e-10)


def test_constant_segment_coordinates():
    basis = adjoint_basis(HOPF_OP, np.pi / 2)
    z, _ = project(HOPF_OP, basis, lambda th: np.ones_like(np.asarray(th, float)))
    assert np.max(np.abs(z - ONES_COORDS)) < 1e-8


# --- projection ---------------------------------------------------------------

def test_project_recovers_basis_coordinates():
    basis = adjoint_basis(HOPF_OP, np.pi / 2)
    z, y = project(HOPF_OP, basis, phi1)
    assert np.max(np.abs(z - [1.0, 0.0])) < 1e-10
    grid = np.linspace(-1.0, 0.0, 201)
    assert np.max(np.abs(y(grid))) < 1e-10


def test_project_is_linear():
    basis = adjoint_basis(HOPF_OP, np.pi / 2)
    v = np.array([0.3, -0.7])
    z, _ = project(HOPF_OP, basis,
                   lambda th: v[0] * phi1(th) + v[1] * phi2(th))
    assert np.max(np.abs(z - v)) < 1e-10


def test_projection_idempotent_on_mixed_segments(spectral_data):
    # segment = Phi.z + w_s: coordinates must come back as z, and the
    # residual must re-project to zero
    sd = spectral_data
    rng = np.random.default_rng(3)
    for s in (1.0, 2.5):
        seg = sd.table.segment_callable(s)
        z = rng.uniform(-1, 1, size=2)
        mixed = lambda th, z=z, seg=seg: sd.basis.phi(th, z) + seg(th)
        z_hat, y = project(HOPF_OP, sd.basis, mixed)
        assert np.max(np.abs(z_hat - z)) < 1e-6
        z_res, _ = project(HOPF_OP, sd.basis, y)
        assert np.max(np.abs(z_res)) < 1e-9


# --- fundamental solution ------------------------------------------------------

def test_fundamental_solution_piecewise_polynomial_values():
    fs = fundamental_solution(HOPF_OP, t_max=3.0, dt=1e-3)
    assert fs.eval(np.array([0.5]))[0] == pytest.approx(1.0, abs=1e-6)
    assert fs.eval(np.array([2.0]))[0] == pytest.approx(1.0 - np.pi / 2, abs=1e-6)
    assert fs.eval(np.array([3.0]))[0] == pytest.approx(
        1.0 - np.pi + np.pi ** 2 / 8.0, abs=1e-6)


def test_fundamental_solution_jump_convention():
    fs = fundamental_solution(HOPF_OP, t_max=1.0, dt=1e-3)
    assert fs.eval(np.array([-0.25]))[0] == 0.0
    assert fs.eval(np.array([0.0]))[0] == 1.0
    assert fs.eval(np.array([0.0]), left_at_zero=True)[0] == 0.0


def test_fundamental_solution_without_delays_is_constant():
    op = DelayOperator(r=1.0, delays=np.array([]), weights=np.array([]))
    fs = fundamental_solution(op, t_max=5.0, dt=1e-3)
    assert np.max(np.abs(fs.x - 1.0)) < 1e-12


def test_fundamental_solution_requires_aligned_step():
    with pytest.raises(SpectralError):
        fundamental_solution(HOPF_OP, t_max=2.0, dt=0.0003)


def test_fundamental_solution_refuses_horizon_overrun():
    fs = fundamental_solution(HOPF_OP, t_max=2.0, dt=1e-3)
    with pytest.raises(SpectralError):
        fs.eval(np.array([2.5]))


# --- stable segments -----------------------------------------------------------

def test_stable_segment_at_zero_age(spectral_data):
    table = spectral_data.table
    psi0 = spectral_data.basis.psi0
    theta = table.theta_grid
    phi_psi0 = np.cos(np.pi / 2 * theta) * psi0[0] + np.sin(np.pi / 2 * theta) * psi0[1]
    w0 = table.values[0]
    interior = theta < 0
    assert np.max(np.abs(w0[interior] + phi_psi0[interior])) < 1e-9
    assert w0[-1] == pytest.approx(1.0 - phi_psi0[-1], abs=1e-9)


def test_stable_segments_have_no_critical_component(spectral_data):
    sd = spectral_data
    for s in (1.0, 3.0, 6.0):
        z, _ = project(HOPF_OP, sd.basis, sd.table.segment_callable(s))
        assert np.max(np.abs(z)) < 1e-6


def test_stable_segment_norms_decay_exponentially(spectral_data):
    table = spectral_data.table
    mask = (table.s_grid >= 2.0) & (table.s_grid <= 10.0)
    s = table.s_grid[mask]
    log_norm = np.log(table.sup_norms[mask])
    slope, intercept = np.polyfit(s, log_norm, 1)
    fitted = slope * s + intercept
    ss_res = np.sum((log_norm - fitted) ** 2)
    ss_tot = np.sum((log_norm - log_norm.mean()) ** 2)
    r2 = 1.0 - ss_res / ss_tot
    assert slope < 0
    assert r2 > 0.99


def test_stable_segment_envelope(spectral_data):
    sd = spectral_data
    table, gap = sd.table, sd.gap
    mask = table.s_grid >= 1.0
    bound = gap.K * np.exp(-gap.kappa * table.s_grid[mask])
    assert np.all(table.sup_norms[mask] <= bound * (1.0 + 1e-6))


def test_table_requires_horizon_at_least_one_lag():
    basis = adjoint_basis(HOPF_OP, np.pi / 2)
    with pytest.raises(SpectralError):
        stable_segment_table(HOPF_OP, np.pi / 2, basis.psi0,
                             s_max=0.5, ds=0.05, dt=1e-3)


# --- spectral gap ----------------------------------------------------------------

def test_gap_second_root_strictly_stable(spectral_data):
    gap = spectral_data.gap
    assert gap.second_root.real < -1.0
    assert gap.kappa > 0
    assert gap.kappa <= -gap.second_root.real + 1e-12


def test_gap_fit_and_root_estimates_agree(spectral_data):
    gap = spectral_data.gap
    assert abs(gap.fit_rate - (-gap.second_root.real)) / abs(gap.second_root.real) < 0.2


def test_gap_requires_stable_roots_in_box():
    op = DelayOperator(r=1.0, delays=np.array([]), weights=np.array([]))
    report = verify_spectrum(op, None)
    assert not report.passed  # gap estimation is gated on this upstream


# --- rotation helpers -------------------------------------------------------------

def test_planar_rotation_is_orthogonal():
    rot = planar_rotation(np.pi / 2, np.array([0.3, 1.7]))
    eye = rot @ np.swapaxes(rot, -1, -2)
    assert np.max(np.abs(eye - np.eye(2))) < 1e-14


def test_analyze_bundles_consistent_data(spectral_data):
    sd = spectral_data
    assert sd.omega_c == pytest.approx(np.pi / 2, abs=1e-10)
    assert sd.residual <= 1e-10
    assert sd.spectrum.passed
    assert sd.table.s_grid[-1] >= 12.0 - 1e-9
