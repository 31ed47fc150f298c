"""Spectral reduction of scalar linear delay operators at a Hopf point.

The linear part of the delay equation is a point-mass operator

    L0(eta) = c0*eta(0) + sum_k c_k*eta(-d_k),      0 < d_k <= r,

acting on history segments eta on [-r, 0].  Its characteristic function is
Delta(lam) = lam - c0 - sum_k c_k*exp(-lam*d_k).  At a Hopf point a single
conjugate root pair +-i*omega_c sits on the imaginary axis and every other
root has negative real part.

This module locates the critical frequency, certifies the root configuration
by the argument principle, builds the basis Phi = (cos(omega_c*.),
sin(omega_c*.)) of the critical eigenspace together with the adjoint basis
Psi normalized against the Hale bilinear form, and tabulates the stable
(complementary) component of the fundamental solution, whose exponential
decay rate and prefactor it estimates from the tabulated data and the root
scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SpectralError",
    "DelayOperator",
    "char_fn",
    "char_fn_derivative",
    "CriticalPair",
    "find_critical_frequency",
    "SpectrumReport",
    "verify_spectrum",
    "planar_generator",
    "planar_rotation",
    "composite_simpson_weights",
    "bilinear_form",
    "AdjointBasis",
    "adjoint_basis",
    "projection_weights",
    "project_sampled",
    "project",
    "FundamentalSolution",
    "fundamental_solution",
    "StableSegmentTable",
    "stable_segment_table",
    "SpectralGap",
    "estimate_gap",
    "SpectralData",
    "analyze",
]

GRID_ALIGN_TOL = 1e-9


class SpectralError(ValueError):
    """Raised when the root configuration or a precondition fails."""


# ---------------------------------------------------------------------------
# delay operator and characteristic function


@dataclass(frozen=True)
class DelayOperator:
    """Point-mass linear functional c0*eta(0) + sum_k c_k*eta(-d_k).

    Parameters
    ----------
    r : float
        Memory horizon; segments live on [-r, 0].
    delays : array_like
        Positive lags d_k, each in (0, r].
    weights : array_like
        Coefficients c_k, one per delay.
    instantaneous : float
        Coefficient c0 of the undelayed value.
    """

    r: float
    delays: np.ndarray
    weights: np.ndarray
    instantaneous: float = 0.0

    def __post_init__(self):
        delays = np.atleast_1d(np.asarray(self.delays, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "weights", weights)
        if self.r <= 0 or not np.isfinite(self.r):
            raise SpectralError(f"memory horizon r={self.r} must be positive")
        if delays.shape != weights.shape:
            raise SpectralError("delays and weights must have equal length")
        if delays.size and (delays.min() <= 0 or delays.max() > self.r + GRID_ALIGN_TOL):
            raise SpectralError(f"delays {delays} must lie in (0, r={self.r}]")
        if not np.all(np.isfinite(weights)) or not np.isfinite(self.instantaneous):
            raise SpectralError("operator coefficients must be finite")

    def apply(self, segment) -> float:
        """Apply to a segment callable defined on [-r, 0]."""
        value = self.instantaneous * segment(0.0)
        for d, c in zip(self.delays, self.weights):
            value = value + c * segment(-d)
        return value


def char_fn(op: DelayOperator, lam):
    """Characteristic function Delta(lam), vectorized over lam."""
    lam = np.asarray(lam, dtype=complex)
    value = lam - op.instantaneous
    for d, c in zip(op.delays, op.weights):
        value = value - c * np.exp(-lam * d)
    return value


def char_fn_derivative(op: DelayOperator, lam):
    lam = np.asarray(lam, dtype=complex)
    value = np.ones_like(lam)
    for d, c in zip(op.delays, op.weights):
        value = value + c * d * np.exp(-lam * d)
    return value


def _newton_roots(op: DelayOperator, starts, iterations=100, tol=1e-13):
    """Damped-free vectorized Newton; returns converged points (unfiltered)."""
    lam = np.asarray(starts, dtype=complex).ravel().copy()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(iterations):
            f = char_fn(op, lam)
            fp = char_fn_derivative(op, lam)
            step = np.where(fp != 0, f / np.where(fp == 0, 1.0, fp), 0.0)
            # keep divergent iterates from overflowing
            step = np.where(np.abs(step) > 10.0, step / np.abs(step) * 10.0, step)
            lam = lam - step
            lam = np.where(np.isfinite(lam), lam, np.inf)
        residual = np.abs(char_fn(op, lam))
    scale = 1.0 + np.abs(lam)
    good = np.isfinite(residual) & (residual <= tol * scale)
    return lam[good]


def _cluster(points, tol=1e-7):
    """Deduplicate complex points, averaging within tol clusters."""
    out: list = []
    for p in sorted(points, key=lambda z: (round(z.real, 9), round(z.imag, 9))):
        for i, q in enumerate(out):
            if abs(p - q[0] / q[1]) <= tol * (1.0 + abs(p)):
                out[i] = (q[0] + p, q[1] + 1)
                break
        else:
            out.append((p, 1))
    return np.array([s / n for s, n in out]) if out else np.empty(0, complex)


@dataclass(frozen=True)
class CriticalPair:
    """Critical frequency omega_c > 0 with |Delta(i*omega_c)| = residual."""

    omega_c: float
    residual: float
    root: complex


def find_critical_frequency(op: DelayOperator, omega_max: float = 50.0,
                            axis_tol: float = 1e-8) -> CriticalPair:
    """Locate the unique omega_c in (0, omega_max] with Delta(i*omega_c) = 0.

    Newton refinement runs from starts on the imaginary axis (spacing 0.25).
    Raises :class:`SpectralError` if no root lies on the axis within
    ``axis_tol`` or if more than one does (the Hopf configuration requires a
    single critical pair).
    """
    starts = 1j * np.arange(0.125, omega_max + 0.25, 0.25)
    roots = _newton_roots(op, starts)
    if roots.size:
        scale = 1.0 + np.abs(roots)
        on_axis = roots[np.abs(roots.real) <= axis_tol * scale]
        on_axis = on_axis[(on_axis.imag > axis_tol)
                          & (on_axis.imag <= omega_max * (1 + 1e-12))]
        on_axis = _cluster(on_axis)
    else:
        on_axis = roots
    if on_axis.size == 0:
        nearest = ""
        if roots.size:
            strip = roots[(roots.imag > 0) & (roots.imag <= omega_max)]
            if strip.size:
                best = strip[np.argmin(np.abs(strip.real))]
                nearest = f"; nearest root {best:.6g} is off the axis"
        raise SpectralError(
            "no purely imaginary characteristic root found in "
            f"(0, {omega_max}]{nearest}"
        )
    if on_axis.size > 1:
        raise SpectralError(
            f"multiple imaginary roots found: {np.sort(on_axis.imag)}; "
            "a single critical pair is required"
        )
    root = complex(on_axis[0])
    omega_c = float(root.imag)
    residual = float(abs(char_fn(op, 1j * omega_c)))
    if residual > 1e-10:
        raise SpectralError(
            f"axis residual {residual:.3e} too large at omega={omega_c}"
        )
    return CriticalPair(omega_c=omega_c, residual=residual, root=root)


# ---------------------------------------------------------------------------
# argument-principle certification


def _winding_number(op: DelayOperator, corners, samples_per_unit=40):
    """Winding number of Delta around the closed polygon through corners."""
    points = []
    for a, b in zip(corners, corners[1:] + corners[:1]):
        n = max(64, int(abs(b - a) * samples_per_unit))
        seg = a + (b - a) * np.arange(n) / n
        points.append(seg)
    z = np.concatenate(points)
    values = char_fn(op, z)
    min_mod = float(np.min(np.abs(values)))
    for _ in range(24):
        ratios = values / np.roll(values, 1)
        dphi = np.angle(ratios)
        bad = np.abs(dphi) > 0.8
        if not bad.any():
            break
        # insert midpoints on offending intervals (interval k: z[k-1] -> z[k])
        idx = np.nonzero(bad)[0]
        mids = 0.5 * (z[idx - 1] + z[idx])
        order = np.argsort(np.concatenate([np.arange(z.size, dtype=float),
                                           idx - 0.5]))
        z = np.concatenate([z, mids])[order]
        values = np.concatenate([values, char_fn(op, mids)])[order]
        min_mod = min(min_mod, float(np.min(np.abs(values))))
    total = float(np.sum(np.angle(values / np.roll(values, 1))))
    turns = total / (2.0 * np.pi)
    return turns, min_mod


@dataclass(frozen=True)
class SpectrumReport:
    passed: bool
    roots: np.ndarray
    count: int
    message: str
    box: tuple


def verify_spectrum(op: DelayOperator, omega_c: float | None,
                    delta: float = 0.1, re_min: float = -10.0,
                    im_max: float = 30.0) -> SpectrumReport:
    """Certify that +-i*omega_c are the only roots with Re > -delta.

    Roots are located by Newton iteration from a grid of starts (spacing
    0.25) and counted independently by the argument principle around the
    same rectangle; a count mismatch raises.  With ``omega_c=None`` the
    check passes only when the extended right half-plane strip contains no
    roots at all.

    The box right edge is pushed past delta to the a-priori root bound: any
    root with Re >= -delta satisfies |lam| <= (|c0|+sum|ck|) e^{delta r}, so
    unstable roots cannot hide beyond the contour.
    """
    weight_sum = abs(op.instantaneous) + float(np.sum(np.abs(op.weights)))
    root_bound = weight_sum * np.exp(delta * op.r) + 0.5
    re_hi = max(delta, root_bound)
    im_max = max(im_max, root_bound)
    # Newton starts; slight inset keeps starts off potential symmetry lines
    res = np.arange(re_min, re_hi + 0.25, 0.25)
    ims = np.arange(0.0, im_max + 0.25, 0.25) + 0.013
    grid = (res[:, None] + 1j * ims[None, :]).ravel()
    roots = _newton_roots(op, grid)
    # fold conjugates, keep upper half plane plus the real axis
    roots = roots[(roots.imag >= -1e-9)]
    roots = np.where(np.abs(roots.imag) <= 1e-9, roots.real + 0j, roots)
    inside = roots[(roots.real >= re_min - 1e-9) & (roots.real <= re_hi + 1e-9)
                   & (roots.imag <= im_max + 1e-9)]
    found = _cluster(inside)

    # contour: perturb the box until it stays clear of all roots
    shift = 0.0
    for attempt in range(12):
        eps_im = 1e-3 + shift
        corners = [complex(re_min - shift, -eps_im),
                   complex(re_hi + shift, -eps_im),
                   complex(re_hi + shift, im_max + shift),
                   complex(re_min - shift, im_max + shift)]
        turns, min_mod = _winding_number(op, corners)
        if min_mod > 1e-6 and abs(turns - round(turns)) < 0.05:
            break
        shift += 0.0371
    else:
        raise SpectralError("could not place a root-free contour; "
                            "perturb the box manually")
    count = int(round(turns))

    if count != found.size:
        raise SpectralError(
            f"argument principle counts {count} roots in the box but the "
            f"start grid located {found.size}: {found}; refine the grid"
        )

    strip = found[found.real > -delta]
    if omega_c is None:
        passed = strip.size == 0
        message = ("no roots in the extended right half-plane" if passed else
                   f"roots {strip} violate the stability strip")
        return SpectrumReport(passed, found, count, message, (re_min, re_hi, im_max))

    critical = strip[np.abs(strip - 1j * omega_c) <= 1e-6]
    offenders = strip[np.abs(strip - 1j * omega_c) > 1e-6]
    if critical.size == 0:
        raise SpectralError(
            f"claimed critical root i*{omega_c} was not found in the box"
        )
    passed = offenders.size == 0
    message = ("only the critical pair lies in the strip" if passed else
               f"extra roots {offenders} lie in Re > {-delta}")
    return SpectrumReport(passed, found, count, message, (re_min, re_hi, im_max))


# ---------------------------------------------------------------------------
# planar rotation of the critical coordinates


def planar_generator(omega_c: float) -> np.ndarray:
    """Generator B = [[0, omega_c], [-omega_c, 0]] of the critical rotation."""
    return np.array([[0.0, omega_c], [-omega_c, 0.0]])


def planar_rotation(omega_c: float, t):
    """exp(t*B) for scalar or array t; result shape t.shape + (2, 2)."""
    t = np.asarray(t, dtype=float)
    c, s = np.cos(omega_c * t), np.sin(omega_c * t)
    out = np.empty(t.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = s
    out[..., 1, 0] = -s
    out[..., 1, 1] = c
    return out


# ---------------------------------------------------------------------------
# bilinear form and adjoint basis


def composite_simpson_weights(n: int, h: float) -> np.ndarray:
    """Weights on n+1 uniform nodes; Simpson, with a 3/8 tail when n is odd."""
    if n < 1:
        raise ValueError("need at least one subinterval")
    w = np.zeros(n + 1)
    if n == 1:
        w[:] = h / 2.0
        return w
    if n % 2 == 0:
        w[0] = w[-1] = h / 3.0
        w[1:-1:2] = 4.0 * h / 3.0
        w[2:-1:2] = 2.0 * h / 3.0
        return w
    if n == 3:
        w[:] = np.array([3, 9, 9, 3]) * h / 8.0
        return w
    m = n - 3
    w[: m + 1] = composite_simpson_weights(m, h)
    w[m:] += np.array([3, 9, 9, 3]) * h / 8.0
    return w


def bilinear_form(op: DelayOperator, phi, psi, n_per_unit: int = 2000) -> float:
    """Hale pairing <phi, psi> for the point-mass operator.

    phi is a segment callable on [-r, 0], psi an adjoint segment callable on
    [0, r].  The pairing specializes to

        phi(0)*psi(0) + sum_k c_k * int_{-d_k}^0 phi(u)*psi(u + d_k) du,

    each integral by composite Simpson with at least ``n_per_unit``
    subintervals per unit delay.
    """
    value = float(phi(0.0)) * float(psi(0.0))
    for d, c in zip(op.delays, op.weights):
        n = int(np.ceil(n_per_unit * d))
        n = max(n, 8)
        n += n % 2
        u = np.linspace(-d, 0.0, n + 1)
        w = composite_simpson_weights(n, d / n)
        value += c * float(np.dot(w, phi(u) * psi(u + d)))
    return value


@dataclass(frozen=True)
class AdjointBasis:
    """Critical basis Phi = (cos, sin) and its bilinear-form dual Psi.

    ``coeffs`` has columns (alpha_j, beta_j) so that
    Psi_j(s) = alpha_j*cos(omega_c*s) + beta_j*sin(omega_c*s) on [0, r]
    and <Phi_i, Psi_j> = delta_ij.  ``psi0`` is (Psi_1(0), Psi_2(0)).
    """

    omega_c: float
    gram: np.ndarray
    coeffs: np.ndarray
    psi0: np.ndarray
    biorth_residual: float

    def phi_values(self, theta):
        """Phi(theta) = (cos, sin)(omega_c*theta); shape theta.shape + (2,)."""
        theta = np.asarray(theta, dtype=float)
        return np.stack([np.cos(self.omega_c * theta),
                         np.sin(self.omega_c * theta)], axis=-1)

    def phi(self, theta, z):
        """Segment value Phi(theta) . z for coordinates z (z1, z2)."""
        theta = np.asarray(theta, dtype=float)
        return (np.cos(self.omega_c * theta) * z[0]
                + np.sin(self.omega_c * theta) * z[1])

    def psi_values(self, s):
        """(Psi_1(s), Psi_2(s)); shape s.shape + (2,)."""
        s = np.asarray(s, dtype=float)
        trig = np.stack([np.cos(self.omega_c * s), np.sin(self.omega_c * s)],
                        axis=-1)
        return trig @ self.coeffs


def adjoint_basis(op: DelayOperator, omega_c: float,
                  n_per_unit: int = 2000) -> AdjointBasis:
    """Normalize the adjoint pair against the bilinear form.

    Builds the 2x2 Gram matrix M_ij = <Phi_i, e_j> in the trig basis
    e = (cos(omega_c*.), sin(omega_c*.)) on [0, r]; the Psi coefficient
    columns are M^{-1} columns.  Raises if M is numerically singular.
    """
    w = omega_c
    basis = [lambda u: np.cos(w * u), lambda u: np.sin(w * u)]
    gram = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            gram[i, j] = bilinear_form(op, basis[i], basis[j], n_per_unit)
    if np.linalg.cond(gram) > 1e12:
        raise SpectralError(
            "Gram matrix of the critical pair is numerically singular; "
            "the basis does not span a two-dimensional eigenspace"
        )
    coeffs = np.linalg.solve(gram, np.eye(2))
    psi0 = coeffs[0, :].copy()

    out = AdjointBasis(omega_c=omega_c, gram=gram, coeffs=coeffs, psi0=psi0,
                       biorth_residual=0.0)
    check = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            check[i, j] = bilinear_form(
                op, basis[i], lambda s, j=j: out.psi_values(s)[..., j],
                n_per_unit)
    residual = float(np.max(np.abs(check - np.eye(2))))
    if residual > 1e-8:
        raise SpectralError(f"biorthogonality residual {residual:.3e}")
    object.__setattr__(out, "biorth_residual", residual)
    return out


def projection_weights(op: DelayOperator, basis: AdjointBasis,
                       theta_grid: np.ndarray) -> np.ndarray:
    """Euclidean weights W (2 x n) with z = W @ values for sampled segments.

    ``theta_grid`` must be uniform from -r to 0; each delay d_k must land on
    it.  Row j accumulates c_k-weighted Simpson rules against Psi_j plus the
    point mass Psi_j(0) at theta = 0.
    """
    n = theta_grid.size - 1
    h = (theta_grid[-1] - theta_grid[0]) / n
    if abs(theta_grid[0] + op.r) > GRID_ALIGN_TOL or abs(theta_grid[-1]) > GRID_ALIGN_TOL:
        raise SpectralError("theta grid must span [-r, 0]")
    weights = np.zeros((2, n + 1))
    weights[:, -1] = basis.psi0
    for d, c in zip(op.delays, op.weights):
        m = d / h
        if abs(m - round(m)) > 1e-6:
            raise SpectralError(f"delay {d} is not aligned with the theta grid")
        m = int(round(m))
        w = composite_simpson_weights(m, h)
        u = theta_grid[n - m:]
        psi = basis.psi_values(u + d)
        weights[0, n - m:] += c * w * psi[:, 0]
        weights[1, n - m:] += c * w * psi[:, 1]
    return weights


def project_sampled(op: DelayOperator, basis: AdjointBasis,
                    theta_grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Critical coordinates of segments sampled on a uniform theta grid.

    ``values`` has the grid on its last axis; returns z with shape
    values.shape[:-1] + (2,).
    """
    weights = projection_weights(op, basis, theta_grid)
    values = np.asarray(values, dtype=float)
    return values @ weights.T


def project(op: DelayOperator, basis: AdjointBasis, segment,
            n_per_unit: int = 2000):
    """Split a segment callable into coordinates z and residual segment y.

    Returns ``(z, y)`` with z_j = <segment, Psi_j> and y the callable
    segment(theta) - Phi(theta) . z, which re-projects to zero.
    """
    z = np.array([
        bilinear_form(op, segment, lambda s, j=j: basis.psi_values(s)[..., j],
                      n_per_unit)
        for j in range(2)
    ])

    def residual(theta):
        return segment(theta) - basis.phi(theta, z)

    return z, residual


# ---------------------------------------------------------------------------
# fundamental solution and stable segments


def _lagrange_cubic(xi):
    """Weights of 4-node Lagrange interpolation at local coordinate xi."""
    w0 = -(xi - 1.0) * (xi - 2.0) * (xi - 3.0) / 6.0
    w1 = xi * (xi - 2.0) * (xi - 3.0) / 2.0
    w2 = -xi * (xi - 1.0) * (xi - 3.0) / 2.0
    w3 = xi * (xi - 1.0) * (xi - 2.0) / 6.0
    return w0, w1, w2, w3


@dataclass
class FundamentalSolution:
    """Solution of dx/dt = L0(x_t) from a unit jump at zero.

    The history is x(u) = 0 for u < 0 with x(0) = 1; ``x[k]`` holds the value
    at ``k*dt``.  ``eval`` interpolates cubically between nodes (one-sided at
    the ends) and implements the jump: queries below zero return 0, queries
    at exactly zero return the right value 1.
    """

    op: DelayOperator
    dt: float
    t: np.ndarray
    x: np.ndarray

    def eval(self, u, left_at_zero: bool = False):
        u = np.asarray(u, dtype=float)
        scalar = u.ndim == 0
        u = np.atleast_1d(u)
        if u.size and float(np.max(u)) > self.t[-1] + GRID_ALIGN_TOL:
            raise SpectralError(
                f"query at t={float(np.max(u)):.6g} beyond the tabulated "
                f"horizon {self.t[-1]:.6g}")
        out = np.zeros(u.shape)
        at_zero = np.abs(u) <= GRID_ALIGN_TOL
        out[at_zero] = 0.0 if left_at_zero else 1.0
        pos = (u > GRID_ALIGN_TOL)
        if pos.any():
            idx = u[pos] / self.dt
            near = np.abs(idx - np.round(idx)) < 1e-9
            vals = np.empty(idx.shape)
            node = np.clip(np.round(idx).astype(int), 0, self.x.size - 1)
            vals[near] = self.x[node[near]]
            if (~near).any():
                fidx = idx[~near]
                base = np.clip(np.floor(fidx).astype(int) - 1, 0, self.x.size - 4)
                xi = fidx - base
                w0, w1, w2, w3 = _lagrange_cubic(xi)
                vals[~near] = (w0 * self.x[base] + w1 * self.x[base + 1]
                               + w2 * self.x[base + 2] + w3 * self.x[base + 3])
            out[pos] = vals
        return float(out[0]) if scalar else out


def fundamental_solution(op: DelayOperator, t_max: float,
                         dt: float) -> FundamentalSolution:
    """Integrate the unit-jump problem with RK4 on a delay-aligned grid.

    ``dt`` must divide every delay (tolerance 1e-9).  Delayed stage values
    come from the stored grid: endpoint stages hit nodes exactly, midpoint
    stages use cubic interpolation.  At the initial jump, stages at the left
    end of a step read the right value and stages at the right end read the
    left value, which reproduces the piecewise-polynomial solution exactly on
    smooth pieces.
    """
    lags = []
    for d in op.delays:
        m = d / dt
        if abs(m - round(m)) > GRID_ALIGN_TOL / dt:
            raise SpectralError(f"dt={dt} does not divide delay {d}")
        lags.append(int(round(m)))
    n_steps = int(round(t_max / dt))
    x = np.empty(n_steps + 1)
    x[0] = 1.0
    c0 = op.instantaneous
    weights = op.weights
    # midpoint sits at offset 1.5 from the stencil base (= floor - 1)
    half = np.array(_lagrange_cubic(np.array(1.5)))

    def delayed(k_float, known, left_at_zero):
        """x at grid coordinate k_float given nodes 0..known are computed."""
        if k_float < -1e-12:
            return 0.0
        if abs(k_float) <= 1e-12:
            return 0.0 if left_at_zero else 1.0
        k_round = round(k_float)
        if abs(k_float - k_round) <= 1e-9:
            return x[int(k_round)]
        if known < 3:
            lo = int(np.floor(k_float))
            frac = k_float - lo
            return float((1.0 - frac) * x[lo] + frac * x[lo + 1])
        base = int(np.floor(k_float)) - 1
        base = min(max(base, 0), known - 3)
        xi = k_float - base
        if base == int(np.floor(k_float)) - 1 and abs(xi - 1.5) < 1e-12:
            w = half
        else:
            w = np.array(_lagrange_cubic(np.array(xi)))
        return float(w @ x[base:base + 4])

    for k in range(n_steps):
        xk = x[k]
        d1 = d2 = d3 = 0.0
        for m, c in zip(lags, weights):
            d1 += c * delayed(k - m, k, left_at_zero=False)
            d2 += c * delayed(k - m + 0.5, k, left_at_zero=False)
            d3 += c * delayed(k - m + 1.0, k, left_at_zero=True)
        k1 = c0 * xk + d1
        k2 = c0 * (xk + 0.5 * dt * k1) + d2
        k3 = c0 * (xk + 0.5 * dt * k2) + d2
        k4 = c0 * (xk + dt * k3) + d3
        x[k + 1] = xk + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    t = np.arange(n_steps + 1) * dt
    return FundamentalSolution(op=op, dt=dt, t=t, x=x)


@dataclass
class StableSegmentTable:
    """Stable component w_s of the propagated unit jump.

    w_s(theta) = x(s + theta) - Phi(theta) . (exp(s*B) psi0), the image of
    the jump under the semigroup after removing its critical projection.  Rows
    are segments on the uniform theta grid; ``sup_norms[i]`` is the max-norm
    of row i.  ``fundsol`` is kept so tap values at arbitrary (s, theta) can
    be evaluated without re-gridding.
    """

    omega_c: float
    psi0: np.ndarray
    s_grid: np.ndarray
    theta_grid: np.ndarray
    values: np.ndarray
    sup_norms: np.ndarray
    fundsol: FundamentalSolution

    def rotated_psi0(self, s):
        """exp(s*B) psi0 for scalar or array s; shape s.shape + (2,)."""
        rot = planar_rotation(self.omega_c, s)
        return rot @ self.psi0

    def tap_values(self, s, theta: float, left_at_zero: bool = False):
        """w_s(theta) for an array of ages s at a fixed lag theta.

        ``left_at_zero`` selects the left limit 0 of the unit jump when
        s + theta = 0 exactly (needed on the left side of a quadrature
        split); the default is the right value 1.
        """
        s = np.asarray(s, dtype=float)
        xvals = self.fundsol.eval(s + theta, left_at_zero=left_at_zero)
        trig = np.array([np.cos(self.omega_c * theta),
                         np.sin(self.omega_c * theta)])
        return xvals - self.rotated_psi0(s) @ trig

    def segment_callable(self, s: float):
        """w_s as a theta-callable, usable as an initial segment."""
        coeff = self.rotated_psi0(float(s))

        def seg(theta):
            theta = np.asarray(theta, dtype=float)
            return (self.fundsol.eval(s + theta)
                    - (np.cos(self.omega_c * theta) * coeff[0]
                       + np.sin(self.omega_c * theta) * coeff[1]))

        return seg


def stable_segment_table(op: DelayOperator, omega_c: float,
                         psi0: np.ndarray, s_max: float, ds: float,
                         dt: float) -> StableSegmentTable:
    """Tabulate w_s on s in [0, s_max] (step ds) and theta in [-r, 0] (step dt).

    ``ds`` must be a multiple of ``dt`` so every (s + theta) lands on the
    fundamental-solution grid exactly.
    """
    if s_max < op.r:
        raise SpectralError(
            f"s_max={s_max} is shorter than the delay window r={op.r}; "
            "the table cannot support tail estimates")
    stride = ds / dt
    if abs(stride - round(stride)) > 1e-6:
        raise SpectralError(f"ds={ds} must be a multiple of dt={dt}")
    stride = int(round(stride))
    fund = fundamental_solution(op, t_max=s_max, dt=dt)
    n_theta = int(round(op.r / dt))
    if abs(n_theta * dt - op.r) > GRID_ALIGN_TOL:
        raise SpectralError(f"dt={dt} does not divide the horizon r={op.r}")
    theta_grid = (np.arange(n_theta + 1) - n_theta) * dt
    s_grid = np.arange(int(round(s_max / ds)) + 1) * ds
    psi0 = np.asarray(psi0, dtype=float)

    trig = np.stack([np.cos(omega_c * theta_grid),
                     np.sin(omega_c * theta_grid)], axis=-1)
    values = np.empty((s_grid.size, theta_grid.size))
    for i, s in enumerate(s_grid):
        base = i * stride
        idx = base + np.arange(-n_theta, 1)
        xrow = np.where(idx < 0, 0.0, fund.x[np.clip(idx, 0, fund.x.size - 1)])
        coeff = planar_rotation(omega_c, s) @ psi0
        values[i] = xrow - trig @ coeff
    sup_norms = np.max(np.abs(values), axis=1)
    return StableSegmentTable(omega_c=omega_c, psi0=psi0, s_grid=s_grid,
                              theta_grid=theta_grid, values=values,
                              sup_norms=sup_norms, fundsol=fund)


@dataclass(frozen=True)
class SpectralGap:
    """Decay envelope ||w_s||_inf <= K * exp(-kappa*s) for s >= r.

    ``kappa`` is the distance of the second root pair from the axis;
    ``fit_rate`` and ``fit_r2`` come from a log-linear regression of the
    tabulated sup norms, and ``rate_consistency`` = |fit_rate - kappa|/kappa.
    """

    kappa: float
    K: float
    second_root: complex
    fit_rate: float
    fit_intercept: float
    fit_r2: float
    rate_consistency: float


def estimate_gap(op: DelayOperator, omega_c: float,
                 table: StableSegmentTable, delta: float = 0.05,
                 re_min: float = -12.0, im_max: float = 40.0,
                 fit_window: tuple = (2.0, 10.0)) -> SpectralGap:
    """Estimate (K, kappa) from the root scan and the stable-segment table."""
    report = verify_spectrum(op, omega_c, delta=delta, re_min=re_min,
                             im_max=im_max)
    noncritical = report.roots[np.abs(report.roots - 1j * omega_c) > 1e-4]
    if noncritical.size == 0:
        raise SpectralError("no non-critical roots found; enlarge the box")
    second = complex(noncritical[np.argmax(noncritical.real)])
    kappa = -float(second.real)
    if kappa <= 0:
        raise SpectralError(f"second root {second} is not stable")

    lo, hi = fit_window
    mask = (table.s_grid >= lo) & (table.s_grid <= hi) & (table.sup_norms > 0)
    if mask.sum() < 8:
        raise SpectralError("stable-segment table too short for a decay fit")
    s = table.s_grid[mask]
    logn = np.log(table.sup_norms[mask])
    slope, intercept = np.polyfit(s, logn, 1)
    pred = slope * s + intercept
    ss_res = float(np.sum((logn - pred) ** 2))
    ss_tot = float(np.sum((logn - logn.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    fit_rate = -float(slope)
    consistency = abs(fit_rate - kappa) / kappa

    tail = table.s_grid >= op.r
    K = float(np.max(table.sup_norms[tail] * np.exp(kappa * table.s_grid[tail])))
    return SpectralGap(kappa=kappa, K=K, second_root=second,
                       fit_rate=fit_rate, fit_intercept=float(intercept),
                       fit_r2=float(r2), rate_consistency=float(consistency))


# ---------------------------------------------------------------------------
# aggregate


@dataclass
class SpectralData:
    """Everything downstream modules need about the critical pair."""

    op: DelayOperator
    omega_c: float
    residual: float
    basis: AdjointBasis
    gap: SpectralGap | None = None
    table: StableSegmentTable | None = None
    spectrum: SpectrumReport | None = None

    @property
    def psi0(self) -> np.ndarray:
        return self.basis.psi0

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.omega_c


def analyze(op: DelayOperator, omega_max: float = 50.0,
            verify: bool = True, with_table: bool = True,
            s_max: float = 12.0, ds: float = 0.05,
            dt: float = 1e-3) -> SpectralData:
    """Run the full reduction: frequency, certification, basis, table, gap."""
    pair = find_critical_frequency(op, omega_max=omega_max)
    basis = adjoint_basis(op, pair.omega_c)
    data = SpectralData(op=op, omega_c=pair.omega_c, residual=pair.residual,
                        basis=basis)
    if verify:
        report = verify_spectrum(op, pair.omega_c)
        if not report.passed:
            raise SpectralError(f"spectrum certification failed: {report.message}")
        data.spectrum = report
    if with_table:
        table = stable_segment_table(op, pair.omega_c, basis.psi0,
                                     s_max=s_max, ds=ds, dt=dt)
        data.table = table
        data.gap = estimate_gap(op, pair.omega_c, table)
    return data
