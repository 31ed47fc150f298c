"""Pathwise integration of the noisy delay equation.

The scalar equation

    dx(t) = [L0(x_t) + eps*Gq(x_t) + eps^2*G(x_t) + eps*sigma(xi_t)*F(x_t)] dt

is integrated by classical RK4 on a uniform grid whose step divides every
delay of L0, with cubic interpolation of the stored history at off-grid
stage queries (one-sided near the window edges).  The Markov read-out
sigma(xi_t) is piecewise constant; any step containing a jump is re-done on
the sub-steps split at the jump times, so every RK4 stage sees a smooth
right-hand side.  Critical coordinates z(t) = <x_t, Psi> are extracted by
quadrature against the adjoint pair at record strides, and the rotating-frame
coordinates zc(t) = exp(-B*t) z(t) remove the fast oscillation, so that
zc(tau/eps^2) tracks the slow diffusion on rescaled time tau.

Ensembles run in lockstep over fixed-size path chunks; every path draws its
noise from its own counter-based random stream keyed by (domain, eps index,
path index), which makes results bitwise reproducible for a fixed master
seed regardless of chunk scheduling or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .functional_expr import ParsedFunctional
from .noise import MarkovNoiseModel
from .spectral import (
    GRID_ALIGN_TOL,
    SpectralData,
    _lagrange_cubic,
    planar_rotation,
    projection_weights,
)

__all__ = [
    "SimError",
    "SimConfig",
    "TrajectoryRecord",
    "EnsembleResult",
    "path_stream",
    "simulate",
    "ensemble",
    "extract_rotating",
]

# random-stream domains mixed into the spawn key
STREAM_DDE_NOISE = 1
STREAM_LIMIT_SDE = 2


class SimError(ValueError):
    """Raised for grid misalignment or invalid stepping parameters."""


def path_stream(master_seed: int, domain: int, *indices: int) -> np.random.Generator:
    """Counter-based per-path stream: Philox keyed by (seed; domain, indices).

    Identical for a given key no matter how paths are batched or scheduled.
    """
    seq = np.random.SeedSequence(entropy=master_seed,
                                 spawn_key=(domain, *indices))
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class SimConfig:
    """Stepping parameters.

    ``t_final`` is the rescaled horizon: the path runs to tau_end ~
    t_final/eps^2 in intrinsic time (rounded to a whole number of steps).
    ``record_stride`` counts nominal steps between trajectory records; zero
    records the terminal state only.
    """

    eps: float
    dt: float
    t_final: float
    record_stride: int = 0
    escape_norm: float = 1e6
    record_ynorm: bool = False

    def n_steps(self) -> int:
        return max(1, int(round(self.t_final / (self.eps**2 * self.dt))))


@dataclass
class TrajectoryRecord:
    """Recorded critical coordinates of one path.

    ``times`` are rescaled (t = eps^2 * tau); ``z`` are the critical
    coordinates at the unscaled times ``tau`` and ``zc`` the rotating-frame
    values exp(-B*tau) z.  The terminal history segment is kept on its
    uniform theta grid.
    """

    eps: float
    omega_c: float
    tau: np.ndarray
    times: np.ndarray
    z: np.ndarray
    zc: np.ndarray
    ynorm: np.ndarray | None
    escaped: bool
    escape_time: float | None
    theta_grid: np.ndarray
    terminal_segment: np.ndarray
    terminal_z: np.ndarray
    terminal_zc: np.ndarray


@dataclass
class EnsembleResult:
    """Terminal rotating-frame samples of an ensemble."""

    eps: float
    tau_end: float
    t_end: float
    terminal_z: np.ndarray
    terminal_zc: np.ndarray
    escaped: np.ndarray
    n_escaped: int


def extract_rotating(tau, z, omega_c: float):
    """Rotating-frame coordinates exp(-B*tau) z(tau), vectorized over rows."""
    tau = np.asarray(tau, dtype=float)
    z = np.asarray(z, dtype=float)
    rot = planar_rotation(omega_c, -tau)
    return np.einsum("...ij,...j->...i", rot, z)


def _validate(sys: SpectralData, functionals, cfg: SimConfig):
    op = sys.op
    h = cfg.dt
    if not (0 < cfg.eps <= 1.0):
        raise SimError(f"eps={cfg.eps} must lie in (0, 1]")
    if cfg.t_final <= 0:
        raise SimError("t_final must be positive")
    if h <= 0 or h > op.r / 50 + GRID_ALIGN_TOL:
        raise SimError(f"dt={h} must be positive and at most r/50={op.r / 50}")
    n_r = op.r / h
    if abs(n_r - round(n_r)) * h > GRID_ALIGN_TOL:
        raise SimError(f"dt={h} does not divide the horizon r={op.r}")
    for d in op.delays:
        m = d / h
        if abs(m - round(m)) * h > GRID_ALIGN_TOL:
            raise SimError(f"dt={h} does not divide delay {d}")
    for f in functionals:
        if f is None:
            continue
        lags = -f.taps[f.taps < -GRID_ALIGN_TOL]
        if lags.size and lags.min() < h - GRID_ALIGN_TOL:
            raise SimError(
                f"tap lag {lags.min()} is shorter than dt={h}; explicit "
                "stages would need unknown future values")
    if cfg.record_stride < 0:
        raise SimError("record_stride must be >= 0")


class _TapPlan:
    """Gather recipe for one lag at the three RK4 stage offsets."""

    __slots__ = ("kind", "data")

    def __init__(self, q, window):
        # q = stage_offset - lag/h, in node units relative to the head
        if abs(q - round(q)) < 1e-9:
            self.kind = "node"
            self.data = int(round(q))
        else:
            base = int(np.floor(q)) - 1
            base = min(max(base, -(window - 1)), -3)
            xi = q - base
            self.kind = "stencil"
            self.data = (np.arange(base, base + 4),
                         np.array(_lagrange_cubic(np.float64(xi))))


class _Engine:
    """Lockstep RK4 over a chunk of paths sharing the time grid."""

    def __init__(self, sys: SpectralData, F, G, Gq, cfg: SimConfig):
        op = sys.op
        self.sys = sys
        self.cfg = cfg
        self.h = cfg.dt
        self.eps = cfg.eps
        self.n_r = int(round(op.r / self.h))
        self.window = self.n_r + 3  # two older pad nodes for edge stencils
        self.theta_grid = (np.arange(self.n_r + 1) - self.n_r) * self.h
        self.proj = projection_weights(op, sys.basis, self.theta_grid)
        self.phi_win = sys.basis.phi_values(self.theta_grid)
        self.functionals = {"F": F, "G": G, "Gq": Gq}

        lags = {float(d) for d in op.delays}
        for f in (F, G, Gq):
            if f is not None:
                lags.update(-t for t in f.taps if t < -GRID_ALIGN_TOL)
        self.lags = sorted(lags)
        self.plans = {}
        for lag in self.lags:
            m = lag / self.h
            self.plans[lag] = [
                _TapPlan(c - m, self.window) for c in (0.0, 0.5, 1.0)
            ]

    # -- ring-buffer helpers ------------------------------------------------

    def _slot(self, node: int) -> int:
        return node % self.window

    def _gather(self, buf, head: int, lag: float, stage: int):
        plan = self.plans[lag][stage]
        if plan.kind == "node":
            return buf[:, self._slot(head + plan.data)]
        offs, w = plan.data
        slots = [(head + o) % self.window for o in offs]
        return (w[0] * buf[:, slots[0]] + w[1] * buf[:, slots[1]]
                + w[2] * buf[:, slots[2]] + w[3] * buf[:, slots[3]])

    def _interp_row(self, row, head: int, q: float):
        """Cubic interpolation at node coordinate q <= head on one path."""
        if q < head - (self.window - 1) - 1e-9:
            raise SimError("history query left the stored window")
        if abs(q - round(q)) < 1e-9:
            return row[self._slot(int(round(q)))]
        base = int(np.floor(q)) - 1
        base = min(max(base, head - self.window + 1), head - 3)
        xi = q - base
        w = _lagrange_cubic(np.float64(xi))
        return sum(w[i] * row[self._slot(base + i)] for i in range(4))

    # -- right-hand side ----------------------------------------------------

    def _rhs(self, stage_x, gathered, stage: int, sigma_eps):
        """Drift at one stage; ``gathered[lag]`` are the history tap values.

        ``sigma_eps`` is eps*sigma(xi) per path (0 when noiseless).
        """
        op = self.sys.op
        out = op.instantaneous * stage_x
        for d, c in zip(op.delays, op.weights):
            out = out + c * gathered[float(d)][stage]
        F, G, Gq = (self.functionals["F"], self.functionals["G"],
                    self.functionals["Gq"])
        if Gq is not None and not Gq.is_zero():
            out = out + self.eps * self._eval(Gq, stage_x, gathered, stage)
        if G is not None and not G.is_zero():
            out = out + self.eps**2 * self._eval(G, stage_x, gathered, stage)
        if F is not None and sigma_eps is not None and not F.is_zero():
            out = out + sigma_eps * self._eval(F, stage_x, gathered, stage)
        return out

    def _eval(self, f: ParsedFunctional, stage_x, gathered, stage: int):
        values = [
            stage_x if theta > -GRID_ALIGN_TOL else gathered[-theta][stage]
            for theta in f.taps
        ]
        return f.eval_taps(values)

    # -- main loop ----------------------------------------------------------

    def run(self, n_paths: int, initial, noise_paths, n_steps: int,
            record_nodes):
        """Integrate a chunk; returns per-record z plus terminal data."""
        h, eps, W = self.h, self.eps, self.window
        n_r = self.n_r

        # initial fill: nodes -(n_r+2)..0; two pad nodes extrapolated
        buf = np.empty((n_paths, W))
        init_vals = np.asarray(initial(self.theta_grid), dtype=float)
        init_vals = np.broadcast_to(init_vals, (n_paths, n_r + 1))
        for j in range(n_r + 1):
            buf[:, self._slot(j - n_r)] = init_vals[:, j]
        for pad, xi in ((-n_r - 1, -1.0), (-n_r - 2, -2.0)):
            w = _lagrange_cubic(np.float64(xi))
            vals = sum(w[i] * init_vals[:, i] for i in range(4))
            buf[:, self._slot(pad)] = vals

        # per-path noise state
        if noise_paths is not None:
            jt = [p.jump_times for p in noise_paths]
            sv = [np.concatenate([p.sigma_values, p.sigma_values[-1:]])
                  for p in noise_paths]
            ptr = np.zeros(n_paths, dtype=np.int64)
            sigma_eps = np.array([eps * s[0] for s in sv])
            next_jump = np.array([t[0] if t.size else np.inf for t in jt])
        else:
            jt = sv = None
            sigma_eps = None
            next_jump = None

        active = np.ones(n_paths, dtype=bool)
        escape_tau = np.full(n_paths, np.nan)

        records = {}

        def record(node):
            idx = (node + np.arange(-n_r, 1)) % W
            # fancy indexing may hand back a Fortran-ordered copy whose
            # layout depends on the chunk height; einsum then reduces in a
            # different memory order.  Pin the layout so records are bitwise
            # chunk-invariant.
            window = np.ascontiguousarray(buf[:, idx])
            z = np.einsum("pw,jw->pj", window, self.proj, optimize=False)
            ynorm = None
            if self.cfg.record_ynorm:
                recon = (z[:, :1] * self.phi_win[None, :, 0]
                         + z[:, 1:] * self.phi_win[None, :, 1])
                ynorm = np.max(np.abs(window - recon), axis=1)
            records[node] = (z, ynorm, window if node == n_steps else None)

        record_set = set(int(r) for r in record_nodes)
        if 0 in record_set:
            record(0)

        gathered = {}
        for k in range(n_steps):
            t = k * h
            head = k
            # consume jumps landing exactly on the grid (right-continuous)
            if noise_paths is not None:
                due = active & (next_jump <= t + 1e-12 * h)
                while due.any():
                    for p in np.nonzero(due)[0]:
                        ptr[p] += 1
                        next_jump[p] = (jt[p][ptr[p]]
                                        if ptr[p] < jt[p].size else np.inf)
                        sigma_eps[p] = eps * sv[p][ptr[p]]
                    due = active & (next_jump <= t + 1e-12 * h)

            for lag in self.lags:
                gathered[lag] = [self._gather(buf, head, lag, s)
                                 for s in range(3)]
            x = buf[:, self._slot(head)]
            k1 = self._rhs(x, gathered, 0, sigma_eps)
            k2 = self._rhs(x + 0.5 * h * k1, gathered, 1, sigma_eps)
            k3 = self._rhs(x + 0.5 * h * k2, gathered, 1, sigma_eps)
            k4 = self._rhs(x + h * k3, gathered, 2, sigma_eps)
            x_new = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

            if noise_paths is not None:
                split = active & (next_jump < (k + 1) * h)
                for p in np.nonzero(split)[0]:
                    x_new[p] = self._redo_with_jumps(
                        buf[p], head, k, x[p], jt[p], sv[p], ptr[p])
                    while ptr[p] < jt[p].size and jt[p][ptr[p]] < (k + 1) * h:
                        ptr[p] += 1
                    next_jump[p] = (jt[p][ptr[p]]
                                    if ptr[p] < jt[p].size else np.inf)
                    sigma_eps[p] = eps * sv[p][ptr[p]]

            with np.errstate(invalid="ignore"):
                blown = active & (~np.isfinite(x_new)
                                  | (np.abs(x_new) > self.cfg.escape_norm))
            if blown.any():
                escape_tau[blown] = (k + 1) * h
                active &= ~blown
            # escaped paths freeze at their last finite value
            x_new = np.where(active, x_new, x)

            buf[:, self._slot(head + 1)] = x_new
            if (k + 1) in record_set:
                record(k + 1)

        return records, active, escape_tau

    def _redo_with_jumps(self, row, head, k, x0, jumps, sigmas, ptr0):
        """Re-integrate step k for one path, splitting at its jump times."""
        h, eps = self.h, self.eps
        t0, t1 = k * h, (k + 1) * h
        cuts = [t0]
        ptr = ptr0
        while ptr < jumps.size and jumps[ptr] < t1:
            if jumps[ptr] > cuts[-1]:
                cuts.append(float(jumps[ptr]))
            ptr += 1
        cuts.append(t1)
        x = float(x0)
        seg_ptr = ptr0
        op = self.sys.op

        def rhs(t_s, xs, sig_eps):
            out = op.instantaneous * xs
            for d, c in zip(op.delays, op.weights):
                out += c * self._interp_row(row, head, (t_s - d) / h)
            for name, factor in (("Gq", eps), ("G", eps**2)):
                f = self.functionals[name]
                if f is not None and not f.is_zero():
                    vals = [xs if th > -GRID_ALIGN_TOL else
                            self._interp_row(row, head, (t_s + th) / h)
                            for th in f.taps]
                    out += factor * f.eval_taps(vals)
            F = self.functionals["F"]
            if F is not None and not F.is_zero():
                vals = [xs if th > -GRID_ALIGN_TOL else
                        self._interp_row(row, head, (t_s + th) / h)
                        for th in F.taps]
                out += sig_eps * F.eval_taps(vals)
            return out

        for a, b in zip(cuts[:-1], cuts[1:]):
            sig_eps = eps * sigmas[seg_ptr]
            hs = b - a
            k1 = rhs(a, x, sig_eps)
            k2 = rhs(a + 0.5 * hs, x + 0.5 * hs * k1, sig_eps)
            k3 = rhs(a + 0.5 * hs, x + 0.5 * hs * k2, sig_eps)
            k4 = rhs(b, x + hs * k3, sig_eps)
            x = x + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            seg_ptr += 1
        return x


def _run_chunk(sys, F, G, Gq, noise, initial, cfg, n_chunk, seeds,
               record_nodes):
    engine = _Engine(sys, F, G, Gq, cfg)
    n_steps = cfg.n_steps()
    noise_paths = None
    if noise is not None:
        tau_end = n_steps * cfg.dt
        noise_paths = [
            noise.sample_path(tau_end + cfg.dt, path_stream(*key))
            for key in seeds
        ]
    return engine.run(n_chunk, initial, noise_paths, n_steps, record_nodes)


def simulate(sys: SpectralData, F, G, Gq, noise: MarkovNoiseModel | None,
             initial, cfg: SimConfig, master_seed: int = 0,
             path_index: int = 0, eps_index: int = 0) -> TrajectoryRecord:
    """Integrate one path and record its critical coordinates.

    ``initial`` is a segment callable on [-r, 0] (vectorized over theta).
    The noise path is drawn from the stream keyed by
    (master_seed; DDE domain, eps_index, path_index).
    """
    _validate(sys, (F, G, Gq), cfg)
    n_steps = cfg.n_steps()
    stride = cfg.record_stride if cfg.record_stride > 0 else n_steps
    record_nodes = sorted(set(range(0, n_steps + 1, stride)) | {n_steps})
    seeds = [(master_seed, STREAM_DDE_NOISE, eps_index, path_index)]
    records, active, escape_tau = _run_chunk(
        sys, F, G, Gq, noise, initial, cfg, 1, seeds, record_nodes)

    nodes = np.array(sorted(records.keys()), dtype=float)
    tau = nodes * cfg.dt
    z = np.vstack([records[int(n)][0][0] for n in nodes])
    zc = extract_rotating(tau, z, sys.omega_c)
    ynorm = None
    if cfg.record_ynorm:
        ynorm = np.array([records[int(n)][1][0] for n in nodes])
    terminal_window = records[n_steps][2][0]
    escaped = not bool(active[0])
    return TrajectoryRecord(
        eps=cfg.eps, omega_c=sys.omega_c, tau=tau, times=cfg.eps**2 * tau,
        z=z, zc=zc, ynorm=ynorm, escaped=escaped,
        escape_time=float(cfg.eps**2 * escape_tau[0]) if escaped else None,
        theta_grid=(np.arange(-int(round(sys.op.r / cfg.dt)), 1) * cfg.dt),
        terminal_segment=terminal_window,
        terminal_z=z[-1], terminal_zc=zc[-1])


def ensemble(sys: SpectralData, F, G, Gq, noise: MarkovNoiseModel | None,
             initial, cfg: SimConfig, n_paths: int, master_seed: int,
             eps_index: int = 0, chunk_size: int = 512,
             n_threads: int = 1) -> EnsembleResult:
    """Terminal rotating-frame ensemble of the delay equation.

    Paths are grouped into fixed-size chunks integrated in lockstep; chunking
    is independent of ``n_threads``, and each path owns its noise stream, so
    the result is bitwise identical for any thread count.
    """
    _validate(sys, (F, G, Gq), cfg)
    n_steps = cfg.n_steps()
    tau_end = n_steps * cfg.dt
    chunks = []
    for start in range(0, n_paths, chunk_size):
        stop = min(start + chunk_size, n_paths)
        seeds = [(master_seed, STREAM_DDE_NOISE, eps_index, p)
                 for p in range(start, stop)]
        chunks.append((start, stop, seeds))

    def work(chunk):
        start, stop, seeds = chunk
        records, active, escape_tau = _run_chunk(
            sys, F, G, Gq, noise, initial, cfg, stop - start, seeds,
            [n_steps])
        z_term = records[n_steps][0]
        return start, stop, z_term, active, escape_tau

    results = [None] * len(chunks)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            for i, res in enumerate(pool.map(work, chunks)):
                results[i] = res
    else:
        results = [work(c) for c in chunks]

    terminal_z = np.empty((n_paths, 2))
    escaped = np.zeros(n_paths, dtype=bool)
    for start, stop, z_term, active, escape_tau in results:
        terminal_z[start:stop] = z_term
        escaped[start:stop] = ~active
    rot = planar_rotation(sys.omega_c, -tau_end)
    terminal_zc = np.column_stack([
        rot[0, 0] * terminal_z[:, 0] + rot[0, 1] * terminal_z[:, 1],
        rot[1, 0] * terminal_z[:, 0] + rot[1, 1] * terminal_z[:, 1],
    ])
    terminal_z = np.where(escaped[:, None], np.nan, terminal_z)
    terminal_zc = np.where(escaped[:, None], np.nan, terminal_zc)
    return EnsembleResult(eps=cfg.eps, tau_end=tau_end,
                          t_end=cfg.eps**2 * tau_end,
                          terminal_z=terminal_z, terminal_zc=terminal_zc,
                          escaped=escaped, n_escaped=int(escaped.sum()))
