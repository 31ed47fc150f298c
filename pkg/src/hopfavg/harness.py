"""Pipeline stages and validation statistics.

Each stage takes a validated config and an output directory, writes its
artifacts (JSON reports, CSV tables, a manifest), and returns the report
dict.  The validation stage compares rescaled terminal samples of the noisy
delay system against the limit diffusion: Kolmogorov-Smirnov distances of
the energy observable must shrink as epsilon does, first and second moments
at the smallest epsilon must agree within standard-error bands, and a
deliberately broken control (doubled drift) must be rejected.

Artifacts are written with round-tripping float formatting and sorted JSON
keys; per-stage wall times live only in the manifest's ``timings_seconds``
block so everything else is bitwise reproducible for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__ as _pkg_version
from .averaged import AveragedModel, CoefficientGrid, QuadratureConfig
from .config import AssumptionError, ConfigError, ExperimentConfig
from .dde_sim import SimConfig, ensemble, simulate
from .functional_expr import parse
from .noise import MarkovNoiseModel, NoiseError
from .sde_sim import DiffusionSpec, sde_ensemble
from .spectral import DelayOperator, SpectralError, analyze

__all__ = [
    "ks_two_sample",
    "moment_summary",
    "moment_test",
    "Pipeline",
    "run_spectrum",
    "run_coeffs",
    "run_dde_ensemble",
    "run_limit_ensemble",
    "run_validation",
]


# -- statistics ---------------------------------------------------------------

def ks_two_sample(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pts = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pts, side="right") / a.size
    cdf_b = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def moment_summary(samples) -> dict:
    """Means, covariances, and their standard errors for (n, 2) samples."""
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x).all(axis=1)]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two finite sample rows")
    mean = x.mean(axis=0)
    c = x - mean
    out = {"n": n, "mean": mean.tolist(),
           "se_mean": (x.std(axis=0, ddof=1) / np.sqrt(n)).tolist()}
    cov, se_cov = {}, {}
    for i in range(2):
        for j in range(i, 2):
            prod = c[:, i] * c[:, j]
            cov[f"{i + 1}{j + 1}"] = float(prod.mean())
            se_cov[f"{i + 1}{j + 1}"] = float(prod.std(ddof=1) / np.sqrt(n))
    out["cov"] = cov
    out["se_cov"] = se_cov
    return out


def moment_test(sample_a, sample_b, n_se: float = 3.0,
                abs_tol: float = 0.1) -> dict:
    """Componentwise agreement of first and second moments.

    Each deviation must stay within max(n_se * combined SE, abs_tol).
    """
    sa, sb = moment_summary(sample_a), moment_summary(sample_b)
    rows = []
    passed = True
    for i in range(2):
        dev = abs(sa["mean"][i] - sb["mean"][i])
        se = float(np.hypot(sa["se_mean"][i], sb["se_mean"][i]))
        tol = max(n_se * se, abs_tol)
        ok = dev <= tol
        passed &= ok
        rows.append({"moment": f"mean{i + 1}", "deviation": dev,
                     "combined_se": se, "tolerance": tol, "passed": ok})
    for key in ("11", "12", "22"):
        dev = abs(sa["cov"][key] - sb["cov"][key])
        se = float(np.hypot(sa["se_cov"][key], sb["se_cov"][key]))
        tol = max(n_se * se, abs_tol)
        ok = dev <= tol
        passed &= ok
        rows.append({"moment": f"cov{key}", "deviation": dev,
                     "combined_se": se, "tolerance": tol, "passed": ok})
    return {"passed": bool(passed), "components": rows,
            "summary_a": sa, "summary_b": sb}


def energy(samples) -> np.ndarray:
    """H = |z|^2 / 2 over finite rows of an (n, 2) terminal sample."""
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x).all(axis=1)]
    return 0.5 * (x[:, 0] ** 2 + x[:, 1] ** 2)


# -- artifact helpers ---------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, columns):
    columns = [np.asarray(c) for c in columns]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_digest(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir: Path, stage: str, cfg: ExperimentConfig,
                   seed: int, n_threads: int, artifacts, timings):
    payload = {
        "stage": stage,
        "config_sha256": config_digest(cfg.raw),
        "seed": seed,
        "threads": n_threads,
        "artifacts": sorted(artifacts),
        "versions": {
            "package": _pkg_version,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "timings_seconds": {k: round(v, 3) for k, v in timings.items()},
    }
    try:
        import scipy
        payload["versions"]["scipy"] = scipy.__version__
    except ImportError:
        pass
    write_json(out_dir / "manifest.json", payload)


class _Timer:
    def __init__(self):
        self.laps = {}
        self._t0 = time.perf_counter()

    def lap(self, name):
        t1 = time.perf_counter()
        self.laps[name] = self.laps.get(name, 0.0) + (t1 - self._t0)
        self._t0 = t1


# -- pipeline -----------------------------------------------------------------

class Pipeline:
    """Lazily constructed pipeline objects shared by the stages."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._spectral = None
        self._noise = None
        self._functionals = None
        self._model = None
        self._grid = None

    @property
    def spectral(self):
        if self._spectral is None:
            s = self.cfg.system
            op = DelayOperator(r=s.r, delays=tuple(s.delays),
                               weights=tuple(s.weights),
                               instantaneous=s.instantaneous)
            dt = self.cfg.sim.dt if self.cfg.sim is not None else 1e-3
            try:
                self._spectral = analyze(op, dt=dt)
            except SpectralError as exc:
                raise AssumptionError(str(exc)) from exc
        return self._spectral

    @property
    def noise(self):
        if self._noise is None and self.cfg.noise is not None:
            n = self.cfg.noise
            try:
                self._noise = MarkovNoiseModel(np.asarray(n.Q, dtype=float),
                                               np.asarray(n.sigma, dtype=float),
                                               auto_center=n.auto_center)
            except NoiseError as exc:
                raise AssumptionError(str(exc)) from exc
        return self._noise

    @property
    def functionals(self):
        if self._functionals is None:
            p = self.cfg.perturbations
            r = self.cfg.system.r
            self._functionals = {
                "F": parse(p.F, max_delay=r),
                "G": parse(p.G, max_delay=r),
                "Gq": parse(p.Gq, max_delay=r),
            }
        return self._functionals

    @property
    def model(self) -> AveragedModel:
        if self._model is None:
            q = self.cfg.quadrature
            sim = self.cfg.sim
            if None in (q.n_tau, q.s_max, q.ds):
                auto = QuadratureConfig.auto(
                    self.spectral, self.noise, tail_tol=q.tail_tol,
                    align_dt=sim.dt if sim is not None else None)
                q = QuadratureConfig(
                    n_tau=q.n_tau if q.n_tau is not None else auto.n_tau,
                    s_max=q.s_max if q.s_max is not None else auto.s_max,
                    ds=q.ds if q.ds is not None else auto.ds,
                    tail_tol=q.tail_tol)
            sd = self.spectral
            if sd.table is not None and sd.table.fundsol.t[-1] < q.s_max:
                # horizon too short for the requested tail: rebuild
                dt = sim.dt if sim is not None else 1e-3
                try:
                    self._spectral = analyze(sd.op, dt=dt, s_max=q.s_max)
                except SpectralError as exc:
                    raise AssumptionError(str(exc)) from exc
            f = self.functionals
            self._model = AveragedModel(self.spectral, self.noise, f["F"],
                                        f["G"], f["Gq"], quad=q)
            ok, residual = self._model.centering_check()
            if not ok:
                raise AssumptionError(
                    f"fast perturbation is not centered: period-average "
                    f"residual {residual:.3e} exceeds 1e-08")
        return self._model

    @property
    def grid(self) -> CoefficientGrid:
        if self._grid is None:
            lim = self.cfg.limit
            self._grid = CoefficientGrid(self.model,
                                         spacing=lim.cache_spacing,
                                         extent=lim.cache_extent)
        return self._grid

    def initial_history(self):
        """Constant-amplitude history on the critical plane: Phi(theta) z0."""
        sim = self.cfg.require_sim()
        z0 = np.asarray(sim.z0, dtype=float)
        grid = np.linspace(-self.cfg.system.r, 0.0,
                           int(round(self.cfg.system.r / sim.dt)) + 1)
        return (np.cos(self.spectral.omega_c * grid) * z0[0]
                + np.sin(self.spectral.omega_c * grid) * z0[1])


def _prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved_seed(cfg: ExperimentConfig, seed_override) -> int:
    if seed_override is not None:
        return int(seed_override)
    return cfg.sim.seed if cfg.sim is not None else 0


# -- stages -------------------------------------------------------------------

def run_spectrum(cfg: ExperimentConfig, out_dir, seed=None,
                 n_threads: int = 1) -> dict:
    out = _prepare_out(out_dir)
    timer = _Timer()
    pipe = Pipeline(cfg)
    sd = pipe.spectral
    timer.lap("spectral")
    gap = sd.gap
    report = {
        "omega_c": sd.omega_c,
        "char_residual": sd.residual,
        "period": sd.period,
        "psi0": sd.psi0.tolist(),
        "gram": sd.basis.gram.tolist(),
        "biorth_residual": sd.basis.biorth_residual,
        "unstable_roots_found": sd.spectrum.count,
        "spectrum_message": sd.spectrum.message,
        "gap": None if gap is None else {
            "kappa": gap.kappa, "K": gap.K,
            "second_root": [gap.second_root.real, gap.second_root.imag],
            "fit_rate": gap.fit_rate, "fit_r2": gap.fit_r2,
        },
    }
    write_json(out / "spectrum.json", report)
    write_manifest(out, "spectrum", cfg, _resolved_seed(cfg, seed), n_threads,
                   ["spectrum.json"], timer.laps)
    return report


def run_coeffs(cfg: ExperimentConfig, out_dir, seed=None,
               n_threads: int = 1, radii=None, n_angles: int = 16) -> dict:
    out = _prepare_out(out_dir)
    timer = _Timer()
    pipe = Pipeline(cfg)
    model = pipe.model
    timer.lap("model")
    if radii is None:
        radii = [0.5, 1.0, 1.5, 2.0]
    angles = np.arange(n_angles) * (2.0 * np.pi / n_angles)
    table = model.coefficient_table(radii, angles)
    header = list(table.keys())
    write_csv(out / "coeffs.csv", header, [table[k] for k in header])
    timer.lap("table")

    z0 = np.asarray(cfg.sim.z0, dtype=float) if cfg.sim is not None \
        else np.array([1.0, 0.0])
    centering_ok, residual = model.centering_check()
    noise_info = None
    if pipe.noise is not None:
        mixing = pipe.noise.mixing_report(np.linspace(0.0, model.s_max, 25))
        noise_info = {"gap": pipe.noise.gap, "variance": pipe.noise.variance,
                      "mixing_constants": mixing}
    report = {
        "quadrature": {"n_tau": model.quad.n_tau, "s_max": model.s_max,
                       "ds": model.quad.ds, "tail_tol": model.quad.tail_tol},
        "noise": noise_info,
        "centering_passed": bool(centering_ok),
        "centering_residual": residual,
        "at_z0": {
            "z": z0.tolist(),
            "a": model.diffusion_a(z0).tolist(),
            "bFP": model.drift_bFP(z0).tolist(),
            "bFQ": model.drift_bFQ(z0).tolist(),
            "bG": model.drift_bG(z0).tolist(),
            "bGq": model.drift_bGq(z0).tolist(),
            "full_drift": model.full_drift(z0).tolist(),
        },
    }
    timer.lap("point")
    write_json(out / "coeffs.json", report)
    write_manifest(out, "coeffs", cfg, _resolved_seed(cfg, seed), n_threads,
                   ["coeffs.csv", "coeffs.json"], timer.laps)
    return report


def _simulate_eps(pipe: Pipeline, eps: float, eps_index: int, seed: int,
                  n_threads: int, out: Path, artifacts: list) -> dict:
    cfg = pipe.cfg
    sim = cfg.require_sim()
    f = pipe.functionals
    sd = pipe.spectral
    initial = pipe.initial_history()
    stride = sim.record_stride or max(1, int(round(
        sim.t_final / (eps * eps * sim.dt) / 400)))
    sim_cfg = SimConfig(eps=eps, dt=sim.dt, t_final=sim.t_final,
                        record_stride=stride, escape_norm=sim.escape_norm,
                        record_ynorm=True)
    traj = simulate(sd, f["F"], f["G"], f["Gq"], pipe.noise, initial, sim_cfg,
                    master_seed=seed, path_index=0, eps_index=eps_index)
    tag = f"eps{eps_index}"
    traj_name = f"trajectory_{tag}.csv"
    write_csv(out / traj_name,
              ["t", "z1", "z2", "zc1", "zc2", "ynorm"],
              [traj.times, traj.z[:, 0], traj.z[:, 1],
               traj.zc[:, 0], traj.zc[:, 1], traj.ynorm])
    artifacts.append(traj_name)

    ens = ensemble(sd, f["F"], f["G"], f["Gq"], pipe.noise, initial,
                   SimConfig(eps=eps, dt=sim.dt, t_final=sim.t_final,
                             escape_norm=sim.escape_norm),
                   n_paths=sim.n_paths, master_seed=seed, eps_index=eps_index,
                   n_threads=n_threads)
    term_name = f"dde_terminal_{tag}.csv"
    write_csv(out / term_name, ["path_id", "zc1", "zc2"],
              [np.arange(sim.n_paths), ens.terminal_zc[:, 0],
               ens.terminal_zc[:, 1]])
    artifacts.append(term_name)

    finite = ens.terminal_zc[np.isfinite(ens.terminal_zc).all(axis=1)]
    entry = {
        "eps": eps,
        "n_paths": sim.n_paths,
        "n_completed": sim.n_paths - int(ens.n_escaped),
        "n_escaped": int(ens.n_escaped),
        "escape_fraction": ens.n_escaped / sim.n_paths,
        "trajectory_csv": traj_name,
        "terminal_csv": term_name,
        "path0_escaped": bool(traj.escaped),
    }
    if finite.shape[0] >= 2:
        entry["terminal_moments"] = moment_summary(finite)
    return entry, ens


def run_dde_ensemble(cfg: ExperimentConfig, out_dir, seed=None,
                 n_threads: int = 1) -> dict:
    out = _prepare_out(out_dir)
    timer = _Timer()
    pipe = Pipeline(cfg)
    sim = cfg.require_sim()
    seed = _resolved_seed(cfg, seed)
    artifacts = []
    entries = []
    for k, eps in enumerate(sorted(sim.eps, reverse=True)):
        entry, _ = _simulate_eps(pipe, eps, k, seed, n_threads, out, artifacts)
        entries.append(entry)
        timer.lap(f"eps{k}")
    report = {"seed": seed, "omega_c": pipe.spectral.omega_c, "runs": entries}
    write_json(out / "simulate.json", report)
    artifacts.append("simulate.json")
    write_manifest(out, "simulate", cfg, seed, n_threads, artifacts,
                   timer.laps)
    return report


def _limit_terminal(pipe: Pipeline, seed: int, stream_tag: int = 0,
                    drift_factor: float = 1.0):
    cfg = pipe.cfg
    sim = cfg.require_sim()
    lim = cfg.limit
    grid = pipe.grid
    if drift_factor == 1.0:
        spec = DiffusionSpec.from_model(grid)
    else:
        spec = DiffusionSpec(
            drift=lambda z: drift_factor * grid.drift(z),
            diffusion=grid.diffusion)
    return sde_ensemble(spec, np.asarray(sim.z0, dtype=float), lim.dt,
                        sim.t_final, lim.n_paths, seed,
                        stream_tag=stream_tag,
                        escape_norm=sim.escape_norm)


def run_limit_ensemble(cfg: ExperimentConfig, out_dir, seed=None,
              n_threads: int = 1) -> dict:
    out = _prepare_out(out_dir)
    timer = _Timer()
    pipe = Pipeline(cfg)
    cfg.require_sim()
    seed = _resolved_seed(cfg, seed)
    pipe.model
    timer.lap("model")
    terminal, escaped = _limit_terminal(pipe, seed)
    timer.lap("paths")
    write_csv(out / "limit_terminal.csv", ["path_id", "zc1", "zc2"],
              [np.arange(terminal.shape[0]), terminal[:, 0], terminal[:, 1]])
    finite = terminal[np.isfinite(terminal).all(axis=1)]
    report = {
        "seed": seed,
        "n_paths": cfg.limit.n_paths,
        "dt": cfg.limit.dt,
        "t_final": cfg.sim.t_final,
        "n_escaped": int(escaped.sum()),
        "cache_nodes": pipe.grid.n_nodes,
        "cache_direct_evals": pipe.grid.n_direct,
    }
    if finite.shape[0] >= 2:
        report["terminal_moments"] = moment_summary(finite)
    write_json(out / "limit.json", report)
    write_manifest(out, "limit", cfg, seed, n_threads,
                   ["limit_terminal.csv", "limit.json"], timer.laps)
    return report


def run_validation(cfg: ExperimentConfig, out_dir, seed=None,
                 n_threads: int = 1) -> dict:
    """Full pipeline and verdict; returns the report (verdict key:
    "pass" or "fail")."""
    out = _prepare_out(out_dir)
    timer = _Timer()
    pipe = Pipeline(cfg)
    sim = cfg.require_sim()
    val = cfg.validation
    seed = _resolved_seed(cfg, seed)
    artifacts = []

    pipe.model
    timer.lap("model")

    eps_sorted = sorted(sim.eps, reverse=True)
    dde_terminals = {}
    entries = []
    for k, eps in enumerate(eps_sorted):
        entry, ens = _simulate_eps(pipe, eps, k, seed, n_threads, out,
                                   artifacts)
        entries.append(entry)
        dde_terminals[eps] = ens.terminal_zc
        timer.lap(f"dde_eps{k}")

    limit_terminal, limit_escaped = _limit_terminal(pipe, seed)
    write_csv(out / "limit_terminal.csv", ["path_id", "zc1", "zc2"],
              [np.arange(limit_terminal.shape[0]), limit_terminal[:, 0],
               limit_terminal[:, 1]])
    artifacts.append("limit_terminal.csv")
    timer.lap("limit")

    escapes = {"limit": float(limit_escaped.mean())}
    for entry in entries:
        escapes[f"eps={entry['eps']}"] = entry["escape_fraction"]
    for name, frac in escapes.items():
        if frac > val.max_escape_frac:
            raise AssumptionError(
                f"escape fraction {frac:.3f} for {name} exceeds "
                f"max_escape_frac={val.max_escape_frac}; the local regime "
                "does not hold at this horizon")

    h_limit = energy(limit_terminal)
    ks_rows = []
    for eps in eps_sorted:
        ks_rows.append({"eps": eps,
                        "ks": ks_two_sample(energy(dde_terminals[eps]),
                                            h_limit)})
    ks_values = [row["ks"] for row in ks_rows]
    # monotone trend along decreasing eps; non-strict so the degenerate
    # zero-perturbation configuration passes
    ks_decreasing = all(ks_values[i + 1] <= ks_values[i]
                        for i in range(len(ks_values) - 1))

    smallest = eps_sorted[-1]
    moments = moment_test(dde_terminals[smallest], limit_terminal,
                          n_se=val.n_se, abs_tol=val.abs_tol)
    if val.abs_tol > 0:
        for row in moments["components"]:
            if row["combined_se"] > val.abs_tol:
                raise AssumptionError(
                    f"ensemble too small for abs_tol={val.abs_tol}: combined "
                    f"standard error of {row['moment']} is "
                    f"{row['combined_se']:.3g}; increase n_paths")

    control = None
    control_rejected = True
    if val.negative_control:
        control_terminal, _ = _limit_terminal(pipe, seed, stream_tag=1,
                                              drift_factor=2.0)
        control_moments = moment_test(dde_terminals[smallest],
                                      control_terminal, n_se=val.n_se,
                                      abs_tol=val.abs_tol)
        control_ks = ks_two_sample(energy(dde_terminals[smallest]),
                                   energy(control_terminal))
        control_rejected = not control_moments["passed"]
        control = {
            "drift_factor": 2.0,
            "ks": control_ks,
            "moments_passed": control_moments["passed"],
            "rejected": control_rejected,
            "components": control_moments["components"],
        }
        timer.lap("control")

    checks = {
        "ks_decreasing": bool(ks_decreasing),
        "moments_match": bool(moments["passed"]),
        "negative_control_rejected": bool(control_rejected),
    }
    verdict = "pass" if all(checks.values()) else "fail"
    report = {
        "verdict": verdict,
        "verdict_basis": "trend test over the configured eps list plus "
                         "moment agreement at the smallest eps; no "
                         "quantitative rate is asserted",
        "checks": checks,
        "seed": seed,
        "ks": ks_rows,
        "moments_smallest_eps": {"eps": smallest, **moments},
        "escape_fractions": escapes,
        "negative_control": control,
        "runs": entries,
    }
    write_json(out / "report.json", report)
    artifacts.append("report.json")
    write_manifest(out, "validate", cfg, seed, n_threads, artifacts,
                   timer.laps)
    return report
