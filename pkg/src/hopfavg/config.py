"""Experiment configuration: JSON loading and validation.

Every validation failure names the offending key with a dotted path, and all
problems in a file are collected before raising, so a bad config surfaces in
one round trip.  Sections other than ``system`` are optional at load time;
pipeline stages that need a missing section raise later with the same error
type.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "AssumptionError",
    "SystemSection",
    "PerturbationSection",
    "NoiseSection",
    "QuadratureSection",
    "SimSection",
    "LimitSection",
    "ValidationSection",
    "ExperimentConfig",
    "load_config",
    "validate_config",
]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


class AssumptionError(RuntimeError):
    """A structural assumption failed for a well-formed configuration
    (spectrum not a simple critical pair, centering violated, ...)."""


@dataclass(frozen=True)
class SystemSection:
    r: float
    delays: list
    weights: list
    instantaneous: float = 0.0


@dataclass(frozen=True)
class PerturbationSection:
    F: str = "0"
    G: str = "0"
    Gq: str = "0"


@dataclass(frozen=True)
class NoiseSection:
    Q: list
    sigma: list
    auto_center: bool = False


@dataclass(frozen=True)
class QuadratureSection:
    n_tau: int | None = None
    s_max: float | None = None
    ds: float | None = None
    tail_tol: float = 1e-8


@dataclass(frozen=True)
class SimSection:
    eps: list
    dt: float
    t_final: float
    n_paths: int
    z0: list
    record_stride: int = 0
    escape_norm: float = 1e6
    seed: int = 0


@dataclass(frozen=True)
class LimitSection:
    dt: float = 1e-3
    n_paths: int = 2000
    cache_spacing: float = 0.05
    cache_extent: float = 6.0


@dataclass(frozen=True)
class ValidationSection:
    n_se: float = 3.0
    abs_tol: float = 0.1
    negative_control: bool = True
    max_escape_frac: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSection
    perturbations: PerturbationSection
    noise: NoiseSection | None
    quadrature: QuadratureSection
    sim: SimSection | None
    limit: LimitSection
    validation: ValidationSection
    raw: dict = field(repr=False, default_factory=dict)

    def require_sim(self) -> SimSection:
        if self.sim is None:
            raise ConfigError("sim: section required for this stage")
        return self.sim

    def require_noise(self) -> NoiseSection:
        if self.noise is None:
            raise ConfigError("noise: section required for this stage")
        return self.noise


def _number(errors, section, key, path, *, default=None, required=False,
            positive=False, nonnegative=False):
    if key not in section:
        if required:
            errors.append(f"{path}: missing required key")
        return default
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        errors.append(f"{path}: expected a number, got {type(v).__name__}")
        return default
    v = float(v)
    if not np.isfinite(v):
        errors.append(f"{path}: must be finite")
        return default
    if positive and v <= 0:
        errors.append(f"{path}: must be positive, got {v}")
        return default
    if nonnegative and v < 0:
        errors.append(f"{path}: must be nonnegative, got {v}")
        return default
    return v


def _integer(errors, section, key, path, *, default=None, required=False,
             minimum=None):
    v = _number(errors, section, key, path, default=None, required=required)
    if v is None:
        return default
    if v != int(v):
        errors.append(f"{path}: expected an integer, got {v}")
        return default
    v = int(v)
    if minimum is not None and v < minimum:
        errors.append(f"{path}: must be at least {minimum}, got {v}")
        return default
    return v


def _number_list(errors, section, key, path, *, required=False, default=None,
                 length=None, positive=False):
    if key not in section:
        if required:
            errors.append(f"{path}: missing required key")
        return default
    v = section[key]
    if not isinstance(v, list) or not v:
        errors.append(f"{path}: expected a non-empty list of numbers")
        return default
    out = []
    for i, item in enumerate(v):
        if isinstance(item, bool) or not isinstance(item, (int, float)) \
                or not np.isfinite(float(item)):
            errors.append(f"{path}[{i}]: expected a finite number")
            return default
        if positive and item <= 0:
            errors.append(f"{path}[{i}]: must be positive, got {item}")
            return default
        out.append(float(item))
    if length is not None and len(out) != length:
        errors.append(f"{path}: expected {length} entries, got {len(out)}")
        return default
    return out


def _string(errors, section, key, path, default=None):
    if key not in section:
        return default
    v = section[key]
    if not isinstance(v, str):
        errors.append(f"{path}: expected a string, got {type(v).__name__}")
        return default
    return v


def _boolean(errors, section, key, path, default):
    if key not in section:
        return default
    v = section[key]
    if not isinstance(v, bool):
        errors.append(f"{path}: expected true or false")
        return default
    return v


_KNOWN_KEYS = {
    "system": {"r", "delays", "weights", "instantaneous"},
    "perturbations": {"F", "G", "Gq"},
    "noise": {"Q", "sigma", "auto_center"},
    "quadrature": {"n_tau", "s_max", "ds", "tail_tol"},
    "sim": {"eps", "dt", "T", "n_paths", "z0", "record_stride",
            "escape_norm", "seed"},
    "limit": {"dt", "n_paths", "cache_spacing", "cache_extent"},
    "validation": {"n_se", "abs_tol", "negative_control", "max_escape_frac"},
}


def _section(errors, cfg, name, required=False):
    if name not in cfg:
        if required:
            errors.append(f"{name}: missing required section")
        return None
    v = cfg[name]
    if not isinstance(v, dict):
        errors.append(f"{name}: expected an object")
        return None
    for key in v:
        if key not in _KNOWN_KEYS[name]:
            errors.append(f"{name}.{key}: unknown key")
    return v


def validate_config(cfg: dict) -> ExperimentConfig:
    """Validate a parsed JSON dict; raises ConfigError listing every
    problem with its dotted key path."""
    if not isinstance(cfg, dict):
        raise ConfigError("top level: expected a JSON object")
    errors: list[str] = []

    system = None
    sec = _section(errors, cfg, "system", required=True)
    if sec is not None:
        r = _number(errors, sec, "r", "system.r", required=True, positive=True)
        delays = _number_list(errors, sec, "delays", "system.delays",
                              required=True, positive=True)
        weights = _number_list(errors, sec, "weights", "system.weights",
                               required=True)
        inst = _number(errors, sec, "instantaneous", "system.instantaneous",
                       default=0.0)
        if delays is not None and weights is not None \
                and len(delays) != len(weights):
            errors.append("system.weights: length must match system.delays")
        if r is not None and delays is not None:
            for i, d in enumerate(delays):
                if d > r + 1e-12:
                    errors.append(
                        f"system.delays[{i}]: delay {d} exceeds system.r={r}")
        if not errors:
            system = SystemSection(r=r, delays=delays, weights=weights,
                                   instantaneous=inst)

    perturbations = PerturbationSection()
    sec = _section(errors, cfg, "perturbations")
    if sec is not None:
        perturbations = PerturbationSection(
            F=_string(errors, sec, "F", "perturbations.F", "0") or "0",
            G=_string(errors, sec, "G", "perturbations.G", "0") or "0",
            Gq=_string(errors, sec, "Gq", "perturbations.Gq", "0") or "0")

    noise = None
    sec = _section(errors, cfg, "noise")
    if sec is not None:
        q_rows = sec.get("Q")
        q_ok = isinstance(q_rows, list) and q_rows and all(
            isinstance(row, list) and len(row) == len(q_rows)
            and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                    for x in row)
            for row in q_rows)
        if not q_ok:
            errors.append("noise.Q: expected a square matrix of numbers")
        sigma = _number_list(errors, sec, "sigma", "noise.sigma", required=True)
        if q_ok and sigma is not None and len(sigma) != len(q_rows):
            errors.append("noise.sigma: length must match noise.Q")
        auto_center = _boolean(errors, sec, "auto_center", "noise.auto_center",
                               False)
        if q_ok and sigma is not None and not errors:
            noise = NoiseSection(Q=q_rows, sigma=sigma, auto_center=auto_center)

    quadrature = QuadratureSection()
    sec = _section(errors, cfg, "quadrature")
    if sec is not None:
        quadrature = QuadratureSection(
            n_tau=_integer(errors, sec, "n_tau", "quadrature.n_tau",
                           minimum=64),
            s_max=_number(errors, sec, "s_max", "quadrature.s_max",
                          positive=True),
            ds=_number(errors, sec, "ds", "quadrature.ds", positive=True),
            tail_tol=_number(errors, sec, "tail_tol", "quadrature.tail_tol",
                             default=1e-8, positive=True))

    sim = None
    sec = _section(errors, cfg, "sim")
    if sec is not None:
        eps = _number_list(errors, sec, "eps", "sim.eps", required=True,
                           positive=True)
        if eps is not None:
            for i, e in enumerate(eps):
                if e > 1.0:
                    errors.append(f"sim.eps[{i}]: must lie in (0, 1], got {e}")
        dt = _number(errors, sec, "dt", "sim.dt", required=True, positive=True)
        t_final = _number(errors, sec, "T", "sim.T", required=True,
                          positive=True)
        n_paths = _integer(errors, sec, "n_paths", "sim.n_paths",
                           required=True, minimum=1)
        z0 = _number_list(errors, sec, "z0", "sim.z0", required=True, length=2)
        stride = _integer(errors, sec, "record_stride", "sim.record_stride",
                          default=0, minimum=0)
        escape = _number(errors, sec, "escape_norm", "sim.escape_norm",
                         default=1e6, positive=True)
        seed = _integer(errors, sec, "seed", "sim.seed", default=0, minimum=0)
        if None not in (eps, dt, t_final, n_paths, z0):
            sim = SimSection(eps=eps, dt=dt, t_final=t_final, n_paths=n_paths,
                             z0=z0, record_stride=stride, escape_norm=escape,
                             seed=seed)

    limit = LimitSection()
    sec = _section(errors, cfg, "limit")
    if sec is not None:
        limit = LimitSection(
            dt=_number(errors, sec, "dt", "limit.dt", default=1e-3,
                       positive=True),
            n_paths=_integer(errors, sec, "n_paths", "limit.n_paths",
                             default=2000, minimum=1),
            cache_spacing=_number(errors, sec, "cache_spacing",
                                  "limit.cache_spacing", default=0.05,
                                  positive=True),
            cache_extent=_number(errors, sec, "cache_extent",
                                 "limit.cache_extent", default=6.0,
                                 positive=True))

    validation = ValidationSection()
    sec = _section(errors, cfg, "validation")
    if sec is not None:
        validation = ValidationSection(
            n_se=_number(errors, sec, "n_se", "validation.n_se", default=3.0,
                         positive=True),
            abs_tol=_number(errors, sec, "abs_tol", "validation.abs_tol",
                            default=0.1, nonnegative=True),
            negative_control=_boolean(errors, sec, "negative_control",
                                      "validation.negative_control", True),
            max_escape_frac=_number(errors, sec, "max_escape_frac",
                                    "validation.max_escape_frac", default=0.1,
                                    nonnegative=True))

    known = {"system", "perturbations", "noise", "quadrature", "sim", "limit",
             "validation"}
    for key in cfg:
        if key not in known:
            errors.append(f"{key}: unknown section")

    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return ExperimentConfig(system=system, perturbations=perturbations,
                            noise=noise, quadrature=quadrature, sim=sim,
                            limit=limit, validation=validation, raw=cfg)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return validate_config(cfg)
