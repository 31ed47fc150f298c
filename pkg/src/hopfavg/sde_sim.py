"""Euler-Maruyama simulation of the planar limit diffusion.

The drift and diffusion fields come either from an ``AveragedModel`` (or its
``CoefficientGrid`` cache) or from any pair of callables with the same batch
signatures.  The diffusion callable returns symmetric matrices; the matrix
square root is the closed-form 2x2 symmetric eigendecomposition, with tiny
negative eigenvalues (quadrature noise) clipped at -1e-9 and anything below
that treated as an error.

Path streams mirror the DDE simulator: one counter-based generator per path
derived from the master seed, so ensembles are bitwise reproducible for any
chunk schedule and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dde_sim import STREAM_LIMIT_SDE, path_stream

__all__ = [
    "sqrt_psd",
    "DiffusionSpec",
    "SdePath",
    "euler_maruyama",
    "sde_ensemble",
]

EIG_FLOOR = -1e-9


def sqrt_psd(a, floor: float = EIG_FLOOR):
    """Symmetric PSD square root of 2x2 matrices, shape (..., 2, 2).

    Eigenvalues in [floor, 0) are clipped to zero; smaller ones raise.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[-2:] != (2, 2):
        raise ValueError(f"expected (..., 2, 2), got {a.shape}")
    a11, a22 = a[..., 0, 0], a[..., 1, 1]
    off = 0.5 * (a[..., 0, 1] + a[..., 1, 0])
    mean = 0.5 * (a11 + a22)
    half_diff = 0.5 * (a11 - a22)
    radius = np.hypot(half_diff, off)
    lam1 = mean + radius
    lam2 = mean - radius
    low = min(float(np.min(lam2, initial=0.0)), float(np.min(lam1, initial=0.0)))
    if low < floor:
        raise ValueError(
            f"matrix eigenvalue {low:.3e} below clip floor {floor:.1e}; "
            "not positive semidefinite")
    lam1 = np.clip(lam1, 0.0, None)
    lam2 = np.clip(lam2, 0.0, None)
    s1, s2 = np.sqrt(lam1), np.sqrt(lam2)
    # eigenvector for lam1: (cos t, sin t) with 2t = atan2(2 off, a11 - a22)
    t = 0.5 * np.arctan2(2.0 * off, a11 - a22)
    c, s = np.cos(t), np.sin(t)
    root = np.empty(a.shape)
    root[..., 0, 0] = s1 * c * c + s2 * s * s
    root[..., 1, 1] = s1 * s * s + s2 * c * c
    root[..., 0, 1] = (s1 - s2) * c * s
    root[..., 1, 0] = root[..., 0, 1]
    return root


@dataclass(frozen=True)
class DiffusionSpec:
    """Batch drift b(z) -> (m, 2) and symmetric diffusion a(z) -> (m, 2, 2)."""

    drift: Callable
    diffusion: Callable

    @classmethod
    def from_model(cls, model) -> "DiffusionSpec":
        """Wrap an AveragedModel or CoefficientGrid."""
        if hasattr(model, "full_drift"):
            return cls(drift=model.full_drift, diffusion=model.diffusion_bar)
        return cls(drift=model.drift, diffusion=model.diffusion)


@dataclass
class SdePath:
    times: np.ndarray
    z: np.ndarray          # (n_rec, 2)
    escaped: bool
    escape_time: float


def _step_batch(spec, z, dt, noise_incr, active):
    b = spec.drift(z)
    root = sqrt_psd(spec.diffusion(z))
    move = b * dt + np.einsum("mij,mj->mi", root, noise_incr, optimize=False)
    z_new = z + move
    bad = ~np.isfinite(z_new).all(axis=1)
    norm = np.where(bad, np.inf, np.hypot(z_new[:, 0], z_new[:, 1]))
    return z_new, norm


def euler_maruyama(spec: DiffusionSpec, z0, dt: float, t_final: float,
                   rng: np.random.Generator, record_stride: int = 1,
                   escape_norm: float = 1e6) -> SdePath:
    """One trajectory with full recording every ``record_stride`` steps."""
    n_steps = max(1, int(round(t_final / dt)))
    z = np.asarray(z0, dtype=float).reshape(1, 2).copy()
    rec_idx = [0]
    rec = [z[0].copy()]
    escaped = False
    escape_time = np.nan
    sqrt_dt = np.sqrt(dt)
    for k in range(n_steps):
        xi = rng.standard_normal(2)[None, :] * sqrt_dt
        z_new, norm = _step_batch(spec, z, dt, xi, None)
        if not escaped and norm[0] > escape_norm:
            escaped = True
            escape_time = (k + 1) * dt
        if not escaped:
            z = z_new
        if (k + 1) % record_stride == 0 or k + 1 == n_steps:
            rec_idx.append(k + 1)
            rec.append(z[0].copy())
    return SdePath(times=np.array(rec_idx, dtype=float) * dt,
                   z=np.array(rec), escaped=escaped, escape_time=escape_time)


def sde_ensemble(spec: DiffusionSpec, z0, dt: float, t_final: float,
                 n_paths: int, master_seed: int, stream_tag: int = 0,
                 chunk_size: int = 4096, escape_norm: float = 1e6):
    """Terminal values of ``n_paths`` independent paths.

    Returns ``(terminal, escaped)`` with shapes (n, 2) and (n,).  Escaped
    paths freeze and their terminal values are NaN.  Normal increments are
    drawn per path from counter-based streams keyed by (stream_tag, path
    index), prerolled one chunk at a time; results do not depend on
    chunk_size.
    """
    n_steps = max(1, int(round(t_final / dt)))
    z0 = np.asarray(z0, dtype=float).reshape(2)
    terminal = np.full((n_paths, 2), np.nan)
    escaped_all = np.zeros(n_paths, dtype=bool)
    sqrt_dt = np.sqrt(dt)
    for start in range(0, n_paths, chunk_size):
        stop = min(start + chunk_size, n_paths)
        m = stop - start
        normals = np.empty((m, n_steps, 2))
        for p in range(start, stop):
            rng = path_stream(master_seed, STREAM_LIMIT_SDE, stream_tag, p)
            normals[p - start] = rng.standard_normal((n_steps, 2))
        z = np.tile(z0, (m, 1))
        active = np.ones(m, dtype=bool)
        for k in range(n_steps):
            z_new, norm = _step_batch(spec, z, dt, normals[:, k, :] * sqrt_dt,
                                      active)
            blown = active & (norm > escape_norm)
            active = active & ~blown
            z = np.where(active[:, None], z_new, z)
        terminal[start:stop] = np.where(active[:, None], z, np.nan)
        escaped_all[start:stop] = ~active
    return terminal, escaped_all
