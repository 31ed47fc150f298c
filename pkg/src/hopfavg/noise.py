"""Finite-state Markov noise with exponentially decaying autocorrelation.

The driving noise is sigma(xi_t) for an irreducible continuous-time Markov
chain xi_t on finitely many states with generator Q, run at stationarity.
The read-out vector sigma must be centered, sum_i nu_i * sigma_i = 0, so the
stationary autocorrelation

    R(t) = sum_xi nu_xi * sigma_xi * (exp(t*Q) sigma)_xi

decays like exp(-gap*t), where gap is the spectral gap of Q.  R feeds the
averaged diffusion and drift integrals; sample paths drive the delay-equation
ensembles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

__all__ = ["NoiseError", "MarkovNoiseModel", "NoisePath"]


class NoiseError(ValueError):
    """Raised for malformed generators or read-out vectors."""


@dataclass
class NoisePath:
    """Piecewise-constant realization on [0, t_max].

    ``states[i]`` holds on [jump_times[i-1], jump_times[i]) with
    jump_times[-1] capped at t_max; the first interval starts at 0.
    ``sigma_values`` are the corresponding read-out values.
    """

    t_max: float
    jump_times: np.ndarray
    states: np.ndarray
    sigma_values: np.ndarray

    def state_at(self, t):
        """State index at time t (vectorized, right-continuous)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def value_at(self, t):
        """sigma(xi_t) at time t (vectorized, right-continuous)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.sigma_values[idx]

    def occupation_fractions(self, n_states: int) -> np.ndarray:
        """Fraction of [0, t_max] spent in each state."""
        edges = np.concatenate([[0.0], self.jump_times, [self.t_max]])
        durations = np.diff(edges)
        out = np.zeros(n_states)
        np.add.at(out, self.states, durations)
        return out / self.t_max


class MarkovNoiseModel:
    """Irreducible finite-state chain with a centered read-out.

    Parameters
    ----------
    Q : array_like, shape (n, n)
        Generator: non-negative off-diagonal rates, rows summing to zero.
    sigma : array_like, shape (n,)
        Read-out values per state; must be centered under the stationary
        law (tolerance 1e-12) unless ``auto_center`` subtracts the mean.
    """

    def __init__(self, Q, sigma, auto_center: bool = False):
        Q = np.array(Q, dtype=float)
        sigma = np.array(sigma, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise NoiseError(f"generator must be square, got shape {Q.shape}")
        n = Q.shape[0]
        if sigma.shape != (n,):
            raise NoiseError(
                f"sigma has shape {sigma.shape}, expected ({n},)")
        if not np.all(np.isfinite(Q)) or not np.all(np.isfinite(sigma)):
            raise NoiseError("generator and sigma must be finite")
        off = Q.copy()
        np.fill_diagonal(off, 0.0)
        if off.min() < -1e-12:
            raise NoiseError("off-diagonal rates must be non-negative")
        scale = max(1.0, float(np.abs(Q).max()))
        rowsum = Q.sum(axis=1)
        if np.abs(rowsum).max() > 1e-12 * scale:
            raise NoiseError(f"generator rows must sum to zero, got {rowsum}")
        if n > 1:
            adjacency = (off > 0).astype(int)
            n_comp, _ = connected_components(adjacency, directed=True,
                                             connection="strong")
            if n_comp != 1:
                raise NoiseError("generator is not irreducible")

        self.Q = Q
        self.n_states = n

        # stationary law: left null vector of Q, normalized
        lhs = np.vstack([Q.T, np.ones(n)])
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        nu, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        if nu.min() <= 0:
            raise NoiseError(f"stationary law has non-positive mass: {nu}")
        self.stationary = nu / nu.sum()

        mean = float(self.stationary @ sigma)
        if auto_center:
            sigma = sigma - mean
        elif abs(mean) > 1e-12 * max(1.0, float(np.abs(sigma).max())):
            raise NoiseError(
                f"read-out is not centered: stationary mean {mean:.3e}; "
                "pass auto_center=True to subtract it")
        self.sigma = sigma

        # eigendecomposition cached for vectorized R(t)
        eigvals, eigvecs = np.linalg.eig(Q)
        self._eigvals = eigvals
        self._eigvecs = eigvecs
        try:
            self._eig_cond = float(np.linalg.cond(eigvecs))
        except np.linalg.LinAlgError:
            self._eig_cond = np.inf
        if np.isfinite(self._eig_cond) and self._eig_cond < 1e8:
            self._coeffs = ((self.stationary * self.sigma) @ eigvecs) * \
                np.linalg.solve(eigvecs, self.sigma)
        else:
            self._coeffs = None

        stable = eigvals.real[eigvals.real < -1e-12 * scale]
        if stable.size:
            self.gap = float(-stable.max())
        elif n == 1:
            self.gap = np.inf
        else:
            raise NoiseError("generator has no spectral gap")

    @property
    def variance(self) -> float:
        """R(0) = stationary variance of the read-out."""
        return float(self.stationary @ self.sigma**2)

    def autocorrelation(self, t, method: str = "auto"):
        """Stationary autocorrelation R(t), vectorized over t >= 0.

        ``method`` selects the matrix-exponential route: ``"eig"`` uses the
        cached eigendecomposition, ``"expm"`` scaling-and-squaring per time;
        ``"auto"`` prefers the former when Q is well conditioned.  The two
        agree to 1e-12 for diagonalizable generators.
        """
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if t.min() < 0:
            raise NoiseError("autocorrelation is defined for t >= 0")
        if method == "auto":
            method = "eig" if self._coeffs is not None else "expm"
        if method == "eig":
            if self._coeffs is None:
                raise NoiseError("eigenvector matrix too ill-conditioned; "
                                 "use method='expm'")
            phases = np.exp(np.multiply.outer(t, self._eigvals))
            out = (phases @ self._coeffs).real
        elif method == "expm":
            weights = self.stationary * self.sigma
            out = np.array([
                float(weights @ (expm(ti * self.Q) @ self.sigma))
                for ti in t
            ])
        else:
            raise ValueError(f"unknown method {method!r}")
        return float(out[0]) if scalar else out

    def mixing_report(self, t_grid=None) -> dict:
        """Crude (c1, c2) with sup_xi ||P_t(xi,.) - nu||_TV <= c1*exp(-c2*t).

        Reported for diagnostics only; c2 is the spectral gap and c1 is
        calibrated so the bound holds on the sampled grid.
        """
        if not np.isfinite(self.gap):
            return {"c1": 0.0, "c2": float("inf")}
        if t_grid is None:
            t_grid = np.linspace(0.05, 8.0 / self.gap, 40)
        c1 = 1.0
        for t in t_grid:
            P = expm(t * self.Q)
            tv = 0.5 * np.abs(P - self.stationary[None, :]).sum(axis=1).max()
            c1 = max(c1, tv * np.exp(self.gap * t))
        return {"c1": float(c1), "c2": float(self.gap)}

    def sample_path(self, t_max: float, rng: np.random.Generator) -> NoisePath:
        """Stationary path on [0, t_max]: initial state from the stationary
        law, exponential holding times, jump probabilities Q_ij / |Q_ii|."""
        if t_max <= 0:
            raise NoiseError("t_max must be positive")
        rates = -np.diag(self.Q)
        jump_probs = []
        for i in range(self.n_states):
            if rates[i] > 0:
                p = self.Q[i].copy()
                p[i] = 0.0
                jump_probs.append(p / rates[i])
            else:
                jump_probs.append(None)
        state = int(rng.choice(self.n_states, p=self.stationary))
        t = 0.0
        times, states = [], [state]
        while True:
            rate = rates[state]
            if rate <= 0:
                break
            t += rng.exponential(1.0 / rate)
            if t >= t_max:
                break
            times.append(t)
            state = int(rng.choice(self.n_states, p=jump_probs[state]))
            states.append(state)
        jump_times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=np.int64)
        return NoisePath(t_max=t_max, jump_times=jump_times, states=states,
                         sigma_values=self.sigma[states])
