"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .master_eq import generator_schedule, propagate, trace_distance
from .quantum_core import as_vector, common_eigenbasis
from .trajectories import EnsembleStats, SSEConfig, run_ensemble


@dataclass
class CompareReport:
    xis: np.ndarray
    times: np.ndarray
    distance: np.ndarray  # (n_xi, K+1) trace distance ensemble vs master
    mc_error: np.ndarray  # (n_xi, K+1) Monte-Carlo scale of the distance
    residual: np.ndarray  # (n_xi,) mean distance over the compared window
    exponent: float  # slope of log residual vs log xi
    window: np.ndarray  # boolean mask of compared times
    within_mc: bool  # distance <= 3 MC errors everywhere in the window (first xi)

    def as_dict(self) -> dict:
        return {
            "xis": self.xis.tolist(),
            "residual": self.residual.tolist(),
            "exponent": self.exponent,
            "within_3_mc_errors": self.within_mc,
            "max_distance": self.distance[:, self.window].max(axis=1).tolist(),
            "max_mc_error": self.mc_error[:, self.window].max(axis=1).tolist(),
        }


def master_reference(config: SSEConfig, psi0) -> np.ndarray:
    """rho(t) of the second-order master equation on the trajectory grid."""
    v = as_vector(psi0)
    v = v / np.linalg.norm(v)
    sched = generator_schedule(config.H0, config.collapse_ops, config.kernel, config.xi, config.hbar)
    return propagate(np.outer(v, v.conj()), sched, config.grid).rhos


def compare_ensemble_to_master(config: SSEConfig, psi0, n_traj: int, seed: int, *, halvings: int = 2,
                               window: Optional[float] = None, chunk_size: int = 512) -> CompareReport:
    """Ensemble mean vs master equation for xi, xi/2, ..., xi/2^halvings.

    All runs share the same noise draws (identical seed and kernel), so the
    residual's dependence on xi is not masked by independent sampling noise.
    ``window`` limits the compared times to xi^2 (largest) * t <= window.
    """
    if config.scheme == "ito":
        raise ValueError("the master-equation comparison needs a coloured-noise scheme")
    xis = config.xi / 2.0 ** np.arange(halvings + 1)
    t = config.grid.times
    mask = np.ones(t.size, bool) if window is None else (config.xi**2 * t <= window * (1 + 1e-12))
    dist, err = [], []
    for x in xis:
        cfg = replace(config, xi=float(x))
        stats = run_ensemble(cfg, psi0, n_traj, seed, chunk_size=chunk_size)
        ref = master_reference(cfg, psi0)
        dist.append([trace_distance(a, b) for a, b in zip(stats.rho_mean, ref)])
        err.append(stats.trace_distance_se())
    dist, err = np.array(dist), np.array(err)
    resid = dist[:, mask].mean(axis=1)
    if np.all(resid > 0) and len(xis) > 1:
        exponent = float(np.polyfit(np.log(xis), np.log(resid), 1)[0])
    else:
        exponent = float("nan")
    within = bool(np.all(dist[0, mask] <= 3 * err[0, mask] + 1e-12))
    return CompareReport(xis, t, dist, err, resid, exponent, mask, within)


@dataclass
class CollapseReport:
    outcome_labels: list
    born: np.ndarray  # |<alpha|psi0>|^2
    frequency: np.ndarray
    frequency_se: np.ndarray
    max_final_V: float
    n_not_collapsed: int
    martingale_A: float  # max |mean A(t) - mean A(0)| / se
    martingale_A2: float
    stats: EnsembleStats = field(repr=False, default=None)

    @property
    def born_z(self) -> np.ndarray:
        return np.abs(self.frequency - self.born) / np.where(self.frequency_se > 0, self.frequency_se, np.inf)

    def as_dict(self) -> dict:
        return {
            "outcomes": [list(l) for l in self.outcome_labels], "born": self.born.tolist(),
            "frequency": self.frequency.tolist(), "frequency_se": self.frequency_se.tolist(),
            "born_z": self.born_z.tolist(), "max_final_V": self.max_final_V,
            "n_not_collapsed": self.n_not_collapsed,
            "martingale_A_z": self.martingale_A, "martingale_A2_z": self.martingale_A2,
        }


def _max_z(mean, se):
    dev = np.abs(mean - mean[0])
    s = np.sqrt(se**2 + se[0] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, dev / s, np.where(dev > 0, np.inf, 0.0))
    return float(z.max())


def collapse_statistics(config: SSEConfig, psi0, n_traj: int, seed: int, *, v_threshold: float = 1e-2,
                        chunk_size: int = 512) -> CollapseReport:
    """Collapse, Born-rule and martingale statistics for one collapse operator."""
    stats = run_ensemble(config, psi0, n_traj, seed, chunk_size=chunk_size)
    basis, labels = common_eigenbasis(config.collapse_ops)
    v = as_vector(psi0)
    v = v / np.linalg.norm(v)
    # group degenerate eigenvectors by their first label
    values = sorted({round(l[0], 9) for l in labels})
    born = np.array([sum(abs(np.vdot(b.amplitudes, v)) ** 2 for b, l in zip(basis, labels) if round(l[0], 9) == a)
                     for a in values])
    # final <A> identifies the outcome once V is small
    final_A = stats.final_A[:, 0]
    idx = np.argmin(np.abs(final_A[:, None] - np.array(values)[None, :]), axis=1)
    freq = np.bincount(idx, minlength=len(values)) / n_traj
    se = np.sqrt(np.clip(born * (1 - born), 0, None) / n_traj)
    fv = stats.final_V[:, 0]
    return CollapseReport(
        [(a,) for a in values], born, freq, se, float(fv.max()), int(np.sum(fv >= v_threshold)),
        _max_z(stats.mean_A[:, 0], stats.se_A[:, 0]), _max_z(stats.mean_A2[:, 0], stats.se_A2[:, 0]), stats,
    )

