"""Stochastic Schrodinger equations and trajectory ensembles.

Three integrators are provided:

* :func:`integrate_ito_white` -- the Ito white-noise collapse equation,
  Euler-Maruyama with renormalization.
* :func:`integrate_nonmarkovian` -- the second-order equation driven by a
  coloured complex noise path, treated as a pathwise ODE (Heun / RK2 with the
  noise held at its grid value over the step).
* :func:`integrate_stratonovich_markovian` -- its Markovian limit for delta
  correlated kernels, Heun steps.

All of them work on batches of trajectories, shape ``(n, d)``, internally.
Delta-correlated kernel components enter the memory integrals with the
endpoint weight :data:`collapse_lab.constants.DELTA_ENDPOINT_WEIGHT`.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .constants import COMMUTATION_TOL, DELTA_ENDPOINT_WEIGHT
from .noise import (
    CorrelationKernel,
    NoisePathSet,
    TimeGrid,
    build_augmented_covariance,
    covariance_factor,
    path_rng,
    sample_paths,
)
from .quantum_core import (
    DimensionError,
    NonCommutingError,
    NotHermitianError,
    Operator,
    StateVector,
    as_matrix,
    as_vector,
    commutator,
    propagator,
    spectral_norm,
)

SCHEMES = ("ito", "nonmarkovian", "stratonovich")


class StepRejectedError(RuntimeError):
    pass


class HistoryOverflow(RuntimeError):
    pass


class ChannelMismatch(ValueError):
    pass


class TrajectoryFailure(RuntimeError):
    def __init__(self, seed: int, path_index: int, cause: Exception):
        self.seed, self.path_index, self.cause = seed, path_index, cause
        super().__init__(f"trajectory (seed={seed}, path={path_index}) failed: {cause}")


@dataclass(frozen=True)
class SSEConfig:
    """Everything that defines a stochastic Schrodinger run except the noise draw.

    ``memory_window`` truncates memory integrals after that many correlation
    times of the kernel (None keeps the full history). ``max_history`` caps
    the number of stored history steps.
    """

    H0: Operator
    collapse_ops: Sequence[Operator]
    xi: float
    grid: TimeGrid
    kernel: Optional[CorrelationKernel] = None
    lambda_ito: float = 0.0
    scheme: str = "nonmarkovian"
    hbar: float = 1.0
    allow_noncommuting: bool = False
    memory_window: Optional[float] = 8.0
    max_history: int = 50_000
    max_norm_drift: float = 1e-3

    def __post_init__(self):
        ops = tuple(o if isinstance(o, Operator) else Operator(o) for o in self.collapse_ops)
        object.__setattr__(self, "collapse_ops", ops)
        if not isinstance(self.H0, Operator):
            object.__setattr__(self, "H0", Operator(self.H0))
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.xi < 0 or self.lambda_ito < 0:
            raise ValueError("xi and lambda_ito must be non-negative")
        if not ops:
            raise ValueError("need at least one collapse operator")
        d = self.H0.dim
        if not self.H0.hermitian:
            raise NotHermitianError("H0 must be hermitian")
        for k, a in enumerate(ops):
            if a.dim != d:
                raise DimensionError(f"collapse operator {k} has dim {a.dim}, H0 has dim {d}")
            if not a.hermitian:
                raise NotHermitianError(f"collapse operator {k} is not hermitian")
        if not self.allow_noncommuting or self.scheme == "ito":
            for i in range(len(ops)):
                for j in range(i + 1, len(ops)):
                    n = spectral_norm(commutator(ops[i], ops[j]))
                    if n > COMMUTATION_TOL:
                        raise NonCommutingError(i, j, n)
        if self.scheme != "ito":
            if self.kernel is None:
                raise ValueError(f"scheme {self.scheme!r} needs a correlation kernel")
            if self.kernel.n_channels != len(ops):
                raise ChannelMismatch(f"kernel has {self.kernel.n_channels} channels, {len(ops)} collapse operators given")

    @property
    def dim(self) -> int:
        return self.H0.dim

    @property
    def n_channels(self) -> int:
        return len(self.collapse_ops)

    def ops_array(self) -> np.ndarray:
        return np.array([a.entries for a in self.collapse_ops])


@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray  # (K+1, d), each row normalized
    norm_log: np.ndarray  # norm the unnormalized process would have reached
    expectations: np.ndarray  # (K+1, N) real
    seed: int
    path_index: int = 0

    def state(self, k: int) -> StateVector:
        return StateVector(self.states[k])

    def variance(self, A) -> np.ndarray:
        return _variance(self.states, as_matrix(A))

    def save(self, path) -> None:
        np.savez(path, times=self.times, states=self.states, norm_log=self.norm_log,
                 expectations=self.expectations, seed=self.seed, path_index=self.path_index)

    @classmethod
    def load(cls, path) -> "TrajectoryRecord":
        z = np.load(path)
        return cls(z["times"], z["states"], z["norm_log"], z["expectations"], int(z["seed"]), int(z["path_index"]))


def _expect(psi: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Real expectation of hermitian A on the last axis of psi (unnormalized)."""
    return (np.einsum("...a,ab,...b->...", psi.conj(), A, psi).real
            / np.einsum("...a,...a->...", psi.conj(), psi).real)


def _variance(psi: np.ndarray, A: np.ndarray) -> np.ndarray:
    a = _expect(psi, A)
    a2 = _expect(psi, A @ A)
    return np.clip(a2 - a**2, 0.0, None)


# --------------------------------------------------------------------------
# Precomputed memory operators


@dataclass
class _MemoryOps:
    P: np.ndarray  # (K+1, N, d, d)
    Q: np.ndarray
    T: np.ndarray
    AP: np.ndarray
    TA: np.ndarray


def _lagged_ops(A: np.ndarray, H0: np.ndarray, n_lags: int, dt: float, hbar: float) -> np.ndarray:
    """B[m] = A(-m dt) = V^m A V^{-m} with V = exp(-i H0 dt / hbar)."""
    B = np.empty((n_lags,) + A.shape, dtype=complex)
    B[0] = A
    if not np.any(H0):
        B[1:] = A
        return B
    V = propagator(H0, dt, hbar)
    Vd = V.conj().T
    for m in range(1, n_lags):
        B[m] = V @ B[m - 1] @ Vd
    return B


def _window_steps(config: SSEConfig) -> Optional[int]:
    kern = config.kernel
    if config.memory_window is None or kern.correlation_time is None:
        return None
    return max(1, int(np.ceil(config.memory_window * kern.correlation_time / config.grid.dt)))


def memory_operators(config: SSEConfig) -> _MemoryOps:
    """Memory integrals over the history that do not depend on the state.

    For every grid step k and channel i::

        P_i = sum_j int_0^t (S_ij - D_ij)(t, tau) A_j(tau - t) dtau
        Q_i = sum_j int_0^t (S_ij - D*_ij)(t, tau) A_j(tau - t) dtau
        T_i = sum_j int_0^t (S*_ij - D*_ij)(t, tau) A_j(tau - t) dtau

    Regular kernel parts use the trapezoid rule on the grid.
    """
    grid, kern = config.grid, config.kernel
    A = config.ops_array()
    N, d = A.shape[0], A.shape[1]
    K1 = grid.n_points
    window = _window_steps(config)
    need = K1 if window is None else min(K1, window + 1)
    if not kern.is_markovian and need > config.max_history:
        raise HistoryOverflow(f"memory needs {need} history steps, cap is {config.max_history}")

    P = np.zeros((K1, N, d, d), dtype=complex)
    Q = np.zeros_like(P)
    T = np.zeros_like(P)
    if not kern.is_markovian and K1 > 1:
        B = _lagged_ops(A, config.H0.entries, need, grid.dt, config.hbar)
        t = grid.times
        for k in range(1, K1):
            lo = 0 if window is None else max(0, k - window)
            tl = t[lo:k + 1]
            Dk, Sk = kern.D(t[k], tl), kern.S(t[k], tl)
            wt = np.full(tl.size, grid.dt)
            wt[0] = wt[-1] = 0.5 * grid.dt
            Bk = B[k - lo::-1]
            P[k] = np.einsum("ijl,ljab->iab", (Sk - Dk) * wt, Bk)
            Q[k] = np.einsum("ijl,ljab->iab", (Sk - Dk.conj()) * wt, Bk)
            T[k] = np.einsum("ijl,ljab->iab", (Sk.conj() - Dk.conj()) * wt, Bk)
    dD, dS = kern.delta_parts()
    if np.any(dD) or np.any(dS):
        w = DELTA_ENDPOINT_WEIGHT
        P += w * np.einsum("ij,jab->iab", dS - dD, A)
        Q += w * np.einsum("ij,jab->iab", dS - dD.conj(), A)
        T += w * np.einsum("ij,jab->iab", dS.conj() - dD.conj(), A)
    AP = np.einsum("iab,kibc->kiac", A, P)
    TA = np.einsum("kiab,ibc->kiac", T, A)
    return _MemoryOps(P, Q, T, AP, TA)


# --------------------------------------------------------------------------
# Right-hand sides, written as H_eff psi for i hbar d psi/dt = H_eff psi


def _nonmarkovian_heff(psi, h, A, H0, xi, hbar, P, Q, AP, TA, T):
    """Effective generator of the second-order coloured-noise equation.

    ``psi`` is (n, d), ``h`` is (n, N). Memory operators are for one grid time.
    """
    nrm = np.einsum("na,na->n", psi.conj(), psi).real
    Apsi = np.einsum("iab,nb->nia", A, psi)
    a = np.einsum("na,nia->ni", psi.conj(), Apsi).real / nrm[:, None]
    out = psi @ H0.T
    if xi == 0.0:
        return out
    out = out + xi * (np.einsum("ni,nia->na", h, Apsi) - 1j * np.einsum("ni,ni->n", a, h.imag)[:, None] * psi)
    Ppsi = np.einsum("iab,nb->nia", P, psi)
    Qpsi = np.einsum("iab,nb->nia", Q, psi)
    APpsi = np.einsum("iab,nb->na", AP, psi)
    exP = np.einsum("na,nia->ni", psi.conj(), Ppsi) / nrm[:, None]
    exAP = np.einsum("na,iab,nb->ni", psi.conj(), AP, psi) / nrm[:, None]
    exTA = np.einsum("na,iab,nb->ni", psi.conj(), TA, psi) / nrm[:, None]
    exT = np.einsum("na,iab,nb->ni", psi.conj(), T, psi) / nrm[:, None]
    c = 1j * xi**2 / hbar
    op = APpsi - np.einsum("ni,nia->na", exP, Apsi) - np.einsum("ni,nia->na", a, Qpsi)
    scal = 0.5 * ((exAP - 2 * a * exP) + (exTA - 2 * a * exT)).sum(axis=1)
    return out + c * op - c * scal[:, None] * psi


def _markov_channels(kernel: CorrelationKernel):
    if not kernel.is_markovian:
        raise ValueError(f"kernel family {kernel.family!r} is not delta correlated")
    return kernel.delta_parts()


def _stratonovich_heff(psi, h, A, H0, xi, hbar, Dt, St):
    """Effective generator of the Markovian (delta-kernel) limit."""
    w = DELTA_ENDPOINT_WEIGHT
    nrm = np.einsum("na,na->n", psi.conj(), psi).real
    Apsi = np.einsum("iab,nb->nia", A, psi)
    a = np.einsum("na,nia->ni", psi.conj(), Apsi).real / nrm[:, None]
    out = psi @ H0.T
    if xi == 0.0:
        return out
    out = out + xi * (np.einsum("ni,nia->na", h, Apsi) - 1j * np.einsum("ni,ni->n", a, h.imag)[:, None] * psi)
    G = St - Dt
    AApsi = np.einsum("iab,njb->nija", A, Apsi)
    M = np.einsum("nia,nja->nij", Apsi.conj(), Apsi) / nrm[:, None, None]  # <A_i A_j>
    # (A_i - a_i)(A_j - a_j) psi
    cen = (AApsi - a[:, None, :, None] * Apsi[:, :, None, :] - a[:, :, None, None] * Apsi[:, None, :, :]
           + (a[:, :, None] * a[:, None, :])[..., None] * psi[:, None, None, :])
    line2 = np.einsum("ij,nija->na", G, cen)
    sc2 = 0.5 * np.einsum("ij,nij->n", G, M + M.transpose(0, 2, 1) - 2 * a[:, :, None] * a[:, None, :])
    sc3 = np.einsum("ij,nij->n", G.imag, M - 2 * M.transpose(0, 2, 1))
    last = np.einsum("ij,ni,nja->na", Dt.imag, a, Apsi)
    c = 1j * xi**2 * w / hbar
    return out + c * (line2 + sc2[:, None] * psi) - c * sc3[:, None] * psi + (2 * xi**2 * w / hbar) * last


def _renorm(psi):
    n = np.linalg.norm(psi, axis=-1)
    return psi / n[:, None], n


def _heun_run(psi0, noise, heff, hbar, dt, n_steps):
    """Heun steps with the noise frozen at its left grid value."""
    n, d = psi0.shape
    states = np.empty((n, n_steps + 1, d), dtype=complex)
    norms = np.ones((n, n_steps + 1))
    psi, _ = _renorm(psi0)
    states[:, 0] = psi
    f = -1j / hbar
    for k in range(n_steps):
        hk = noise[:, :, k]
        k1 = f * heff(psi, hk, k)
        k2 = f * heff(psi + dt * k1, hk, k + 1)
        psi, nk = _renorm(psi + 0.5 * dt * (k1 + k2))
        norms[:, k + 1] = norms[:, k] * nk
        states[:, k + 1] = psi
    return states, norms


def _noise_batch(noise, n_channels, n_points) -> np.ndarray:
    h = np.asarray(noise.paths if isinstance(noise, NoisePathSet) else noise, dtype=complex)
    if h.ndim == 2:
        h = h[None]
    if h.shape[1] != n_channels:
        raise ChannelMismatch(f"noise has {h.shape[1]} channels, config has {n_channels}")
    if h.shape[2] != n_points:
        raise ChannelMismatch(f"noise has {h.shape[2]} grid points, grid has {n_points}")
    return h


def _psi_batch(psi0, n, d):
    v = as_vector(psi0)
    if v.shape == (d,):
        return np.broadcast_to(v, (n, d)).astype(complex)
    if v.shape == (n, d):
        return v.astype(complex)
    raise DimensionError(f"initial state shape {v.shape} does not match dim {d}")


def _run_nonmarkovian(config: SSEConfig, psi0, h, mem: Optional[_MemoryOps] = None):
    mem = memory_operators(config) if mem is None else mem
    A, H0 = config.ops_array(), config.H0.entries

    def heff(psi, hk, k):
        return _nonmarkovian_heff(psi, hk, A, H0, config.xi, config.hbar, mem.P[k], mem.Q[k], mem.AP[k], mem.TA[k], mem.T[k])

    return _heun_run(psi0, h, heff, config.hbar, config.grid.dt, config.grid.n_steps)


def _run_stratonovich(config: SSEConfig, psi0, h):
    Dt, St = _markov_channels(config.kernel)
    A, H0 = config.ops_array(), config.H0.entries

    def heff(psi, hk, k):
        return _stratonovich_heff(psi, hk, A, H0, config.xi, config.hbar, Dt, St)

    return _heun_run(psi0, h, heff, config.hbar, config.grid.dt, config.grid.n_steps)


def wiener_increments(seed: int, path_indices, n_channels: int, n_steps: int, dt: float) -> np.ndarray:
    """(n, N, K) Wiener increments keyed by (seed, path index, channel)."""
    out = np.empty((len(path_indices), n_channels, n_steps))
    for q, p in enumerate(path_indices):
        for j in range(n_channels):
            out[q, j] = path_rng(seed, p, j).standard_normal(n_steps)
    return out * np.sqrt(dt)


def _run_ito(config: SSEConfig, psi0, dW):
    """Euler-Maruyama steps of the Ito white-noise collapse equation.

    A step is rejected when its root-mean-square norm change,
    sqrt(2) lambda dt sum_j V_j + dt^2 <H0^2> / (2 hbar^2), exceeds
    ``config.max_norm_drift``; that quantity depends on dt and the state,
    not on the particular increment drawn.
    """
    A, H0 = config.ops_array(), config.H0.entries
    lam, dt, hbar = config.lambda_ito, config.grid.dt, config.hbar
    n, d = psi0.shape
    K = config.grid.n_steps
    states = np.empty((n, K + 1, d), dtype=complex)
    norms = np.ones((n, K + 1))
    psi, _ = _renorm(psi0)
    states[:, 0] = psi
    H2 = H0 @ H0
    sl = np.sqrt(lam)
    for k in range(K):
        Apsi = np.einsum("iab,nb->nia", A, psi)
        a = np.einsum("na,nia->ni", psi.conj(), Apsi).real
        Cpsi = Apsi - a[..., None] * psi[:, None, :]  # (A_j - a_j) psi
        V = np.einsum("nia,nia->ni", Cpsi.conj(), Cpsi).real
        rms = np.sqrt(2.0) * lam * dt * V.sum(axis=1) + 0.5 * dt**2 * _expect(psi, H2) / hbar**2
        if np.any(rms > config.max_norm_drift):
            bad = int(np.argmax(rms))
            raise StepRejectedError(
                f"step {k}: expected norm drift {rms[bad]:.2e} exceeds {config.max_norm_drift:.1e}; reduce dt"
            )
        CCpsi = np.einsum("iab,nib->nia", A, Cpsi) - a[..., None] * Cpsi
        dpsi = (-1j / hbar) * dt * (psi @ H0.T)
        dpsi += sl * np.einsum("ni,nia->na", dW[:, :, k], Cpsi)
        dpsi -= 0.5 * lam * dt * CCpsi.sum(axis=1)
        psi, nk = _renorm(psi + dpsi)
        norms[:, k + 1] = norms[:, k] * nk
        states[:, k + 1] = psi
    return states, norms


def _record(config, states, norms, seed, path_index) -> TrajectoryRecord:
    A = config.ops_array()
    ex = np.stack([_expect(states, a) for a in A], axis=-1)
    return TrajectoryRecord(config.grid.times, states, norms, ex, seed, path_index)


def integrate_ito_white(config: SSEConfig, psi0, seed: int, path_index: int = 0) -> TrajectoryRecord:
    """One trajectory of the Ito white-noise collapse equation."""
    d = config.dim
    dW = wiener_increments(seed, [path_index], config.n_channels, config.grid.n_steps, config.grid.dt)
    states, norms = _run_ito(config, _psi_batch(psi0, 1, d), dW)
    return _record(config, states[0], norms[0], seed, path_index)


def integrate_nonmarkovian(config: SSEConfig, psi0, noise_path, seed: int = 0, path_index: int = 0) -> TrajectoryRecord:
    """One trajectory of the coloured-noise equation along a given noise path.

    ``noise_path`` is an (N, K+1) complex array or a one-path NoisePathSet.
    """
    h = _noise_batch(noise_path, config.n_channels, config.grid.n_points)[:1]
    states, norms = _run_nonmarkovian(config, _psi_batch(psi0, 1, config.dim), h)
    return _record(config, states[0], norms[0], seed, path_index)


def integrate_stratonovich_markovian(config: SSEConfig, psi0, noise_path, seed: int = 0, path_index: int = 0) -> TrajectoryRecord:
    """One trajectory of the Markovian limit along a given noise path."""
    _markov_channels(config.kernel)
    h = _noise_batch(noise_path, config.n_channels, config.grid.n_points)[:1]
    states, norms = _run_stratonovich(config, _psi_batch(psi0, 1, config.dim), h)
    return _record(config, states[0], norms[0], seed, path_index)


# --------------------------------------------------------------------------
# Ensembles


@dataclass
class EnsembleStats:
    """Ensemble averages over trajectories.

    ``rho_se`` holds the standard errors of the real and imaginary parts of
    the mean density matrix as ``se_re + 1j * se_im``.
    """

    times: np.ndarray
    rho_mean: np.ndarray  # (K+1, d, d)
    rho_se: np.ndarray
    mean_A: np.ndarray  # (K+1, N): mean of <A_i>_t
    se_A: np.ndarray
    var_A: np.ndarray  # spread of <A_i>_t across trajectories
    mean_A2: np.ndarray  # mean of <A_i^2>_t
    se_A2: np.ndarray
    mean_V: np.ndarray  # mean of V_{A_i}(t)
    se_V: np.ndarray
    final_V: np.ndarray  # (n_traj, N) per-trajectory variance at the last time
    final_A: np.ndarray  # (n_traj, N) per-trajectory <A_i> at the last time
    max_norm_drift: float
    n_traj: int
    base_seed: int
    scheme: str = ""

    def trace_distance_se(self) -> np.ndarray:
        """Scale of the Monte-Carlo error of the trace distance, per time."""
        return np.sqrt(0.5 * np.sum(np.abs(self.rho_se) ** 2, axis=(1, 2)))

    def to_csv(self, path) -> None:
        d = self.rho_mean.shape[1]
        N = self.mean_V.shape[1]
        head = ["t"]
        for a in range(d):
            for b in range(d):
                head += [f"re_rho_{a}{b}", f"im_rho_{a}{b}"]
        head += [f"mean_V_{i}" for i in range(N)] + [f"se_V_{i}" for i in range(N)]
        for a in range(d):
            for b in range(d):
                head += [f"se_re_rho_{a}{b}", f"se_im_rho_{a}{b}"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(head)
            for k, t in enumerate(self.times):
                row = [t]
                for x in self.rho_mean[k].ravel():
                    row += [x.real, x.imag]
                row += list(self.mean_V[k]) + list(self.se_V[k])
                for x in self.rho_se[k].ravel():
                    row += [x.real, x.imag]
                w.writerow([f"{v:.17g}" for v in row])


def _moments(x: np.ndarray):
    m = x.mean(0)
    return m, ((x - m) ** 2).sum(0)


def _sums(config: SSEConfig, states: np.ndarray, norms: np.ndarray) -> dict:
    """Per-chunk means and centred second moments (merged later in index order)."""
    A = config.ops_array()
    rho = np.einsum("nka,nkb->nkab", states, states.conj())
    ex = np.stack([_expect(states, a) for a in A], axis=-1)
    ex2 = np.stack([_expect(states, a @ a) for a in A], axis=-1)
    V = np.clip(ex2 - ex**2, 0.0, None)
    step = norms[:, 1:] / norms[:, :-1] if norms.shape[1] > 1 else np.ones((len(norms), 1))
    out = {"final_V": V[:, -1], "final_A": ex[:, -1], "n": len(states),
           "drift": float(np.max(np.abs(step - 1.0)))}
    for k, x in (("rho_re", rho.real), ("rho_im", rho.imag), ("A", ex), ("A2", ex2), ("V", V)):
        out[k] = _moments(x)
    return out


MOMENT_KEYS = ("rho_re", "rho_im", "A", "A2", "V")


def _merge(a, na, b, nb):
    """Chan et al. pairwise update of (mean, M2)."""
    (ma, qa), (mb, qb) = a, b
    n = na + nb
    d = mb - ma
    return ma + d * (nb / n), qa + qb + d**2 * (na * nb / n)


def _chunk(config: SSEConfig, psi0, base_seed: int, start: int, n: int, factor, mem) -> dict:
    idx = list(range(start, start + n))
    psi = _psi_batch(psi0, n, config.dim)
    if config.scheme == "ito":
        dW = wiener_increments(base_seed, idx, config.n_channels, config.grid.n_steps, config.grid.dt)
        states, norms = _run_ito(config, psi, dW)
    else:
        h = sample_paths(config.kernel, config.grid, n, base_seed, start=start, factor=factor).paths
        if config.scheme == "nonmarkovian":
            states, norms = _run_nonmarkovian(config, psi, h, mem)
        else:
            states, norms = _run_stratonovich(config, psi, h)
    return _sums(config, states, norms)


def _locate_failure(config, psi0, base_seed, start, n, factor, mem, err):
    for p in range(start, start + n):
        try:
            _chunk(config, psi0, base_seed, p, 1, factor, mem)
        except Exception as e:  # noqa: BLE001 - re-raised with the replay key
            raise TrajectoryFailure(base_seed, p, e) from e
    raise TrajectoryFailure(base_seed, start, err) from err


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("COLLAPSE_LAB_THREADS", "1")))
    except ValueError:
        return 1


def run_ensemble(config: SSEConfig, psi0, n_traj: int, base_seed: int, *, chunk_size: int = 512) -> EnsembleStats:
    """Run ``n_traj`` trajectories; trajectory p uses the noise keyed by (base_seed, p).

    Chunks are reduced in index order, so results do not depend on the
    number of worker threads (``COLLAPSE_LAB_THREADS``).
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    factor = mem = None
    if config.scheme != "ito":
        factor = covariance_factor(build_augmented_covariance(config.kernel, config.grid))
        if config.scheme == "nonmarkovian":
            mem = memory_operators(config)
        else:
            _markov_channels(config.kernel)
    starts = list(range(0, n_traj, chunk_size))

    def work(s):
        n = min(chunk_size, n_traj - s)
        try:
            return _chunk(config, psi0, base_seed, s, n, factor, mem)
        except Exception as e:  # noqa: BLE001
            _locate_failure(config, psi0, base_seed, s, n, factor, mem, e)

    workers = min(n_threads(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    tot = {k: parts[0][k] for k in MOMENT_KEYS}
    seen = parts[0]["n"]
    for p in parts[1:]:
        for k in MOMENT_KEYS:
            tot[k] = _merge(tot[k], seen, p[k], p["n"])
        seen += p["n"]
    n = n_traj

    def se(key):
        m2 = tot[key][1]
        if n < 2:
            return np.zeros_like(m2)
        return np.sqrt(m2 / (n * (n - 1)))

    rho = tot["rho_re"][0] + 1j * tot["rho_im"][0]
    mA, mA2, mV = tot["A"][0], tot["A2"][0], tot["V"][0]
    return EnsembleStats(
        times=config.grid.times,
        rho_mean=rho,
        rho_se=se("rho_re") + 1j * se("rho_im"),
        mean_A=mA, se_A=se("A"),
        var_A=tot["A"][1] / n,
        mean_A2=mA2, se_A2=se("A2"),
        mean_V=mV, se_V=se("V"),
        final_V=np.concatenate([p["final_V"] for p in parts]),
        final_A=np.concatenate([p["final_A"] for p in parts]),
        max_norm_drift=max(p["drift"] for p in parts),
        n_traj=n, base_seed=base_seed, scheme=config.scheme,
    )
