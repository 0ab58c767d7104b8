"""Complex Gaussian noise: correlation kernels, exact path sampling, estimators.

A zero-mean complex Gaussian process h_i(t) is fixed by its correlator
D_ij(t, s) = E[h_i*(t) h_j(s)] and pseudo-correlator S_ij(t, s) = E[h_i(t) h_j(s)].
Kernels are split into a regular part (an ordinary function of t and s) and
an optional delta part ``delta(t - s) * Dtilde``. On a time grid the delta is
represented as a Kronecker delta divided by dt.

Amplitude conventions of the built-in families (the coupling strength xi is
always kept separate):

* ``white``: D = tau0 delta(t - s) on every channel, independent channels.
* ``ou``: D = amplitude * exp(-|t - s| / tau_c) * exp(i omega (t - s)).
* ``gaussian``: D = amplitude * exp(-(t - s)^2 / (2 tau_c^2)).
* ``markovian``: D = delta(t - s) * Dtilde, S = delta(t - s) * Stilde with
  user-supplied channel matrices.

For each family the pseudo-correlator is chosen with ``pseudo``: ``"zero"``
(circular noise, S = 0) or ``"equal"`` (S = D, purely real noise).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FloatFn = Callable[[np.ndarray], np.ndarray]


class NotPositiveSemidefinite(ValueError):
    def __init__(self, min_eig: float, max_eig: float):
        self.min_eigenvalue = min_eig
        super().__init__(
            f"augmented covariance is not PSD: most negative eigenvalue {min_eig:.3e} "
            f"(largest {max_eig:.3e}); the (D, S) pair is inconsistent"
        )


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 0:
            raise ValueError("grid needs dt > 0 and n_steps >= 0")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @classmethod
    def from_duration(cls, t_final: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        return cls(dt=dt, n_steps=int(round((t_final - t0) / dt)), t0=t0)


@dataclass(frozen=True)
class CorrelationKernel:
    # lag_D(u) with u = t - s returns an (N, N, *u.shape) array; None = no regular part
    n_channels: int
    family: str
    params: dict = field(default_factory=dict)
    lag_D: Optional[Callable] = None
    lag_S: Optional[Callable] = None
    delta_D: Optional[np.ndarray] = None
    delta_S: Optional[np.ndarray] = None
    correlation_time: Optional[float] = None
    stationary: bool = True

    @property
    def is_markovian(self) -> bool:
        return self.lag_D is None and self.lag_S is None

    def _zero(self, u):
        return np.zeros((self.n_channels, self.n_channels) + np.shape(u), dtype=complex)

    def D(self, t, s) -> np.ndarray:
        """Regular part of D_ij(t, s) as an (N, N, ...) array."""
        u = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return self._zero(u) if self.lag_D is None else self.lag_D(u)

    def S(self, t, s) -> np.ndarray:
        u = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return self._zero(u) if self.lag_S is None else self.lag_S(u)

    def delta_parts(self):
        n = self.n_channels
        z = np.zeros((n, n), dtype=complex)
        d = z if self.delta_D is None else np.asarray(self.delta_D, dtype=complex)
        s = z if self.delta_S is None else np.asarray(self.delta_S, dtype=complex)
        return d, s

    def on_grid(self, grid: TimeGrid):
        """(D, S) sampled on grid pairs, shape (N, N, K+1, K+1); delta -> 1/dt."""
        t = grid.times
        u = t[:, None] - t[None, :]
        d, s = self.D(t[:, None], t[None, :]), self.S(t[:, None], t[None, :])
        dd, ds = self.delta_parts()
        if np.any(dd) or np.any(ds):
            eye = np.eye(u.shape[0]) / grid.dt
            d = d + dd[:, :, None, None] * eye
            s = s + ds[:, :, None, None] * eye
        return d, s


def _channel_eye(n):
    return np.eye(n, dtype=complex)


def _pseudo(pseudo: str, fn_or_mat):
    if pseudo == "zero":
        return None
    if pseudo == "equal":
        return fn_or_mat
    raise ValueError(f"pseudo must be 'zero' or 'equal', got {pseudo!r}")


def white(tau0: float, n_channels: int = 1, pseudo: str = "zero") -> CorrelationKernel:
    if tau0 <= 0:
        raise ValueError("white kernel needs tau0 > 0")
    d = tau0 * _channel_eye(n_channels)
    return CorrelationKernel(
        n_channels, "white", {"tau0": tau0, "pseudo": pseudo}, delta_D=d, delta_S=_pseudo(pseudo, d)
    )


def markovian(Dtilde, Stilde=None) -> CorrelationKernel:
    d = np.atleast_2d(np.asarray(Dtilde, dtype=complex))
    s = None if Stilde is None else np.atleast_2d(np.asarray(Stilde, dtype=complex))
    if d.shape[0] != d.shape[1] or np.max(np.abs(d - d.conj().T)) > 1e-12:
        raise ValueError("Dtilde must be a hermitian channel matrix")
    if s is not None and np.max(np.abs(s - s.T)) > 1e-12:
        raise ValueError("Stilde must be symmetric")
    return CorrelationKernel(d.shape[0], "markovian", {}, delta_D=d, delta_S=s)


def ornstein_uhlenbeck(
    tau_c: float, amplitude: float = 1.0, omega: float = 0.0, n_channels: int = 1, pseudo: str = "zero"
) -> CorrelationKernel:
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    if pseudo == "equal" and omega != 0.0:
        raise ValueError("S = D needs a real symmetric kernel (omega = 0)")
    eye = _channel_eye(n_channels)

    def lag(u):
        u = np.asarray(u, dtype=float)
        f = amplitude * np.exp(-np.abs(u) / tau_c) * np.exp(1j * omega * u)
        return eye.reshape(eye.shape + (1,) * u.ndim) * f

    params = {"tau_c": tau_c, "amplitude": amplitude, "omega": omega, "pseudo": pseudo}
    return CorrelationKernel(n_channels, "ou", params, lag_D=lag, lag_S=_pseudo(pseudo, lag), correlation_time=tau_c)


def gaussian(tau_c: float, amplitude: float = 1.0, n_channels: int = 1, pseudo: str = "zero") -> CorrelationKernel:
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    eye = _channel_eye(n_channels)

    def lag(u):
        u = np.asarray(u, dtype=float)
        f = amplitude * np.exp(-0.5 * (u / tau_c) ** 2)
        return eye.reshape(eye.shape + (1,) * u.ndim) * (f + 0j)

    params = {"tau_c": tau_c, "amplitude": amplitude, "pseudo": pseudo}
    return CorrelationKernel(n_channels, "gaussian", params, lag_D=lag, lag_S=_pseudo(pseudo, lag), correlation_time=tau_c)


def kernel_from_dict(desc: dict) -> CorrelationKernel:
    """Build a kernel from ``{"family": ..., "params": {...}, "n_channels": N}``."""
    family = desc["family"]
    p = dict(desc.get("params", {}))
    n = int(desc.get("n_channels", 1))
    pseudo = p.pop("pseudo", "zero")
    if family == "white":
        return white(float(p["tau0"]), n, pseudo)
    if family == "ou":
        return ornstein_uhlenbeck(float(p["tau_c"]), float(p.get("amplitude", 1.0)), float(p.get("omega", 0.0)), n, pseudo)
    if family == "gaussian":
        return gaussian(float(p["tau_c"]), float(p.get("amplitude", 1.0)), n, pseudo)
    if family == "markovian":
        return markovian(np.asarray(p["Dtilde"]), None if "Stilde" not in p else np.asarray(p["Stilde"]))
    raise ValueError(f"unknown kernel family {family!r}")


# --------------------------------------------------------------------------
# Momentum-space kernels for the mass-density coupling


@dataclass(frozen=True)
class SpatialKernel:
    """Isotropic Fourier-space kernel Dtilde^{R/I}(Q, s).

    ``spatial_R(Q)`` and ``spatial_I(Q)`` take |Q| arrays. The time
    dependence is either a delta of weight ``tau0`` at s = 0 (``temporal``
    is None) or the regular function ``temporal(s)``; it is shared by the
    real and imaginary parts. ``q_scale`` is the momentum scale used to
    place quadrature nodes (hbar / r_C for Gaussian kernels).
    """

    spatial_R: FloatFn
    q_scale: float
    spatial_I: Optional[FloatFn] = None
    tau0: Optional[float] = None
    temporal: Optional[FloatFn] = None
    family: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def is_markovian(self) -> bool:
        return self.temporal is None

    def DR(self, Q) -> np.ndarray:
        return self.spatial_R(np.asarray(Q, dtype=float))

    def DI(self, Q) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        return np.zeros_like(Q) if self.spatial_I is None else self.spatial_I(Q)


def spatial_gaussian(r_C: float, tau0: float, hbar: float = 1.0, temporal: Optional[FloatFn] = None) -> SpatialKernel:
    """Dtilde^R(Q) = r_C^3 exp(-r_C^2 Q^2 / hbar^2), Markovian unless ``temporal`` given."""
    if r_C <= 0 or tau0 <= 0:
        raise ValueError("r_C and tau0 must be positive")

    def spatial(Q):
        return r_C**3 * np.exp(-(r_C * Q / hbar) ** 2)

    return SpatialKernel(
        spatial_R=spatial,
        q_scale=hbar / r_C,
        tau0=None if temporal is not None else tau0,
        temporal=temporal,
        family="spatial-gaussian",
        params={"r_C": r_C, "tau0": tau0, "hbar": hbar},
    )


# --------------------------------------------------------------------------
# Covariance and sampling


def build_augmented_covariance(kernel: CorrelationKernel, grid: TimeGrid) -> np.ndarray:
    """Covariance of the stacked real vector (Re h, Im h).

    Index order inside each half is channel-major: ``i * (K+1) + k``. The
    returned matrix is checked for positive semidefiniteness; eigenvalues
    above -1e-8 times the spectral radius count as zero.
    """
    d, s = kernel.on_grid(grid)
    n, k1 = kernel.n_channels, grid.n_points
    m = n * k1
    D = d.transpose(0, 2, 1, 3).reshape(m, m)
    S = s.transpose(0, 2, 1, 3).reshape(m, m)
    cov = np.empty((2 * m, 2 * m))
    cov[:m, :m] = 0.5 * (D + S).real
    cov[m:, m:] = 0.5 * (D - S).real
    cov[:m, m:] = 0.5 * (D + S).imag
    cov[m:, :m] = 0.5 * (S - D).imag
    cov = 0.5 * (cov + cov.T)
    _check_psd(cov)
    return cov


def _is_diagonal(cov):
    return not np.any(cov - np.diag(np.diag(cov)))


def _check_psd(cov):
    if not cov.size:
        return
    if _is_diagonal(cov):
        w = np.diag(cov)
    else:
        # a Cholesky with the tolerance as jitter succeeding is enough
        scale = float(np.max(np.abs(np.diag(cov))))
        try:
            np.linalg.cholesky(cov + 1e-8 * scale * np.eye(len(cov)))
            return
        except np.linalg.LinAlgError:
            w = np.linalg.eigvalsh(cov)
    top = float(np.max(np.abs(w)))
    if w.min() < -1e-8 * top:
        raise NotPositiveSemidefinite(float(w.min()), float(w.max()))


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Lower factor L with L L^T = cov.

    Rows with zero variance are kept exactly zero. Cholesky is tried with
    diagonal jitter up to 1e-10 (relative); if that still fails the factor
    comes from a clipped eigendecomposition.
    """
    if _is_diagonal(cov):
        return np.diag(np.sqrt(np.clip(np.diag(cov), 0.0, None)))
    live = np.flatnonzero(np.diag(cov) > 0)
    sub = cov[np.ix_(live, live)]
    scale = float(np.max(np.diag(sub))) if live.size else 0.0
    L = np.zeros_like(cov)
    if not live.size:
        return L
    for jitter in (0.0, 1e-14, 1e-12, 1e-10):
        try:
            Ls = np.linalg.cholesky(sub + jitter * scale * np.eye(live.size))
            break
        except np.linalg.LinAlgError:
            continue
    else:
        w, v = np.linalg.eigh(sub)
        Ls = v * np.sqrt(np.clip(w, 0.0, None))
    L[np.ix_(live, live)] = Ls
    return L


def path_rng(seed: int, path_index: int, channel: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, path index, channel)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(path_index), int(channel)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoisePathSet:
    grid: TimeGrid
    paths: np.ndarray  # (n_paths, n_channels, K+1) complex
    seed: int
    start: int = 0

    def __post_init__(self):
        p = np.array(self.paths, dtype=complex)
        p.setflags(write=False)
        object.__setattr__(self, "paths", p)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_channels(self) -> int:
        return self.paths.shape[1]

    def __getitem__(self, p) -> np.ndarray:
        return self.paths[p]


def sample_paths(
    kernel: CorrelationKernel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    start: int = 0,
    factor: Optional[np.ndarray] = None,
) -> NoisePathSet:
    """Draw paths ``start .. start + n_paths - 1`` of the seeded ensemble.

    Path p only depends on (seed, p), so chunks drawn separately concatenate
    to exactly the set drawn in one call.
    """
    n, k1 = kernel.n_channels, grid.n_points
    m = n * k1
    if n_paths == 0:
        return NoisePathSet(grid, np.zeros((0, n, k1), dtype=complex), seed, start)
    if factor is None:
        factor = covariance_factor(build_augmented_covariance(kernel, grid))
    eps = np.empty((n_paths, 2 * m))
    for q in range(n_paths):
        for i in range(n):
            z = path_rng(seed, start + q, i).standard_normal(2 * k1)
            eps[q, i * k1:(i + 1) * k1] = z[:k1]
            eps[q, m + i * k1:m + (i + 1) * k1] = z[k1:]
    if _is_diagonal(factor):
        z = eps * np.diag(factor)
    else:
        z = eps @ factor.T
    h = (z[:, :m] + 1j * z[:, m:]).reshape(n_paths, n, k1)
    return NoisePathSet(grid, h, seed, start)


@dataclass(frozen=True)
class CorrelatorEstimate:
    D: np.ndarray  # (N, N, K+1, K+1)
    S: np.ndarray
    D_se: np.ndarray
    S_se: np.ndarray
    n_paths: int


def estimate_correlators(paths: NoisePathSet) -> CorrelatorEstimate:
    """Sample moments E[h_i*(t) h_j(s)] and E[h_i(t) h_j(s)] with standard errors.

    The mean is known to be zero, so dividing by n gives unbiased moments.
    """
    n = paths.n_paths
    if n < 2:
        raise ValueError("need at least two paths")
    h = paths.paths
    N, k1 = h.shape[1], h.shape[2]
    H = h.reshape(n, N * k1)
    D = (H.conj().T @ H) / n
    S = (H.T @ H) / n
    A2 = np.abs(H) ** 2
    second = (A2.T @ A2) / n  # E|h_a|^2 |h_b|^2, the same for both moments
    D_se = np.sqrt(np.clip(second - np.abs(D) ** 2, 0, None) / (n - 1))
    S_se = np.sqrt(np.clip(second - np.abs(S) ** 2, 0, None) / (n - 1))

    def shape(x):
        return x.reshape(N, k1, N, k1).transpose(0, 2, 1, 3)

    return CorrelatorEstimate(shape(D), shape(S), shape(D_se), shape(S_se), n)


# --------------------------------------------------------------------------
# Binary path dump: "<4sHHII" header (magic, version, n_channels, K, n_paths),
# then t0, dt and the samples as interleaved little-endian (re, im) doubles.

_MAGIC = b"CLNP"
_HEADER = struct.Struct("<4sHHII")
_VERSION = 1


def write_paths(path, paths: NoisePathSet) -> None:
    arr = np.ascontiguousarray(paths.paths)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, paths.n_channels, paths.grid.n_steps, paths.n_paths))
        f.write(np.array([paths.grid.t0, paths.grid.dt], dtype="<f8").tobytes())
        f.write(arr.view(np.float64).astype("<f8").tobytes())


def read_paths(path, seed: int = 0) -> NoisePathSet:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, n_ch, K, n_paths = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a CLNP v{_VERSION} file")
    t0, dt = np.frombuffer(raw, dtype="<f8", count=2, offset=_HEADER.size)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size + 16)
    if data.size != 2 * n_paths * n_ch * (K + 1):
        raise ValueError(f"{path}: truncated record")
    h = data.view(np.complex128).reshape(n_paths, n_ch, K + 1)
    return NoisePathSet(TimeGrid(dt=float(dt), n_steps=K, t0=float(t0)), h.copy(), seed)
