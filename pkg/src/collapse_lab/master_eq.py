"""Averaged dynamics: generators, propagation and analytic decoherence factors.

Density matrices are vectorized row-major, ``vec(rho)[a*d + b] = rho[a, b]``,
so the superoperator of ``rho -> X rho Y`` is ``kron(X, Y.T)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .constants import DELTA_ENDPOINT_WEIGHT
from .noise import CorrelationKernel, SpatialKernel, TimeGrid
from .quantum_core import (
    DensityMatrix,
    DimensionError,
    NonCommutingError,
    as_matrix,
    as_vector,
    commutator,
    spectral_norm,
)
from .constants import COMMUTATION_TOL


class PositivityViolation(RuntimeError):
    def __init__(self, t: float, min_eig: float):
        self.t, self.min_eigenvalue = t, min_eig
        super().__init__(
            f"rho lost positivity at t={t:.4g} (smallest eigenvalue {min_eig:.3e}); "
            "the second-order equation is outside its range of validity"
        )


@dataclass(frozen=True)
class Superoperator:
    dim: int
    matrix: np.ndarray  # (dim^2, dim^2)

    def apply(self, rho) -> np.ndarray:
        r = as_matrix(rho)
        return (self.matrix @ r.reshape(-1)).reshape(self.dim, self.dim)

    def __add__(self, other: "Superoperator") -> "Superoperator":
        return Superoperator(self.dim, self.matrix + other.matrix)

    def __mul__(self, c) -> "Superoperator":
        return Superoperator(self.dim, self.matrix * c)

    __rmul__ = __mul__

    def trace_error(self) -> float:
        """max |d Tr(rho)/dt| over matrix units."""
        tr = np.eye(self.dim).reshape(-1)
        return float(np.max(np.abs(tr @ self.matrix)))

    def hermiticity_error(self) -> float:
        """max deviation from L(rho^dag) = L(rho)^dag over matrix units."""
        d = self.dim
        worst = 0.0
        for a in range(d):
            for b in range(d):
                e = np.zeros((d, d), dtype=complex)
                e[a, b] = 1.0
                worst = max(worst, float(np.max(np.abs(self.apply(e.T) - self.apply(e).conj().T))))
        return worst

    def to_dict(self) -> dict:
        return {"dim": self.dim, "re": self.matrix.real.tolist(), "im": self.matrix.imag.tolist()}


def _left(X):
    return np.kron(X, np.eye(X.shape[0]))


def _right(Y):
    return np.kron(np.eye(Y.shape[0]), Y.T)


def superop_commutator(H) -> np.ndarray:
    H = as_matrix(H)
    return _left(H) - _right(H)


def superop_double_commutator(A, C) -> np.ndarray:
    """rho -> [A, [C, rho]]."""
    return _left(A @ C) - _left(A) @ _right(C) - _left(C) @ _right(A) + _right(C @ A)


def superop_comm_anticomm(A, C) -> np.ndarray:
    """rho -> [A, {C, rho}]."""
    return _left(A @ C) + _left(A) @ _right(C) - _left(C) @ _right(A) - _right(C @ A)


class _Heisenberg:
    """A(s) = e^{i H s / hbar} A e^{-i H s / hbar} from one eigendecomposition of H."""

    def __init__(self, H0, hbar: float):
        H = as_matrix(H0)
        self.trivial = not np.any(H)
        if not self.trivial:
            self.w, self.V = np.linalg.eigh(0.5 * (H + H.conj().T))
        self.hbar = hbar

    def __call__(self, A: np.ndarray, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.trivial:
            return np.broadcast_to(A, s.shape + A.shape)
        Ae = self.V.conj().T @ A @ self.V
        ph = np.exp(1j * np.outer(s, self.w) / self.hbar)  # (n, d)
        M = ph[:, :, None] * Ae[None] * ph.conj()[:, None, :]
        return np.einsum("ab,nbc,dc->nad", self.V, M, self.V.conj())


def _trap_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    if n == 1:
        return np.zeros(1)
    w[0] = w[-1] = 0.5 * h
    return w


def memory_operators(H0, collapse_ops, kernel: CorrelationKernel, t: float, hbar: float = 1.0, n_quad: int = 401):
    """C^R_i, C^I_i = sum_j int_0^t D^{R,I}_ij(t, tau) A_j(tau - t) dtau.

    Regular parts by trapezoid on ``n_quad`` points; delta parts with the
    endpoint weight.
    """
    A = np.array([as_matrix(a) for a in collapse_ops])
    N = len(A)
    CR = np.zeros_like(A)
    CI = np.zeros_like(A)
    if not kernel.is_markovian and t > 0:
        tau = np.linspace(0.0, t, n_quad)
        wt = _trap_weights(n_quad, tau[1] - tau[0])
        D = kernel.D(t, tau)  # (N, N, n)
        heis = _Heisenberg(H0, hbar)
        for j in range(N):
            Aj = heis(A[j], tau - t)  # (n, d, d)
            CR += np.einsum("il,lab->iab", D[:, j].real * wt, Aj)
            CI += np.einsum("il,lab->iab", D[:, j].imag * wt, Aj)
    dD, _ = kernel.delta_parts()
    if np.any(dD):
        w = DELTA_ENDPOINT_WEIGHT
        CR += w * np.einsum("ij,jab->iab", dD.real, A)
        CI += w * np.einsum("ij,jab->iab", dD.imag, A)
    return CR, CI


def build_generator(H0, collapse_ops: Sequence, kernel: CorrelationKernel, xi: float, t: float,
                    hbar: float = 1.0, n_quad: int = 401) -> Superoperator:
    """Second-order averaged generator at time t (memory integrals over [0, t]).

    L rho = -(i/hbar)[H0, rho]
            - (xi^2/hbar^2) sum_i ([A_i, [C^R_i, rho]] + i [A_i, {C^I_i, rho}])
    """
    H = as_matrix(H0)
    d = H.shape[0]
    ops = [as_matrix(a) for a in collapse_ops]
    for k, a in enumerate(ops):
        if a.shape != (d, d):
            raise DimensionError(f"collapse operator {k} has shape {a.shape}, H0 is {d}x{d}")
    if kernel.n_channels != len(ops):
        raise DimensionError(f"kernel has {kernel.n_channels} channels, {len(ops)} operators given")
    L = (-1j / hbar) * superop_commutator(H)
    if xi != 0.0:
        CR, CI = memory_operators(H, ops, kernel, t, hbar, n_quad)
        acc = np.zeros((d * d, d * d), dtype=complex)
        for i, a in enumerate(ops):
            acc += superop_double_commutator(a, CR[i])
            if np.any(CI[i]):
                acc += 1j * superop_comm_anticomm(a, CI[i])
        L = L - (xi**2 / hbar**2) * acc
    return Superoperator(d, L)


Schedule = Union[Superoperator, Callable[[float], Superoperator]]


def generator_schedule(H0, collapse_ops, kernel: CorrelationKernel, xi: float, hbar: float = 1.0,
                       n_quad: int = 401) -> Schedule:
    """Constant generator for delta kernels, otherwise a cached t -> generator map."""
    if kernel.is_markovian:
        return build_generator(H0, collapse_ops, kernel, xi, 0.0, hbar, n_quad)
    cache = {}

    def at(t):
        key = round(float(t), 12)
        if key not in cache:
            cache[key] = build_generator(H0, collapse_ops, kernel, xi, t, hbar, n_quad)
        return cache[key]

    return at


@dataclass
class Propagation:
    times: np.ndarray
    rhos: np.ndarray  # (K+1, d, d)
    min_eigenvalues: np.ndarray
    trace_errors: np.ndarray

    def final(self) -> DensityMatrix:
        return DensityMatrix(self.rhos[-1])


def propagate(rho0, schedule: Schedule, grid: TimeGrid, *, positivity_tol: float = -1e-6,
              raise_on_violation: bool = True) -> Propagation:
    """RK4 integration of d vec(rho)/dt = L(t) vec(rho).

    The generator is evaluated at the stage times. The smallest eigenvalue of
    rho is logged at every step; falling below ``positivity_tol`` raises
    :class:`PositivityViolation` unless disabled.
    """
    r0 = as_matrix(rho0.entries if isinstance(rho0, DensityMatrix) else rho0)
    d = r0.shape[0]
    get = (lambda t: schedule) if isinstance(schedule, Superoperator) else schedule
    K, dt = grid.n_steps, grid.dt
    times = grid.times
    rhos = np.empty((K + 1, d, d), dtype=complex)
    mins = np.empty(K + 1)
    terr = np.empty(K + 1)
    v = r0.reshape(-1).astype(complex)
    for k in range(K + 1):
        if k:
            t = times[k - 1]
            L1, L2, L3 = get(t).matrix, get(t + 0.5 * dt).matrix, get(t + dt).matrix
            k1 = L1 @ v
            k2 = L2 @ (v + 0.5 * dt * k1)
            k3 = L2 @ (v + 0.5 * dt * k2)
            k4 = L3 @ (v + dt * k3)
            v = v + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        r = v.reshape(d, d)
        rhos[k] = r
        mins[k] = np.linalg.eigvalsh(0.5 * (r + r.conj().T)).min()
        terr[k] = abs(np.trace(r) - 1.0)
        if raise_on_violation and mins[k] < positivity_tol:
            raise PositivityViolation(float(times[k]), float(mins[k]))
    return Propagation(times, rhos, mins, terr)


def trace_distance(rho, sigma) -> float:
    diff = as_matrix(rho) - as_matrix(sigma)
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T)))))


# --------------------------------------------------------------------------
# Analytic factors for H0 = 0


def _inner_integrals(fn, t: float, n_quad: int) -> tuple:
    """I(tau_k) = int_0^{tau_k} fn(tau_k, s) ds on a uniform tau grid over [0, t].

    ``fn(tau, s)`` returns an (N, N, ...) array. Returns (tau, I) with I of
    shape (n_quad, N, N).
    """
    tau = np.linspace(0.0, t, n_quad)
    h = tau[1] - tau[0] if n_quad > 1 else 0.0
    vals = fn(tau[:, None], tau[None, :])  # (N, N, n, n)
    out = np.zeros((n_quad,) + vals.shape[:2], dtype=vals.dtype)
    for k in range(1, n_quad):
        w = _trap_weights(k + 1, h)
        out[k] = vals[:, :, k, :k + 1] @ w
    return tau, out


def _nested_kernel_integral(kernel: CorrelationKernel, t: float, which: str, n_quad: int) -> np.ndarray:
    """int_0^t dtau int_0^tau ds K(tau, s) as an (N, N) matrix, K = D or S."""
    N = kernel.n_channels
    total = np.zeros((N, N), dtype=complex)
    if t <= 0:
        return total
    if not kernel.is_markovian:
        fn = kernel.D if which == "D" else kernel.S
        tau, inner = _inner_integrals(fn, t, n_quad)
        total += np.einsum("k,kij->ij", _trap_weights(n_quad, tau[1] - tau[0]), inner)
    dD, dS = kernel.delta_parts()
    total += DELTA_ENDPOINT_WEIGHT * t * (dD if which == "D" else dS)
    return total


def decoherence_exponent(alpha, beta, kernel: CorrelationKernel, xi: float, t: float,
                         hbar: float = 1.0, n_quad: int = 801) -> complex:
    """Exponent E with rho_t(alpha, beta) = exp(E) rho_0(alpha, beta), for H0 = 0.

    E = -(xi^2/hbar^2) sum_ij int_0^t dtau int_0^tau ds
            (alpha_i - beta_i) (D_ij(tau, s) alpha_j - D*_ij(tau, s) beta_j)

    which is the exact solution of the second-order master equation in the
    joint eigenbasis of the collapse operators.
    """
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    if xi == 0.0 or t <= 0:
        return 0j
    G = _nested_kernel_integral(kernel, t, "D", n_quad)
    val = np.einsum("i,ij,j->", a - b, G, a) - np.einsum("i,ij,j->", a - b, G.conj(), b)
    return complex(-(xi**2 / hbar**2) * val)


def memory_F_matrix(kernel: CorrelationKernel, tau: float, n_quad: int = 801) -> np.ndarray:
    """F_ij(tau) = int_0^tau (D^R_ij - S^R_ij)(tau, s) ds."""
    N = kernel.n_channels
    F = np.zeros((N, N))
    if tau > 0 and not kernel.is_markovian:
        s = np.linspace(0.0, tau, n_quad)
        w = _trap_weights(n_quad, s[1] - s[0])
        F += ((kernel.D(tau, s) - kernel.S(tau, s)).real @ w)
    dD, dS = kernel.delta_parts()
    return F + DELTA_ENDPOINT_WEIGHT * (dD - dS).real


def memory_F(kernel: CorrelationKernel, i: int, j: int, tau: float, n_quad: int = 801) -> float:
    return float(memory_F_matrix(kernel, tau, n_quad)[i, j])


def memory_F_positivity(kernel: CorrelationKernel, taus) -> float:
    """Smallest eigenvalue of the symmetrized F(tau) over the given taus."""
    worst = np.inf
    for tau in np.atleast_1d(taus):
        F = memory_F_matrix(kernel, float(tau))
        worst = min(worst, float(np.linalg.eigvalsh(0.5 * (F + F.T)).min()))
    return worst


def _integrated_F(kernel: CorrelationKernel, t: float, n_quad: int) -> np.ndarray:
    G = _nested_kernel_integral(kernel, t, "D", n_quad) - _nested_kernel_integral(kernel, t, "S", n_quad)
    return G.real


def variance_decay_prediction(psi0, A, collapse_ops: Sequence, kernel: CorrelationKernel, xi: float, t,
                              hbar: float = 1.0, n_quad: int = 801):
    """Second-order prediction of E[V_A(t)] for H0 = 0.

    E[V_A(t)] = V_A(0) - (4 xi^2 / hbar^2) sum_ij int_0^t F_ij c_i c_j,
    c_i = <A A_i>_0 - <A>_0 <A_i>_0. Accepts scalar or array t.
    """
    v = as_vector(psi0)
    v = v / np.linalg.norm(v)
    Am = as_matrix(A)
    ops = [as_matrix(o) for o in collapse_ops]
    for i, o in enumerate(ops):
        n = spectral_norm(commutator(Am, o))
        if n > COMMUTATION_TOL:
            raise NonCommutingError(-1, i, n)

    def ex(M):
        return float(np.vdot(v, M @ v).real)

    a = ex(Am)
    V0 = ex(Am @ Am) - a * a
    c = np.array([ex(Am @ o) - a * ex(o) for o in ops])
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.array([V0 - (4 * xi**2 / hbar**2) * c @ _integrated_F(kernel, float(s), n_quad) @ c for s in ts])
    return float(out[0]) if np.ndim(t) == 0 else out


# --------------------------------------------------------------------------
# Center-of-mass dynamics on a 1-D lattice


@dataclass(frozen=True)
class PositionGrid:
    """n-site lattice along x with a Gauss-Hermite momentum quadrature.

    Q integrals use the product rule int f(Q) dQ = q sum_k w_k e^{u_k^2} f(q u_k)
    in each Cartesian direction, with ``q_scale`` the momentum scale (hbar / r_C
    for Gaussian kernels). Only Q_x kicks act on the lattice; Q_y and Q_z are
    integrated into the weights.
    """

    n_sites: int
    dx: float
    q_scale: float
    n_nodes: int = 32

    def __post_init__(self):
        if self.n_sites < 2 or self.dx <= 0:
            raise ValueError("PositionGrid needs n_sites >= 2 and dx > 0")
        if self.n_nodes < 1:
            raise ValueError("momentum quadrature is empty")
        if self.q_scale <= 0:
            raise ValueError("q_scale must be positive")

    @property
    def sites(self) -> np.ndarray:
        return (np.arange(self.n_sites) - 0.5 * (self.n_sites - 1)) * self.dx

    def nodes(self):
        """Momentum nodes (symmetric about 0) and their weights."""
        u, w = np.polynomial.hermite.hermgauss(self.n_nodes)
        return self.q_scale * u, self.q_scale * w * np.exp(u**2)

    def kick(self, Qx: float, hbar: float = 1.0) -> np.ndarray:
        return np.diag(np.exp(1j * Qx * self.sites / hbar))


def lattice_laplacian(grid: PositionGrid) -> np.ndarray:
    """Three-point second difference with hard walls."""
    n = grid.n_sites
    L = -2.0 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
    return L / grid.dx**2


def _kick_weights(fn, grid: PositionGrid):
    """Qx nodes and W(Qx) = int dQy dQz fn(Q) by the product rule."""
    q, wq = grid.nodes()
    Q = np.stack(np.meshgrid(q, q, q, indexing="ij"), axis=-1)  # (n, n, n, 3)
    vals = fn(Q)
    return q, np.einsum("abc,a,b,c->a", vals, wq, wq, wq)


def _kick_generator(grid: PositionGrid, H0cm, WR, WI, q, temporal, delta_weight: float,
                    t: float, hbar: float, n_quad: int) -> Superoperator:
    d = grid.n_sites
    H = np.zeros((d, d), dtype=complex) if H0cm is None else as_matrix(H0cm)
    if H.shape != (d, d):
        raise DimensionError(f"H0cm has shape {H.shape}, lattice has {d} sites")
    L = (-1j / hbar) * superop_commutator(H)
    heis = _Heisenberg(H, hbar)
    if temporal is not None and t > 0:
        tau = np.linspace(0.0, t, n_quad)
        gw = temporal(t - tau) * _trap_weights(n_quad, tau[1] - tau[0])
    acc = np.zeros((d * d, d * d), dtype=complex)
    for a, Qa in enumerate(q):
        if WR[a] == 0 and (WI is None or WI[a] == 0):
            continue
        K = grid.kick(Qa, hbar)
        if temporal is None:
            C = delta_weight * K
        elif t > 0:
            C = np.einsum("l,lab->ab", gw, heis(K, tau - t))
        else:
            continue
        Kd = K.conj().T
        acc += WR[a] * superop_double_commutator(Kd, C)
        if WI is not None and WI[a] != 0:
            acc += 1j * WI[a] * superop_comm_anticomm(Kd, C)
    return Superoperator(d, L - acc)


def build_cm_generator(massdist, kernel: SpatialKernel, grid: PositionGrid, H0cm=None, xi: float = 1.0,
                       t: float = 0.0, *, hbar: float = 1.0, c: float = 1.0, mass_unit: float = 1.0,
                       coupling: Optional[float] = None, n_quad: int = 201) -> Superoperator:
    """Center-of-mass generator of a rigid body with amplification factor A(Q).

    The collapse part is -(coupling / (2 pi hbar)^3) int dQ A(Q) times the
    kick double commutator weighted by Dtilde^R, plus i times the
    commutator-anticommutator weighted by Dtilde^I. ``coupling`` defaults to
    xi^2 c^4 / hbar^2; ``mass_unit`` converts the distribution's masses.
    """
    from .amplification import amplification_factor

    g = xi**2 * c**4 / hbar**2 if coupling is None else coupling
    pref = g / (2 * np.pi * hbar) ** 3

    def weight(spatial):
        def fn(Q):
            return pref * spatial(np.linalg.norm(Q, axis=-1)) * amplification_factor(massdist, Q, hbar) * mass_unit**2
        return fn

    q, WR = _kick_weights(weight(kernel.DR), grid)
    WI = None if kernel.spatial_I is None else _kick_weights(weight(kernel.DI), grid)[1]
    tau0 = kernel.tau0 if kernel.tau0 is not None else 0.0
    return _kick_generator(grid, H0cm, WR, WI, q, kernel.temporal, DELTA_ENDPOINT_WEIGHT * tau0, t, hbar, n_quad)


def csl_generator(lam: float, r_C: float, massdist, grid: PositionGrid, H0cm=None, *, hbar: float = 1.0,
                  m0: float = 1.0, mass_unit: float = 1.0) -> Superoperator:
    """CSL center-of-mass generator, weight lam (4 pi r_C^2)^{3/2} A(Q)/m0^2 exp(-r_C^2 Q^2/hbar^2)."""
    from .amplification import amplification_factor

    if lam < 0 or r_C <= 0:
        raise ValueError("need lam >= 0 and r_C > 0")
    pref = lam * (4 * np.pi * r_C**2) ** 1.5 / (2 * np.pi * hbar) ** 3

    def fn(Q):
        Q2 = np.sum(Q**2, axis=-1)
        return pref * amplification_factor(massdist, Q, hbar) * mass_unit**2 / m0**2 * np.exp(-(r_C**2) * Q2 / hbar**2)

    q, WR = _kick_weights(fn, grid)
    return _kick_generator(grid, H0cm, WR, None, q, None, 1.0, 0.0, hbar, 0)
