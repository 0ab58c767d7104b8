"""Finite-dimensional states and operators.

Everything here is a thin immutable wrapper around dense complex numpy
arrays. The integrators in :mod:`collapse_lab.trajectories` work on raw
arrays for speed and only use these types at their boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .constants import COMMUTATION_TOL, HERMITIAN_ATOL


class DimensionError(ValueError):
    pass


class NotHermitianError(ValueError):
    pass


class NonCommutingError(ValueError):
    def __init__(self, i: int, j: int, norm: float):
        self.pair = (i, j)
        self.norm = norm
        super().__init__(f"operators {i} and {j} do not commute: ||[A_{i}, A_{j}]|| = {norm:.3e}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Operator:
    """Dense square operator.

    ``hermitian`` is inferred when not given. Passing ``hermitian=True`` for a
    matrix that is not hermitian to within 1e-12 element-wise raises.
    """

    entries: np.ndarray
    hermitian: bool = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        m = _frozen(self.entries)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise DimensionError(f"operator must be a non-empty square matrix, got shape {m.shape}")
        object.__setattr__(self, "entries", m)
        is_herm = bool(np.max(np.abs(m - m.conj().T)) <= HERMITIAN_ATOL)
        if self.hermitian is None:
            object.__setattr__(self, "hermitian", is_herm)
        elif self.hermitian and not is_herm:
            raise NotHermitianError("entries are not hermitian to 1e-12")

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def dag(self) -> "Operator":
        return Operator(self.entries.conj().T)

    def __matmul__(self, other):
        if isinstance(other, Operator):
            return Operator(self.entries @ other.entries)
        return self.entries @ np.asarray(other)

    def __add__(self, other: "Operator") -> "Operator":
        return Operator(self.entries + other.entries)

    def __sub__(self, other: "Operator") -> "Operator":
        return Operator(self.entries - other.entries)

    def __mul__(self, c) -> "Operator":
        return Operator(self.entries * c)

    __rmul__ = __mul__

    def __neg__(self) -> "Operator":
        return Operator(-self.entries)


@dataclass(frozen=True)
class StateVector:
    amplitudes: np.ndarray

    def __post_init__(self):
        v = _frozen(self.amplitudes)
        if v.ndim != 1 or v.size == 0:
            raise DimensionError("state must be a non-empty vector")
        object.__setattr__(self, "amplitudes", v)

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def is_normalized(self) -> bool:
        return abs(self.norm - 1.0) <= 1e-10

    def normalized(self) -> "StateVector":
        return StateVector(self.amplitudes / self.norm)

    def projector(self) -> "DensityMatrix":
        v = self.amplitudes
        return DensityMatrix(np.outer(v, v.conj()) / np.vdot(v, v).real)


@dataclass(frozen=True)
class DensityMatrix:
    entries: np.ndarray

    def __post_init__(self):
        m = _frozen(self.entries)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError("density matrix must be square")
        object.__setattr__(self, "entries", m)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def validity(self) -> dict:
        m = self.entries
        return {
            "hermiticity": float(np.max(np.abs(m - m.conj().T))),
            "trace_error": float(abs(np.trace(m) - 1.0)),
            "min_eigenvalue": float(np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min()),
        }

    def is_valid(self) -> bool:
        v = self.validity()
        return v["hermiticity"] <= 1e-12 and v["trace_error"] <= 1e-10 and v["min_eigenvalue"] >= -1e-10


def as_matrix(op) -> np.ndarray:
    return op.entries if isinstance(op, Operator) else np.asarray(op, dtype=complex)


def as_vector(psi) -> np.ndarray:
    return psi.amplitudes if isinstance(psi, StateVector) else np.asarray(psi, dtype=complex)


def commutator(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    return a @ b - b @ a


def spectral_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(m, 2)) if m.size else 0.0


def propagator(H0, t: float, hbar: float = 1.0) -> np.ndarray:
    """e^{-i H0 t / hbar}."""
    return expm(-1j * as_matrix(H0) * t / hbar)


def heisenberg_evolve(A, H0, t: float, hbar: float = 1.0) -> Operator:
    """Return e^{i H0 t/hbar} A e^{-i H0 t/hbar}."""
    a, h = as_matrix(A), as_matrix(H0)
    if a.shape != h.shape:
        raise DimensionError(f"A has shape {a.shape}, H0 has shape {h.shape}")
    if spectral_norm(h - h.conj().T) > COMMUTATION_TOL:
        raise NotHermitianError("H0 must be hermitian")
    if t == 0 or not np.any(h):
        return Operator(a)
    u = propagator(h, t, hbar)
    out = u.conj().T @ a @ u
    if isinstance(A, Operator) and A.hermitian:
        out = 0.5 * (out + out.conj().T)
    return Operator(out)


def expectation(psi, A) -> complex:
    v, a = as_vector(psi), as_matrix(A)
    if a.shape != (v.size, v.size):
        raise DimensionError(f"state of dim {v.size} vs operator of shape {a.shape}")
    val = complex(np.vdot(v, a @ v))
    if isinstance(A, Operator) and A.hermitian:
        return complex(val.real, 0.0)
    return val


def _canonical_block(vecs: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of the span of the columns of ``vecs``.

    The projector onto the span does not depend on which basis the
    eigensolver happened to return, so Gram-Schmidt over its columns (in
    index order) gives a reproducible basis.
    """
    k = vecs.shape[1]
    if k == 1:
        v = vecs[:, 0]
        return (v * _phase_fix(v))[:, None]
    proj = vecs @ vecs.conj().T
    basis = []
    for col in proj.T:
        w = col.copy()
        for b in basis:
            w -= np.vdot(b, w) * b
        nrm = np.linalg.norm(w)
        if nrm > 1e-8:
            basis.append(w / nrm)
        if len(basis) == k:
            break
    out = np.array([b * _phase_fix(b) for b in basis]).T
    order = sorted(range(k), key=lambda c: tuple(-np.round(np.abs(out[:, c]), 12)))
    return out[:, order]


def _phase_fix(v: np.ndarray) -> complex:
    idx = int(np.argmax(np.abs(v) > 1e-10))
    return np.abs(v[idx]) / v[idx]


def common_eigenbasis(ops: Sequence, *, tol: float = 1e-8):
    """Joint eigenbasis of pairwise commuting hermitian operators.

    Returns ``(basis, labels)`` where ``basis`` is a list of
    :class:`StateVector` and ``labels[k][i]`` is the eigenvalue of ``ops[i]``
    on ``basis[k]``. Degenerate blocks of one operator are refined by the
    next operator in list order; basis vectors are sorted by their labels.
    """
    mats = [as_matrix(o) for o in ops]
    if not mats:
        raise ValueError("need at least one operator")
    dim = mats[0].shape[0]
    for k, m in enumerate(mats):
        if m.shape != (dim, dim):
            raise DimensionError(f"operator {k} has shape {m.shape}")
        if spectral_norm(m - m.conj().T) > COMMUTATION_TOL:
            raise NotHermitianError(f"operator {k} is not hermitian")
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            n = spectral_norm(commutator(mats[i], mats[j]))
            if n > COMMUTATION_TOL:
                raise NonCommutingError(i, j, n)

    blocks = [np.eye(dim, dtype=complex)]
    for m in mats:
        refined = []
        for v in blocks:
            w, u = np.linalg.eigh(v.conj().T @ m @ v)
            vecs = v @ u
            start = 0
            for k in range(1, len(w) + 1):
                if k == len(w) or w[k] - w[start] > tol:
                    refined.append(vecs[:, start:k])
                    start = k
        blocks = refined

    basis, labels = [], []
    for v in blocks:
        for col in _canonical_block(v).T:
            basis.append(col)
            labels.append(tuple(float(np.vdot(col, m @ col).real) for m in mats))
    order = sorted(range(len(basis)), key=lambda k: (tuple(np.round(labels[k], 9)), k))
    return [StateVector(basis[k]) for k in order], [labels[k] for k in order]


# Common small operators -------------------------------------------------

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)

PRESETS = {
    "sigma_x": SIGMA_X,
    "sigma_y": SIGMA_Y,
    "sigma_z": SIGMA_Z,
    "identity2": np.eye(2, dtype=complex),
    "zero2": np.zeros((2, 2), dtype=complex),
}


def operator_to_dict(op) -> dict:
    m = as_matrix(op)
    return {"dim": int(m.shape[0]), "re": m.real.tolist(), "im": m.imag.tolist()}


def operator_from_dict(d) -> Operator:
    if isinstance(d, str):
        if d not in PRESETS:
            raise KeyError(f"unknown operator preset {d!r}")
        return Operator(PRESETS[d])
    if "preset" in d:
        return Operator(PRESETS[d["preset"]] * d.get("scale", 1.0))
    m = np.asarray(d["re"], dtype=float) + 1j * np.asarray(d.get("im", np.zeros_like(d["re"])), dtype=float)
    if m.shape != (d["dim"], d["dim"]):
        raise DimensionError(f"operator schema: dim={d['dim']} but entries have shape {m.shape}")
    return Operator(m)


def state_to_dict(psi) -> dict:
    v = as_vector(psi)
    return {"dim": int(v.size), "re": v.real.tolist(), "im": v.imag.tolist()}


def state_from_dict(d) -> StateVector:
    v = np.asarray(d["re"], dtype=float) + 1j * np.asarray(d.get("im", np.zeros_like(d["re"])), dtype=float)
    if v.shape != (d["dim"],):
        raise DimensionError(f"state schema: dim={d['dim']} but amplitudes have shape {v.shape}")
    return StateVector(v)
