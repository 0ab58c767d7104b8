"""Amplification factor of a rigid composite body.

Masses are in nucleon-mass units unless stated otherwise; positions and the
momentum transfer Q share whatever length and momentum units are used for
hbar (hbar = 1 by default, so Q is then a wave vector).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import lebedev_rule

# 146-point rule (degree 19); the nearest available size to 128 directions
LEBEDEV_ORDER = 19


@dataclass(frozen=True)
class MassDistribution:
    masses: np.ndarray  # (n,)
    positions: np.ndarray  # (n, 3)

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.masses, dtype=float)).copy()
        r = np.atleast_2d(np.asarray(self.positions, dtype=float)).copy()
        if m.size == 0:
            raise ValueError("mass distribution is empty")
        if r.shape != (m.size, 3):
            raise ValueError(f"positions must have shape ({m.size}, 3), got {r.shape}")
        if np.any(m <= 0):
            raise ValueError("masses must be positive")
        m.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "positions", r)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def n_particles(self) -> int:
        return self.masses.size

    def translated(self, shift) -> "MassDistribution":
        return MassDistribution(self.masses, self.positions + np.asarray(shift, dtype=float))

    @classmethod
    def point(cls, m: float = 1.0) -> "MassDistribution":
        return cls([m], [[0.0, 0.0, 0.0]])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["m", "x", "y", "z"])
            for m, r in zip(self.masses, self.positions):
                w.writerow([f"{v:.17g}" for v in (m, *r)])

    @classmethod
    def from_csv(cls, path) -> "MassDistribution":
        with open(path, newline="") as f:
            rows = [r for r in csv.DictReader(line for line in f if not line.startswith("#"))]
        if not rows:
            raise ValueError(f"{path}: no particles")
        m = [float(r["m"]) for r in rows]
        pos = [[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]
        return cls(m, pos)


def amplification_factor(massdist: MassDistribution, Q, hbar: float = 1.0) -> np.ndarray:
    """A(Q) = |sum_i m_i exp(-i Q.r_i / hbar)|^2 for Q of shape (3,) or (..., 3)."""
    Q = np.asarray(Q, dtype=float)
    phase = np.exp(-1j * (Q @ massdist.positions.T) / hbar)  # (..., n)
    amp = phase @ massdist.masses
    out = np.abs(amp) ** 2
    return float(out) if out.ndim == 0 else out


def amplification_factor_pairwise(massdist: MassDistribution, Q, hbar: float = 1.0) -> float:
    """Same quantity as the double sum over pairs; O(n^2), for cross-checks."""
    Q = np.asarray(Q, dtype=float)
    m, r = massdist.masses, massdist.positions
    dr = r[:, None, :] - r[None, :, :]
    return float(np.sum(np.outer(m, m) * np.cos(dr @ Q / hbar)))


def sphere_directions(order: int = LEBEDEV_ORDER):
    """Unit vectors (n, 3) and weights summing to one."""
    x, w = lebedev_rule(order)
    return x.T, w / w.sum()


def angle_averaged_amplification(massdist: MassDistribution, q: float, hbar: float = 1.0,
                                 order: int = LEBEDEV_ORDER, method: str = "lebedev") -> float:
    """Average of A over directions of Q at fixed |Q| = q.

    "lebedev" uses the spherical rule; it is exact only while q times the
    body's extent stays well below the rule's degree. "exact" sums
    m_i m_j sinc(q r_ij / hbar) over pairs.
    """
    if method == "exact":
        r = massdist.positions
        m = massdist.masses
        dist = np.sqrt(np.sum((r[:, None, :] - r[None, :, :]) ** 2, axis=-1))
        return float(m @ np.sinc(q * dist / (np.pi * hbar)) @ m)
    if method != "lebedev":
        raise ValueError("method must be 'lebedev' or 'exact'")
    dirs, w = sphere_directions(order)
    return float(amplification_factor(massdist, q * dirs, hbar) @ w)


# --------------------------------------------------------------------------
# Sphere-counting estimate


@dataclass(frozen=True)
class ObjectShape:
    """Uniform convex body: ``kind`` is "sphere" (dims = (radius,)) or "box" (dims = sides)."""

    kind: str
    dims: tuple
    n_nucleons: int

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError("shape kind must be 'sphere' or 'box'")
        need = 1 if self.kind == "sphere" else 3
        if len(self.dims) != need or any(d <= 0 for d in self.dims):
            raise ValueError(f"{self.kind} needs {need} positive dimension(s)")
        if self.n_nucleons < 1:
            raise ValueError("n_nucleons must be >= 1")

    @property
    def volume(self) -> float:
        if self.kind == "sphere":
            return 4.0 / 3.0 * math.pi * self.dims[0] ** 3
        return float(np.prod(self.dims))

    def fits_in_sphere(self, radius: float) -> bool:
        if self.kind == "sphere":
            return self.dims[0] <= radius
        return 0.5 * math.sqrt(sum(d * d for d in self.dims)) <= radius


def adler_counts(shape: ObjectShape, r_C: float):
    """(n, N): nucleons per radius-r_C sphere and number of covering spheres."""
    if r_C <= 0:
        raise ValueError("r_C must be positive")
    total = shape.n_nucleons
    if shape.fits_in_sphere(r_C):
        return total, 1
    v_sph = 4.0 / 3.0 * math.pi * r_C**3
    ratio = v_sph / shape.volume
    n = max(1, min(total, math.floor(total * ratio * (1 + 1e-12))))
    cover = math.ceil(shape.volume / v_sph * (1 - 1e-12))
    N = max(1, min(cover, math.ceil(total / n)))
    return n, N


def adler_estimate(shape: ObjectShape, r_C: float, m0: float = 1.0) -> float:
    """A = N (n m0)^2 from sphere counting."""
    n, N = adler_counts(shape, r_C)
    return N * (n * m0) ** 2


def shape_from_massdist(massdist: MassDistribution) -> ObjectShape:
    """Bounding box padded by the median nearest-neighbour spacing."""
    r = massdist.positions
    n = massdist.n_particles
    if n < 2:
        raise ValueError("a bounding box needs at least two particles")
    d2 = np.sum((r[:, None, :] - r[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    spacing = float(np.median(np.sqrt(d2.min(axis=1))))
    sides = tuple(float(s) + spacing for s in (r.max(axis=0) - r.min(axis=0)))
    return ObjectShape("box", sides, int(round(massdist.total_mass)))


@dataclass
class LimitReport:
    q: float
    exact: float
    coherent: float
    incoherent: float
    adler: Optional[float]

    @property
    def ratio_coherent(self) -> float:
        return self.exact / self.coherent

    @property
    def ratio_incoherent(self) -> float:
        return self.exact / self.incoherent

    @property
    def ratio_adler(self) -> Optional[float]:
        return None if self.adler is None else self.exact / self.adler

    def as_dict(self) -> dict:
        return {
            "q": self.q, "exact": self.exact, "coherent": self.coherent, "incoherent": self.incoherent,
            "adler": self.adler, "ratio_coherent": self.ratio_coherent,
            "ratio_incoherent": self.ratio_incoherent, "ratio_adler": self.ratio_adler,
        }


def limit_diagnostics(massdist: MassDistribution, r_C: float, hbar: float = 1.0) -> LimitReport:
    """Angle-averaged A at |Q| = hbar / r_C against the two limits and the sphere count."""
    q = hbar / r_C
    # pair sum up to a few thousand particles, spherical rule beyond
    method = "exact" if massdist.n_particles <= 4000 else "lebedev"
    exact = angle_averaged_amplification(massdist, q, hbar, method=method)
    m = massdist.masses
    if massdist.n_particles == 1:
        adler = float(m[0] ** 2)
    elif np.allclose(m, 1.0):
        adler = adler_estimate(shape_from_massdist(massdist), r_C)
    else:
        adler = None  # sphere counting assumes identical nucleons
    return LimitReport(q, exact, float(m.sum() ** 2), float(np.sum(m**2)), adler)


# --------------------------------------------------------------------------
# Presets


def cubic_lattice(n_side: int, spacing: float, mass: float = 1.0) -> MassDistribution:
    g = (np.arange(n_side) - 0.5 * (n_side - 1)) * spacing
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return MassDistribution(np.full(len(pts), mass), pts)


def uniform_sphere(n: int, radius: float, seed: int = 0, mass: float = 1.0) -> MassDistribution:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return MassDistribution(np.full(n, mass), v * r[:, None])


def uniform_cube(n: int, side: float, seed: int = 0, mass: float = 1.0) -> MassDistribution:
    rng = np.random.default_rng(seed)
    return MassDistribution(np.full(n, mass), (rng.random((n, 3)) - 0.5) * side)


PRESETS = {"lattice": cubic_lattice, "sphere": uniform_sphere, "cube": uniform_cube}
