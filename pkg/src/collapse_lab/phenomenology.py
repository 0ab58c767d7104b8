"""CSL parameter mapping, exclusion diagram assembly and HPZ-type coefficients.

Everything here is in SI units.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional, Sequence

import numpy as np
from scipy import integrate

from .constants import C_LIGHT, DELTA_ENDPOINT_WEIGHT, HBAR, M_NUCLEON
from .master_eq import PositionGrid, Superoperator, lattice_laplacian, superop_comm_anticomm, superop_commutator, superop_double_commutator
from .noise import SpatialKernel

REFERENCE_STRAIN = 1.0e-21
KINDS = ("exclusion-above", "exclusion-below", "reference-line")


def _positive(**kw):
    for k, v in kw.items():
        if not np.all(np.asarray(v) > 0):
            raise ValueError(f"{k} must be positive")


def tau0_from_rc(r_C, c: float = C_LIGHT):
    return np.asarray(r_C) / c if np.ndim(r_C) else r_C / c


@dataclass(frozen=True)
class ParameterPoint:
    xi: float
    r_C: float
    tau0: Optional[float] = None

    def __post_init__(self):
        if self.tau0 is None:
            object.__setattr__(self, "tau0", self.r_C / C_LIGHT)
        _positive(xi=self.xi, r_C=self.r_C, tau0=self.tau0)


def xi_from_csl(lam, tau0, m0: float = M_NUCLEON):
    """xi = 4 hbar pi^{3/4} / (m0 c^2) sqrt(lam / tau0)."""
    _positive(lam=lam, tau0=tau0, m0=m0)
    return 4.0 * HBAR * math.pi**0.75 / (m0 * C_LIGHT**2) * np.sqrt(np.asarray(lam, dtype=float) / tau0)[()]


def lambda_from_xi(xi, tau0, m0: float = M_NUCLEON):
    """Inverse of :func:`xi_from_csl`."""
    _positive(xi=xi, tau0=tau0, m0=m0)
    return (np.asarray(tau0, dtype=float) * (np.asarray(xi, dtype=float) * m0 * C_LIGHT**2 / (4.0 * HBAR * math.pi**0.75)) ** 2)[()]


# --------------------------------------------------------------------------
# Bound curves


@dataclass(frozen=True)
class BoundCurve:
    name: str
    kind: str
    points: np.ndarray  # (n, 2): (r_C [m], lambda [1/s] or xi)
    quantity: str = "lambda"
    provenance: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"curve {self.name!r}: kind must be one of {KINDS}")
        if self.quantity not in ("lambda", "xi"):
            raise ValueError(f"curve {self.name!r}: quantity must be 'lambda' or 'xi'")
        p = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if p.size and (np.any(p <= 0) or not np.all(np.isfinite(p))):
            raise ValueError(f"curve {self.name!r}: coordinates must be finite and positive")
        if p.size and np.any(np.diff(p[:, 0]) <= 0):
            raise ValueError(f"curve {self.name!r}: points must be strictly sorted by r_C")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def at(self, r_C) -> np.ndarray:
        """Log-log interpolation; NaN outside the curve's r_C range."""
        r = np.atleast_1d(np.asarray(r_C, dtype=float))
        if len(self.points) == 0:
            return np.full(r.shape, np.nan)
        lx, ly = np.log(self.points[:, 0]), np.log(self.points[:, 1])
        out = np.exp(np.interp(np.log(r), lx, ly))
        out[(r < self.points[0, 0] * (1 - 1e-12)) | (r > self.points[-1, 0] * (1 + 1e-12))] = np.nan
        return out


def map_bound_curve(curve: BoundCurve, m0: float = M_NUCLEON) -> BoundCurve:
    """Map a (r_C, lambda) curve to (r_C, xi) with tau0 = r_C / c."""
    if curve.quantity != "lambda":
        raise ValueError(f"curve {curve.name!r} is already in xi")
    if len(curve.points) == 0:
        return BoundCurve(curve.name, curve.kind, np.zeros((0, 2)), "xi", curve.provenance)
    r = curve.points[:, 0]
    xi = xi_from_csl(curve.points[:, 1], r / C_LIGHT, m0)
    return BoundCurve(curve.name, curve.kind, np.column_stack([r, xi]), "xi", curve.provenance)


def read_bound_csv(path_or_text) -> BoundCurve:
    """Parse the bound-curve CSV: ``name,kind`` header, its values, then data rows.

    Lines starting with '#' are provenance notes. The data header is
    ``r_C_m,lambda_per_s`` or ``r_C_m,xi``.
    """
    if hasattr(path_or_text, "read_text"):
        text = path_or_text.read_text()
    elif "\n" in str(path_or_text):
        text = str(path_or_text)
    else:
        with open(path_or_text) as f:
            text = f.read()
    notes, body = [], []
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            notes.append(s.lstrip("# "))
        else:
            body.append((n, s))
    if len(body) < 3:
        raise ValueError("bound CSV needs a name,kind header, its values and a data header")
    (n0, h0), (n1, v1), (n2, h2) = body[:3]
    if [c.strip() for c in h0.split(",")] != ["name", "kind"]:
        raise ValueError(f"line {n0}: expected 'name,kind', got {h0!r}")
    name, kind = [c.strip() for c in next(csv.reader([v1]))]
    cols = [c.strip() for c in h2.split(",")]
    if cols not in (["r_C_m", "lambda_per_s"], ["r_C_m", "xi"]):
        raise ValueError(f"line {n2}: expected 'r_C_m,lambda_per_s' or 'r_C_m,xi', got {h2!r}")
    pts = []
    for n, s in body[3:]:
        try:
            a, b = (float(v) for v in s.split(","))
        except ValueError as e:
            raise ValueError(f"line {n}: bad data row {s!r}") from e
        pts.append((a, b))
    quantity = "lambda" if cols[1] == "lambda_per_s" else "xi"
    return BoundCurve(name, kind, np.array(pts).reshape(-1, 2), quantity, " ".join(notes))


def write_bound_csv(curve: BoundCurve, path) -> None:
    col = "lambda_per_s" if curve.quantity == "lambda" else "xi"
    with open(path, "w") as f:
        if curve.provenance:
            f.write(f"# {curve.provenance}\n")
        f.write(f"name,kind\n{curve.name},{curve.kind}\nr_C_m,{col}\n")
        for r, v in curve.points:
            f.write(f"{r:.17g},{v:.17g}\n")


SHIPPED_BOUNDS = ("macro.csv", "xrays.csv", "cold_atoms.csv", "lisa.csv")


def shipped_bounds() -> List[BoundCurve]:
    root = resources.files("collapse_lab") / "data" / "bounds"
    return [read_bound_csv(root / name) for name in SHIPPED_BOUNDS]


# --------------------------------------------------------------------------
# Exclusion diagram


@dataclass
class Diagram:
    curves: List[BoundCurve]
    r_C: np.ndarray
    lower: np.ndarray  # largest lower bound per r_C (NaN if none)
    upper: np.ndarray  # smallest upper bound per r_C (inf if none)
    reference: float
    xi_min: float
    xi_max: float
    non_empty: bool
    upper_unbounded: bool
    envelope: tuple = (1e-26, 1e-20)

    @property
    def allowed(self) -> np.ndarray:
        return ~np.isnan(self.lower) & (np.nan_to_num(self.lower, nan=np.inf) < self.upper)

    @property
    def consistent(self) -> bool:
        """Band edges within one decade of the expected envelope."""
        if not self.non_empty or not np.isfinite(self.xi_max):
            return False
        lo, hi = self.envelope
        return abs(math.log10(self.xi_min / lo)) <= 1.0 and abs(math.log10(self.xi_max / hi)) <= 1.0

    def to_dict(self) -> dict:
        def num(x):
            return None if not np.isfinite(x) else float(x)

        return {
            "curves": [{"name": c.name, "kind": c.kind, "provenance": c.provenance,
                        "points": [[float(r), float(x)] for r, x in c.points]} for c in self.curves],
            "reference": {"xi": self.reference},
            "allowed": {
                "xi_min": num(self.xi_min), "xi_max": num(self.xi_max),
                "non_empty": self.non_empty, "upper_unbounded": self.upper_unbounded,
                "per_r_C": [{"r_C": float(r), "xi_min": num(lo), "xi_max": num(up)}
                            for r, lo, up, ok in zip(self.r_C, self.lower, self.upper, self.allowed) if ok],
            },
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    def write_dat(self, path) -> None:
        """Flat whitespace table: r_C, one column per curve, lower, upper, reference."""
        cols = [c.at(self.r_C) for c in self.curves]
        with open(path, "w") as f:
            f.write("# r_C " + " ".join(c.name.replace(" ", "_") for c in self.curves) + " lower upper reference\n")
            for k, r in enumerate(self.r_C):
                vals = [r] + [c[k] for c in cols] + [self.lower[k], self.upper[k], self.reference]
                f.write(" ".join("nan" if not np.isfinite(v) else f"{v:.17g}" for v in vals) + "\n")


def assemble_diagram(curves: Sequence[BoundCurve], ligo_ref: float = REFERENCE_STRAIN, m0: float = M_NUCLEON) -> Diagram:
    """Combine bound curves in (r_C, xi) and locate the allowed band.

    Curves given in lambda are mapped first. The band at each r_C lies above
    the largest exclusion-below curve and below the smallest exclusion-above
    curve covering that r_C. An empty band is reported through ``non_empty``.
    """
    xs = [map_bound_curve(c, m0) if c.quantity == "lambda" else c for c in curves]
    bounds = [c for c in xs if c.kind != "reference-line" and len(c.points)]
    if not any(c.kind == "exclusion-below" for c in bounds):
        raise ValueError("diagram needs at least one lower (exclusion-below) curve")
    r = np.unique(np.concatenate([c.points[:, 0] for c in bounds]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lows = np.array([c.at(r) for c in bounds if c.kind == "exclusion-below"])
        lower = np.nanmax(lows, axis=0)
        ups = [c.at(r) for c in bounds if c.kind == "exclusion-above"]
        upper = np.nanmin(np.array(ups), axis=0) if ups else np.full(r.shape, np.inf)
    upper = np.where(np.isnan(upper), np.inf, upper)
    ok = ~np.isnan(lower) & (lower < upper)
    non_empty = bool(ok.any())
    xi_min = float(lower[ok].min()) if non_empty else float("nan")
    xi_max = float(upper[ok].max()) if non_empty else float("nan")
    return Diagram(xs, r, lower, upper, float(ligo_ref), xi_min, xi_max, non_empty,
                   upper_unbounded=bool(non_empty and not np.isfinite(xi_max)))


# --------------------------------------------------------------------------
# HPZ-type coefficients


class NonConvergentIntegral(ArithmeticError):
    pass


@dataclass(frozen=True)
class HPZCoefficients:
    eta: float
    Pi: float
    Upsilon: float


def _quad(f, a, b, rtol):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, a, b, epsrel=rtol, epsabs=0.0, limit=400)
        except integrate.IntegrationWarning as e:
            raise NonConvergentIntegral(str(e)) from e
    if not np.isfinite(val):
        raise NonConvergentIntegral("integral is not finite")
    return val


def hpz_coefficients(kernel: SpatialKernel, xi: float, m0: float = M_NUCLEON, *, hbar: float = HBAR,
                     c: float = C_LIGHT, rtol: float = 1e-10) -> HPZCoefficients:
    """eta, Pi, Upsilon from Q^4 moments of a separable isotropic kernel.

    The Q integral runs over u = Q / q_scale. A delta-correlated kernel
    contributes tau0 times the endpoint weight to the tau integral and
    nothing to the tau-weighted one.
    """
    q = kernel.q_scale
    pref = m0**2 * c**4 * xi**2 / (6 * math.pi**2 * hbar**7)

    def qmoment(spatial):
        return q**5 * _quad(lambda u: float(spatial(np.asarray(q * u))) * u**4, 0.0, np.inf, rtol)

    if kernel.temporal is None:
        t0, t1 = DELTA_ENDPOINT_WEIGHT * kernel.tau0, 0.0
    else:
        g = kernel.temporal
        t0 = _quad(lambda s: float(g(np.asarray(s))), 0.0, np.inf, rtol)
        t1 = _quad(lambda s: s * float(g(np.asarray(s))), 0.0, np.inf, rtol)
    mR = qmoment(kernel.DR)
    eta = pref * mR * t0
    Pi = pref * mR * t1
    Ups = 0.0 if kernel.spatial_I is None else -pref * qmoment(kernel.DI) * t1
    return HPZCoefficients(float(eta), float(Pi), float(Ups))


def lattice_momentum(grid: PositionGrid, hbar: float = HBAR) -> np.ndarray:
    """Central-difference P = -i hbar d/dx with hard walls."""
    n = grid.n_sites
    D = (np.eye(n, k=1) - np.eye(n, k=-1)) / (2 * grid.dx)
    return -1j * hbar * D


def hpz_generator(coeffs: HPZCoefficients, A_R: float, A_I: float, m0: float, m_total: float,
                  grid: PositionGrid, *, hbar: float = HBAR) -> Superoperator:
    """Translation-invariant HPZ-type generator on the lattice (one axis)."""
    X = np.diag(grid.sites).astype(complex)
    P = lattice_momentum(grid, hbar)
    P2 = -(hbar**2) * lattice_laplacian(grid)
    L = (-1j / hbar) * superop_commutator(P2 / (2 * m_total))
    L = L - coeffs.eta * (A_R / m0**2) * superop_double_commutator(X, X)
    L = L + coeffs.Pi * (A_R / m0**2) * superop_double_commutator(X, P / m_total)
    L = L - 1j * coeffs.Upsilon * (A_I / m0**2) * superop_comm_anticomm(X, P / m_total)
    return Superoperator(grid.n_sites, L)
