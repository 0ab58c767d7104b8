import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from collapse_lab.amplification import MassDistribution
from collapse_lab.constants import C_LIGHT, DELTA_ENDPOINT_WEIGHT, HBAR, M_NUCLEON
from collapse_lab.master_eq import PositionGrid, build_cm_generator, lattice_laplacian
from collapse_lab.noise import spatial_gaussian
from collapse_lab.phenomenology import (
    REFERENCE_STRAIN, BoundCurve, HPZCoefficients, assemble_diagram, hpz_coefficients, hpz_generator,
    lambda_from_xi, map_bound_curve, read_bound_csv, shipped_bounds, write_bound_csv, xi_from_csl,
)

lam_s = st.floats(1e-20, 1e-6)
tau_s = st.floats(1e-18, 1e-12)


def _xi_oracle(lam, tau0, m0=M_NUCLEON):
    mpmath.mp.dps = 50
    hb, c, m = mpmath.mpf("1.054571817e-34"), mpmath.mpf("299792458"), mpmath.mpf(repr(m0))
    return 4 * hb * mpmath.pi ** mpmath.mpf("0.75") / (m * c**2) * mpmath.sqrt(mpmath.mpf(lam) / mpmath.mpf(tau0))


def test_constants():
    assert HBAR == 1.054571817e-34 and C_LIGHT == 299792458.0 and M_NUCLEON == 1.67262192e-27


def test_xi_spot_value_against_high_precision():
    lam, r_C = 1e-16, 1e-7
    tau0 = r_C / C_LIGHT
    assert tau0 == pytest.approx(3.3356409519815204e-16, rel=1e-15)
    xi = xi_from_csl(lam, tau0, 1.67262192e-27)
    ref = _xi_oracle(lam, repr(tau0))
    assert abs(xi / float(ref) - 1) < 1e-14
    back = lambda_from_xi(xi, tau0)
    mpmath.mp.dps = 50
    lam_ref = mpmath.mpf(repr(tau0)) * (ref * mpmath.mpf(repr(M_NUCLEON)) * mpmath.mpf(299792458) ** 2
                                        / (4 * mpmath.mpf("1.054571817e-34") * mpmath.pi ** mpmath.mpf("0.75"))) ** 2
    assert abs(back / float(lam_ref) - 1) < 1e-14


@given(lam_s, tau_s)
def test_round_trip(lam, tau0):
    assert abs(lambda_from_xi(xi_from_csl(lam, tau0), tau0) / lam - 1) <= 1e-14
    xi = xi_from_csl(lam, tau0)
    assert abs(xi_from_csl(lambda_from_xi(xi, tau0), tau0) / xi - 1) <= 1e-14


@given(lam_s, tau_s)
def test_homogeneity(lam, tau0):
    assert xi_from_csl(4 * lam, tau0) == pytest.approx(2 * xi_from_csl(lam, tau0), rel=1e-15)
    xi = xi_from_csl(lam, tau0)
    assert lambda_from_xi(2 * xi, tau0) == pytest.approx(4 * lambda_from_xi(xi, tau0), rel=1e-15)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        xi_from_csl(-1.0, 1e-16)
    with pytest.raises(ValueError):
        lambda_from_xi(1e-22, 0.0)


def test_constant_lambda_maps_to_inverse_sqrt_rc():
    r = np.logspace(-8, -4, 9)
    c = map_bound_curve(BoundCurve("flat", "exclusion-above", np.column_stack([r, np.full(9, 1e-10)])))
    slope = np.polyfit(np.log(r), np.log(c.points[:, 1]), 1)[0]
    assert slope == pytest.approx(-0.5, abs=1e-12)


def test_empty_curve_maps_to_empty():
    out = map_bound_curve(BoundCurve("none", "exclusion-above", np.zeros((0, 2))))
    assert len(out.points) == 0 and out.quantity == "xi"


@given(st.lists(st.floats(1e-20, 1e-8), min_size=2, max_size=8), st.floats(1.01, 100))
def test_map_preserves_order(lams, factor):
    r = np.logspace(-8, -5, len(lams))
    a = map_bound_curve(BoundCurve("a", "exclusion-above", np.column_stack([r, lams])))
    b = map_bound_curve(BoundCurve("b", "exclusion-above", np.column_stack([r, np.array(lams) * factor])))
    assert np.all(a.points[:, 1] < b.points[:, 1])


def test_csv_round_trip(tmp_path):
    c = shipped_bounds()[1]
    write_bound_csv(c, tmp_path / "c.csv")
    back = read_bound_csv(tmp_path / "c.csv")
    assert back.name == c.name and back.kind == c.kind and np.array_equal(back.points, c.points)


def test_csv_errors_name_the_line():
    with pytest.raises(ValueError, match="line 4"):
        read_bound_csv("name,kind\nX,exclusion-above\nr_C_m,lambda_per_s\n1e-8,abc\n")
    with pytest.raises(ValueError):
        read_bound_csv("name,kind\nX,sideways\nr_C_m,lambda_per_s\n1e-8,1e-10\n")


def test_shipped_diagram():
    d = assemble_diagram(shipped_bounds())
    assert d.non_empty and d.consistent
    assert 1e-27 <= d.xi_min <= 1e-25 and 1e-21 <= d.xi_max <= 1e-19
    assert d.reference == REFERENCE_STRAIN == 1.0e-21


def test_single_lower_curve_is_unbounded_above():
    d = assemble_diagram([shipped_bounds()[0]])
    assert d.upper_unbounded and d.non_empty
    assert d.reference == 1e-21


def test_hpz_eta_closed_form():
    r_C = 1e-7
    tau0 = r_C / C_LIGHT
    xi = 1e-22
    co = hpz_coefficients(spatial_gaussian(r_C, tau0, HBAR), xi)
    oracle = (M_NUCLEON**2 * C_LIGHT**4 * xi**2 / (6 * math.pi**2 * HBAR**7) * r_C**3 * (tau0 / 2)
              * (3 * math.sqrt(math.pi) / 8) * (HBAR / r_C) ** 5)
    assert co.eta == pytest.approx(oracle, rel=1e-6)
    assert co.Pi == 0 and co.Upsilon == 0


def test_hpz_eta_natural_units():
    co = hpz_coefficients(spatial_gaussian(1.0, 1.0), 1.0, 1.0, hbar=1.0, c=1.0)
    assert co.eta == pytest.approx(1 / (6 * math.pi**2) * 0.5 * 3 * math.sqrt(math.pi) / 8, rel=1e-10)


def test_narrow_gaussian_pi_vanishes_in_limit():
    pis = []
    for eps in (1e-2, 1e-3):
        g = lambda s, e=eps: 2 / (e * math.sqrt(math.pi)) * np.exp(-((s / e) ** 2))  # unit weight on s >= 0
        co = hpz_coefficients(spatial_gaussian(1.0, 1.0, temporal=g), 1.0, 1.0, hbar=1.0, c=1.0)
        pis.append(co.Pi)
    assert pis[1] < pis[0] / 5


@given(st.floats(1e-24, 1e-18))
def test_eta_quadratic_in_xi(xi):
    k = spatial_gaussian(1e-7, 1e-7 / C_LIGHT, HBAR)
    assert hpz_coefficients(k, 2 * xi).eta == 4 * hpz_coefficients(k, xi).eta


def _shift_superop(n):
    T = np.eye(n, k=-1)
    return np.kron(T, T)  # vec(T rho T^T), row-major


def test_hpz_free_and_dephasing():
    g = PositionGrid(8, 0.1, 1.0)
    free = hpz_generator(HPZCoefficients(0, 0, 0), 1, 1, 1, 1, g, hbar=1.0)
    H = -0.5 * lattice_laplacian(g)
    from collapse_lab.master_eq import superop_commutator
    assert np.allclose(free.matrix, -1j * superop_commutator(H))
    L = hpz_generator(HPZCoefficients(0.3, 0, 0), 2.0, 0, 1.0, 1e30, g, hbar=1.0)
    x = g.sites
    E = np.zeros((8, 8)); E[1, 5] = 1
    assert L.apply(E)[1, 5].real == pytest.approx(-0.3 * 2.0 * (x[1] - x[5]) ** 2, rel=1e-9)


def test_hpz_translation_invariance():
    n = 12
    g = PositionGrid(n, 0.05, 1.0)
    L = hpz_generator(HPZCoefficients(0.4, 0.2, 0.1), 1.3, 0.7, 1.0, 2.0, g, hbar=1.0).matrix
    S = _shift_superop(n)
    C = L @ S - S @ L
    interior = [a * n + b for a in range(2, n - 3) for b in range(2, n - 3)]
    assert np.max(np.abs(C[np.ix_(interior, interior)])) < 1e-10 * np.max(np.abs(L))


def test_hpz_matches_cm_small_q_expansion():
    r_C = 1.0
    g = PositionGrid(6, 0.01, 1.0 / r_C, 32)  # extent 0.05 r_C
    k = spatial_gaussian(r_C, 1.0)
    md = MassDistribution.point(1.0)
    H = -0.5 * lattice_laplacian(g)
    cm = build_cm_generator(md, k, g, H0cm=H, xi=1.0)
    co = hpz_coefficients(k, 1.0, 1.0, hbar=1.0, c=1.0)
    hp = hpz_generator(co, 1.0, 1.0, 1.0, 1.0, g, hbar=1.0)
    # compare collapse parts, kinetic terms removed
    free = hpz_generator(HPZCoefficients(0, 0, 0), 1, 1, 1, 1.0, g, hbar=1.0).matrix
    a, b = cm.matrix - free, hp.matrix - free
    big = np.abs(b) > 1e-3 * np.abs(b).max()
    assert np.max(np.abs(a[big] - b[big]) / np.abs(b[big])) < 0.05
