import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.noise import (
    CorrelationKernel, NotPositiveSemidefinite, TimeGrid, build_augmented_covariance, estimate_correlators,
    gaussian, kernel_from_dict, markovian, ornstein_uhlenbeck, read_paths, sample_paths, white, write_paths,
    NoisePathSet,
)

GRID = TimeGrid(0.05, 20)


def families():
    return {
        "white": white(1.3),
        "white-real": white(1.3, pseudo="equal"),
        "ou": ornstein_uhlenbeck(0.3),
        "ou-real": ornstein_uhlenbeck(0.3, pseudo="equal"),
        "ou-osc": ornstein_uhlenbeck(0.3, omega=2.0),
        "gaussian": gaussian(0.2),
        "markovian": markovian(np.array([[1.0, 0.2], [0.2, 0.5]])),
    }


def test_white_covariance_diagonal():
    g = TimeGrid(0.01, 30)
    cov = build_augmented_covariance(white(2.0), g)
    assert np.array_equal(cov, np.diag(np.diag(cov)))
    assert np.allclose(np.diag(cov), 2.0 / (2 * g.dt))


def test_real_kernel_has_zero_imaginary_block():
    g = TimeGrid(0.05, 30)
    cov = build_augmented_covariance(ornstein_uhlenbeck(0.2, pseudo="equal"), g)
    m = g.n_points
    assert not np.any(cov[m:, m:])
    assert not np.any(cov[:m, m:])


def test_zero_kernel_gives_zero_covariance():
    k = CorrelationKernel(1, "zero")
    assert not np.any(build_augmented_covariance(k, GRID))


def test_non_psd_kernel_rejected():
    bad = markovian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotPositiveSemidefinite):
        build_augmented_covariance(bad, GRID)


def test_kernel_hermitian_and_symmetric():
    k = ornstein_uhlenbeck(0.4, omega=1.5, n_channels=2)
    t, s = np.array([0.3, 1.1]), np.array([0.9, 0.2])
    D, S = k.D(t, s), k.S(t, s)
    Dt = k.D(s, t)
    assert np.allclose(D, np.conj(Dt.transpose(1, 0, 2)))
    assert np.allclose(S, k.S(s, t).transpose(1, 0, 2))


def test_empty_sample():
    p = sample_paths(white(1.0), GRID, 0, 1)
    assert p.n_paths == 0


def test_sampling_reproducible_and_chunk_independent():
    k = ornstein_uhlenbeck(0.2)
    a = sample_paths(k, GRID, 10, 99)
    b = sample_paths(k, GRID, 10, 99)
    assert np.array_equal(a.paths, b.paths)
    c = np.concatenate([sample_paths(k, GRID, 4, 99).paths, sample_paths(k, GRID, 6, 99, start=4).paths])
    assert np.array_equal(a.paths, c)
    assert not np.array_equal(a.paths, sample_paths(k, GRID, 10, 100).paths)


def test_white_variance():
    n = 10_000
    p = sample_paths(white(1.0), GRID, n, 5)
    v = np.abs(p.paths[:, 0, 7]) ** 2
    se = v.std(ddof=1) / np.sqrt(n)
    assert abs(v.mean() - 1.0 / GRID.dt) < 5 * se


def test_ou_autocorrelation_at_tau_c():
    g = TimeGrid(0.05, 40)
    n = 10_000
    p = sample_paths(ornstein_uhlenbeck(0.5), g, n, 6)
    x = np.conj(p.paths[:, 0, 10]) * p.paths[:, 0, 20]  # lag 0.5 = tau_c
    se = np.sqrt(x.real.var(ddof=1) / n)
    assert abs(x.mean().real - np.exp(-1)) < 5 * se
    assert abs(x.mean().imag) < 5 * np.sqrt(x.imag.var(ddof=1) / n)


def test_estimators_degenerate_cases():
    zero = NoisePathSet(GRID, np.zeros((3, 1, GRID.n_points), complex), 0)
    est = estimate_correlators(zero)
    assert not np.any(est.D) and not np.any(est.S)
    rng = np.random.default_rng(1)
    h = rng.normal(size=GRID.n_points) + 1j * rng.normal(size=GRID.n_points)
    dup = NoisePathSet(GRID, np.stack([h[None], h[None]]), 0)
    est = estimate_correlators(dup)
    # exact up to the rounding of the BLAS product
    np.testing.assert_allclose(est.D[0, 0], np.outer(h.conj(), h), rtol=0, atol=1e-14)


@pytest.mark.parametrize("name", list(families()))
def test_round_trip_per_family(name):
    k = families()[name]
    g = TimeGrid(0.1, 6)
    n = 8000
    est = estimate_correlators(sample_paths(k, g, n, 11))
    D, S = k.on_grid(g)
    tol = 5 * est.D_se + 1e-12
    assert np.all(np.abs(est.D - D) <= tol + 5 * est.D_se.max() * 0.1)
    assert np.all(np.abs(est.S - S) <= 5 * est.S_se + 5 * est.S_se.max() * 0.1 + 1e-12)


def test_sample_mean_zero():
    n = 5000
    p = sample_paths(gaussian(0.2), GRID, n, 3).paths[:, 0, :]
    se = p.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(p.mean(axis=0)) < 5 * se * np.sqrt(2))


@given(st.sampled_from(["white-real", "ou-real"]), st.integers(0, 2**32 - 1))
@settings(max_examples=10)
def test_real_kernels_give_real_paths(name, seed):
    p = sample_paths(families()[name], GRID, 3, seed)
    assert not np.any(p.paths.imag)


def test_standard_error_shrinks_by_sqrt2():
    k = ornstein_uhlenbeck(0.3)
    g = TimeGrid(0.1, 4)
    a = estimate_correlators(sample_paths(k, g, 4000, 21)).D_se
    b = estimate_correlators(sample_paths(k, g, 8000, 21)).D_se
    ratio = np.median(a / b)
    assert abs(ratio / np.sqrt(2) - 1) < 0.2


@given(st.floats(0.05, 5.0), st.floats(0.05, 5.0), st.sampled_from(["zero", "equal"]))
def test_kernel_spec_round_trip(tau0, tau_c, pseudo):
    k = kernel_from_dict({"family": "ou", "params": {"tau_c": tau_c, "pseudo": pseudo}})
    ref = ornstein_uhlenbeck(tau_c, pseudo=pseudo)
    u = np.linspace(-2, 2, 7)
    assert np.array_equal(k.D(u, 0 * u), ref.D(u, 0 * u))
    assert np.array_equal(k.S(u, 0 * u), ref.S(u, 0 * u))
    w = kernel_from_dict({"family": "white", "params": {"tau0": tau0}})
    assert np.array_equal(w.delta_parts()[0], white(tau0).delta_parts()[0])


@given(st.integers(1, 3), st.integers(0, 5), st.integers(0, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_binary_round_trip(tmp_path_factory, n_ch, K, n_paths, seed):
    g = TimeGrid(0.25, K, t0=0.5)
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(n_paths, n_ch, K + 1)) + 1j * rng.normal(size=(n_paths, n_ch, K + 1))
    f = tmp_path_factory.mktemp("clnp") / "p.bin"
    write_paths(f, NoisePathSet(g, h, seed))
    back = read_paths(f, seed)
    assert np.array_equal(back.paths, h)
    assert back.grid == g


def test_binary_rejects_garbage(tmp_path):
    f = tmp_path / "x.bin"
    f.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        read_paths(f)
