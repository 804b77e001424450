import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collapsar.errors import InvalidArgument, NotPositiveSemiDefinite, UseModeListDirectly
from collapsar.kernels import (CosineSum, ExponentialDecay, GridTabulated, ModeDecomposition, WhiteApprox,
                               double_integral, factorize, kernel_from_record, kernel_to_record,
                               lag_table, reconstruct, spectral_density)


def test_cosine_sum_round_trip_exact():
    g = [np.array([[1.0, 0.3], [0.3, 0.5]]), np.array([[0.2, 0.0], [0.0, 0.7]])]
    k = CosineSum(g, [1.3, 4.0])
    md = factorize(k)
    tau = np.linspace(-7, 7, 301)
    assert np.abs(reconstruct(md, tau) - k(tau)).max() <= 1e-14


def test_exponential_decay_error_is_the_spectral_tail():
    # Lorentzian spectrum (2/pi)/(1 + w^2): the mass above the cutoff is
    # (2/pi)(pi/2 - atan(w_max)); the midpoint sum misses exactly that at tau = 0.
    k = ExponentialDecay(1.0, 1.0)
    tau = np.linspace(-5, 5, 1001)
    for w_max in (16.0, 64.0):
        tail = (2 / np.pi) * (np.pi / 2 - np.arctan(w_max))
        err = np.abs(reconstruct(factorize(k, int(4 * w_max), w_max), tau) - k(tau)).max()
        assert err == pytest.approx(tail, rel=1e-3)


def test_exponential_decay_converges_with_band_at_fixed_spacing():
    k = ExponentialDecay(1.0, 1.0)
    tau = np.linspace(-5, 5, 1001)
    errs = [np.abs(reconstruct(factorize(k, m, m / 4.0), tau) - k(tau)).max() for m in (32, 64, 128, 256)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.01


def test_lorentzian_spectral_density_normalisation():
    # int_0^inf S(w) dw = D(0)
    k = ExponentialDecay(2.0, 0.5)
    w = np.linspace(0, 4000, 40001)
    s = spectral_density(k, w)[:, 0, 0]
    assert np.trapezoid(s, w) == pytest.approx(2.0, rel=1e-3)


def test_white_kernel_on_nyquist_grid_is_diagonal():
    dt = 0.01
    md = factorize(WhiteApprox(1.0, np.pi / dt), modes=200, omega_max=np.pi / dt)
    lags = lag_table(md, dt, 199)[:, 0, 0]
    assert lags[0] == pytest.approx(1.0 / dt, rel=1e-12)
    assert np.abs(lags[1:]).max() < 1e-9 / dt


def test_cosine_sum_refuses_spectral_density():
    with pytest.raises(UseModeListDirectly):
        spectral_density(CosineSum([1.0], [1.0]), [0.5])


def test_invalid_kernels():
    with pytest.raises(InvalidArgument):
        ExponentialDecay(1.0, 0.0)
    with pytest.raises(NotPositiveSemiDefinite):
        ExponentialDecay(np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)
    with pytest.raises(InvalidArgument):
        factorize(ExponentialDecay(1.0, 1.0), 0)


def test_bartlett_taper_keeps_density_nonnegative():
    taus = np.linspace(0, 3, 61)
    # box-shaped autocorrelation estimate has a negative raw transform
    box = GridTabulated(taus, np.ones_like(taus), taper="bartlett")
    w = np.linspace(0, 30, 301)
    assert spectral_density(box, w).min() >= -1e-12
    with pytest.raises(NotPositiveSemiDefinite):
        spectral_density(GridTabulated(taus, np.ones_like(taus), taper="none"), w)


def test_double_integral_closed_forms_match_quadrature():
    t = 1.7
    u = np.linspace(0, t, 1601)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    for k in (ExponentialDecay(1.0, 0.4), CosineSum([1.0], [2.0]), WhiteApprox(1.0, 20.0)):
        vals = k(uu - vv)[..., 0, 0]
        quad = np.trapezoid(np.trapezoid(vals, u, axis=1), u)
        assert double_integral(k, t)[0, 0] == pytest.approx(quad, rel=2e-3)


def test_record_round_trip():
    for k in (CosineSum([[[1.0]]], [2.0]), ExponentialDecay(0.5, 0.1), WhiteApprox(1.0, 10.0),
              GridTabulated([0, 1, 2], [1.0, 0.5, 0.0])):
        k2 = kernel_from_record(kernel_to_record(k))
        tau = np.linspace(-3, 3, 13)
        assert np.allclose(k(tau), k2(tau))


def test_mode_decomposition_json():
    md = factorize(ExponentialDecay(1.0, 1.0), 8, 4.0)
    md2 = ModeDecomposition.from_json(md.to_json())
    assert np.array_equal(md.omega, md2.omega) and np.array_equal(md.kappa, md2.kappa)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.01, 3.0), min_size=1, max_size=4), st.integers(0, 2**31))
def test_reconstructed_block_covariance_is_psd(omegas, seed):
    rng = np.random.default_rng(seed)
    g = []
    for _ in omegas:
        a = rng.normal(size=(2, 2))
        g.append(a @ a.T)
    md = factorize(CosineSum(g, omegas))
    t = np.linspace(0, 4, 12)
    blocks = reconstruct(md, t[:, None] - t[None, :]).transpose(0, 2, 1, 3).reshape(24, 24)
    assert np.linalg.eigvalsh(blocks).min() > -1e-10 * np.abs(blocks).max()
