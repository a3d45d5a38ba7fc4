import numpy as np
import pytest

from amlmc import rng
from amlmc.field import (MaternParams, matern_covariance, build_fourier_basis,
                         sample_field, draw_sample, FieldModel, ConstantField,
                         FourierBasis)

DOMAIN = (-1.0, 1.0, -1.0, 0.0)


def test_matern_zero_lag_is_variance():
    p = MaternParams(sigma2=3.0)
    assert matern_covariance(0.0, p) == pytest.approx(3.0)
    assert matern_covariance(np.zeros(4), p) == pytest.approx(3.0 * np.ones(4))


def test_matern_half_is_exponential():
    # K_{1/2}(z) = sqrt(pi/2z) e^-z collapses the formula to sigma^2 e^{-h/r}
    p = MaternParams(sigma2=2.0, nu=0.5, corr_len=0.7)
    h = np.array([0.05, 0.3, 1.0, 2.5])
    assert np.allclose(matern_covariance(h, p), 2.0 * np.exp(-h / 0.7), rtol=1e-12)


def test_matern_monotone_decreasing():
    p = MaternParams(sigma2=1.0)
    h = np.linspace(0.0, 3.0, 50)
    c = matern_covariance(h, p)
    assert np.all(np.diff(c) < 0)


@pytest.fixture(scope="module")
def basis():
    return build_fourier_basis(MaternParams(sigma2=1.0), DOMAIN)


def test_basis_weights_descending(basis):
    assert np.all(np.diff(basis.lam) <= 1e-15)
    assert basis.n_terms == 256


def test_basis_parseval_identity():
    # summed over the full (untruncated) basis, lam_i theta_i(x)^2 ~ C(0)
    p = MaternParams(sigma2=1.5, grid=32)
    n_all = 1 + 2 * (15 * 31 + 15)   # const + cos/sin per positive frequency pair
    full = build_fourier_basis(p, DOMAIN, n_terms=n_all)
    with pytest.raises(ValueError):
        build_fourier_basis(p, DOMAIN, n_terms=n_all + 1)
    pts = np.array([[0.3, -0.2], [-0.9, -0.95], [0.0, 0.0]])
    arg = pts @ full.ang_freq.T - (np.pi / 2.0) * full.is_sin[None, :]
    theta_sq = np.cos(arg) ** 2 * np.where(full.lam > 0,
                                           full.amplitude ** 2 / np.where(full.lam > 0, full.lam, 1.0),
                                           0.0)
    total = (full.lam[None, :] * theta_sq).sum(axis=1)
    # the periodized covariance at lag zero carries ~0.8% image excess
    assert np.allclose(total, 1.5, rtol=2e-2)
    assert np.all(total >= 1.5 - 1e-9)


def test_truncation_captures_most_variance(basis):
    # nu = 6.5 decays fast: 256 modes carry nearly all of sigma^2 = 1
    # (the periodized lag-zero value sits ~0.8% above sigma^2)
    assert basis.lam.sum() > 0.995
    assert basis.lam.sum() < 1.02


def test_sample_field_zero_coefficients(basis):
    f = sample_field(basis, np.zeros(basis.n_terms))
    pts = np.random.default_rng(0).uniform(-1, 0, size=(20, 2))
    assert np.allclose(f.evaluate(pts), 1.0)


def test_sample_field_deterministic(basis):
    xi = np.random.default_rng(1).normal(size=basis.n_terms)
    f = sample_field(basis, xi)
    pts = np.array([[0.1, -0.4], [0.9, -0.9]])
    assert np.array_equal(f.evaluate(pts), f.evaluate(pts))


def test_empirical_covariance_matches_matern(basis):
    # Monte Carlo covariance oracle at a few separations
    rng_ = np.random.default_rng(42)
    n = 10 ** 4
    pts = np.array([[-0.25, -0.5], [-0.25, -0.25], [0.0, -0.5], [-0.25 + 0.5, -0.5]])
    arg = pts @ basis.ang_freq.T - (np.pi / 2.0) * basis.is_sin[None, :]
    theta_amp = np.cos(arg) * basis.amplitude
    xi = rng_.normal(size=(n, basis.n_terms))
    logs = xi @ theta_amp.T
    p = MaternParams(sigma2=1.0)
    pairs = [(0, 0, 0.0), (0, 1, 0.25), (0, 2, 0.25), (0, 3, 0.5)]
    for i, j, h in pairs:
        emp = np.mean(logs[:, i] * logs[:, j])
        model = matern_covariance(h, p)
        se = np.std(logs[:, i] * logs[:, j]) / np.sqrt(n)
        assert abs(emp - model) < 3.0 * se + 5e-3


def test_positivity_probe():
    basis = build_fourier_basis(MaternParams(sigma2=4.0), DOMAIN)
    key = rng.stream_key(7, "positivity")
    gx = np.linspace(-1, 1, 100)
    gy = np.linspace(-1, 0, 100)
    pts = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
    arg = pts @ basis.ang_freq.T - (np.pi / 2.0) * basis.is_sin[None, :]
    tha = np.cos(arg) * basis.amplitude
    xi = rng.normals_block(key, np.arange(1000, dtype=np.uint64), basis.n_terms)
    mins = (xi @ tha.T).min(axis=1)
    assert np.all(np.exp(mins) > 0.0)
    assert np.isfinite(mins).all()


def test_draw_sample_reproducible():
    model = FieldModel(kind="lognormal", sigma=2.0)
    key = rng.stream_key(0, "amlmc", 3)
    f1 = draw_sample(key, 17, model)
    f2 = draw_sample(key, 17, model)
    assert f1.value == f2.value
    f3 = draw_sample(key, 18, model)
    assert f3.value != f1.value


def test_draw_sample_sigma_zero():
    model = FieldModel(kind="lognormal", sigma=0.0)
    f = draw_sample(rng.stream_key(0, "x"), 5, model)
    assert f.value == 1.0


def test_constant_field_validation():
    with pytest.raises(ValueError):
        ConstantField(-1.0)
    with pytest.raises(ValueError):
        ConstantField(np.inf)


def test_basis_round_trip(basis):
    b2 = FourierBasis.from_dict(basis.to_dict())
    assert np.array_equal(b2.ang_freq, basis.ang_freq)
    assert np.array_equal(b2.lam, basis.lam)
    xi = np.random.default_rng(3).normal(size=basis.n_terms)
    pts = np.array([[0.2, -0.7]])
    assert sample_field(b2, xi).evaluate(pts) == sample_field(basis, xi).evaluate(pts)


def test_rng_block_matches_scalar():
    key = rng.stream_key(123, "amlmc", 2)
    blk = rng.normals_block(key, np.arange(5, dtype=np.uint64), 4)
    for i in range(5):
        assert np.array_equal(rng.normals(key, i, 4), blk[i])


def test_rng_moments():
    key = rng.stream_key(9, "moments")
    z = rng.normals_block(key, np.arange(20000, dtype=np.uint64), 2).ravel()
    assert abs(z.mean()) < 0.02
    assert abs(z.std() - 1.0) < 0.02
    assert abs(np.mean(z ** 3)) < 0.05
