import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from krflow.core import SeedSpec
from krflow.densities import (
    Banana,
    DensityDomainError,
    Gaussian,
    GaussianMixture,
    Product,
    Sine,
    SupportBox,
    UniformBox,
    UnsupportedDensityError,
    density_from_config,
    quadrature_conditional_cdf,
    quadrature_normalization,
)
from krflow.kr_exact import rosenblatt_transform

LOG_2PI = math.log(2 * math.pi)


def all_kinds():
    return {
        "gaussian": Gaussian.bivariate(0.3, -0.2, 1.5, 0.7, rho=0.6),
        "mixture": GaussianMixture.eight_gaussians(),
        "circles": GaussianMixture.two_circles(),
        "banana": Banana(),
        "sine": Sine([1, 3]),
        "uniform": UniformBox([0.0, -1.0], [2.0, 1.0]),
        "product": Product([Gaussian.standard(1), UniformBox([0.0], [1.0])]),
    }


class TestSupportBox:
    def test_validation(self):
        with pytest.raises(ValueError):
            SupportBox([0.0, 1.0], [1.0, 1.0])

    def test_grid_is_cell_centred(self):
        g = SupportBox([0.0, 0.0], [1.0, 2.0]).grid(2)
        np.testing.assert_allclose(g, [[0.25, 0.5], [0.25, 1.5], [0.75, 0.5], [0.75, 1.5]])

    def test_contains_and_permute(self):
        box = SupportBox([0.0, -1.0], [1.0, 1.0])
        assert box.contains([[0.0, 1.0]])[0]
        assert not box.contains([[1.1, 0.0]])[0]
        assert box.permuted([1, 0]) == SupportBox([-1.0, 0.0], [1.0, 1.0])


class TestLogDensity:
    def test_standard_gaussian_origin(self):
        assert Gaussian.standard(2).log_density([0.0, 0.0]) == pytest.approx(-LOG_2PI, abs=1e-14)

    def test_sine_values(self):
        f = Sine([1, 3])
        assert f.log_density([0.0, 0.0]) == 0.0
        assert f.log_density([0.25, 1 / 12]) == pytest.approx(math.log(2), abs=1e-14)

    def test_sine_zero_set_is_domain_error(self):
        with pytest.raises(DensityDomainError):
            Sine([1, 1]).log_density([0.25, 0.75])

    def test_outside_support_is_minus_inf(self):
        assert Gaussian.standard(2).log_density([7.0, 0.0]) == -math.inf
        # the analytic formula is still available for source densities
        assert Gaussian.standard(2).log_density([7.0, 0.0], extend=True) == pytest.approx(-LOG_2PI - 24.5)

    def test_gaussian_matches_scipy(self):
        f = Gaussian.bivariate(0.3, -0.2, 1.5, 0.7, rho=0.6)
        x = np.array([[0.1, 0.2], [1.0, -1.0]])
        np.testing.assert_allclose(f.log_density(x), stats.multivariate_normal(f.mean, f.cov).logpdf(x), rtol=1e-13)

    def test_banana_factorization(self):
        x = np.array([1.3, -0.4])
        expected = stats.norm.logpdf(-0.4) + stats.norm(0.08, math.sqrt(0.5)).logpdf(1.3)
        assert Banana().log_density(x) == pytest.approx(expected, rel=1e-13)


class TestGradLogDensity:
    def test_analytic_cases(self):
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(Gaussian.standard(2).grad_log_density(x), -x)
        np.testing.assert_array_equal(UniformBox.unit(2).grad_log_density(x), [0.0, 0.0])

    @pytest.mark.parametrize("name", ["gaussian", "mixture", "circles", "banana", "sine", "product"])
    def test_central_differences(self, name):
        f = all_kinds()[name]
        rng = np.random.default_rng(0)
        box = f.support
        x = box.lo + box.width * rng.uniform(0.2, 0.8, size=(100, f.dim))
        if name == "sine":
            x = x[f.density(x) > 0.05]
        if name == "banana":
            x = f.sample(100, 3)
        h = 1e-5
        fd = np.empty_like(x)
        for j in range(f.dim):
            e = np.zeros(f.dim)
            e[j] = h
            fd[:, j] = (f.log_density(x + e) - f.log_density(x - e)) / (2 * h)
        g = f.grad_log_density(x)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(g - fd) / scale) < 1e-6


class TestSampling:
    def test_deterministic(self):
        f = Banana()
        np.testing.assert_array_equal(f.sample(50, SeedSpec(1, 2)), f.sample(50, SeedSpec(1, 2)))

    def test_uniform_mean(self):
        x = UniformBox.unit(2).sample(100_000, 0)
        np.testing.assert_allclose(x.mean(axis=0), [0.5, 0.5], atol=0.01)

    def test_banana_mean(self):
        x = Banana().sample(100_000, 0)
        assert abs(x[:, 0].mean() - 0.5) < 0.02

    @pytest.mark.parametrize("name", list(all_kinds()))
    def test_rows_inside_support(self, name):
        f = all_kinds()[name]
        assert f.support.contains(f.sample(2000, 5)).all()

    def test_gaussian_mean_within_four_stderr(self):
        f = Gaussian.bivariate(1.0, -2.0, 2.0, 0.5, rho=-0.3)
        x = f.sample(100_000, 11)
        se = np.sqrt(np.diag(f.cov) / len(x))
        assert np.all(np.abs(x.mean(axis=0) - f.mean) < 4 * se)

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            Banana().sample(0, 1)

    @pytest.mark.parametrize("name", ["gaussian", "mixture", "banana", "sine", "uniform", "product"])
    def test_rosenblatt_ks(self, name):
        f = all_kinds()[name]
        u = rosenblatt_transform(f).evaluate(f.sample(10_000, 21))
        for k in range(f.dim):
            assert stats.kstest(u[:, k], "uniform").pvalue > 1e-3


class TestConditionals:
    def test_gaussian_symmetry_and_value(self):
        f = Gaussian.standard(2)
        np.testing.assert_allclose(f.conditional_cdf(0, [0.0, 0.0], [[-2.0], [3.0]]), 0.5)
        assert f.conditional_cdf(0, 1.0, [0.0])[0] == pytest.approx(0.8413447460685429, abs=1e-15)

    def test_bivariate_conditional_uses_sigma1_over_sigma2(self):
        # validated against direct quadrature of the joint density
        f = Gaussian.bivariate(0.5, -1.0, 2.0, 0.5, rho=0.8)
        xk = np.array([-1.0, 0.5, 2.0])
        tail = np.array([[-1.2], [-0.7], [-0.5]])
        closed = f.conditional_cdf(0, xk, tail)
        quad = quadrature_conditional_cdf(f, 0, xk, tail, nodes=256)
        np.testing.assert_allclose(closed, quad, atol=1e-10)
        m = 0.5 + 0.8 * 2.0 / 0.5 * (tail[:, 0] + 1.0)
        np.testing.assert_allclose(closed, stats.norm.cdf((xk - m) / (2.0 * math.sqrt(1 - 0.64))), atol=1e-14)

    def test_sine_conditional(self):
        f = Sine([1, 3])
        expected = 0.5 + (1 - math.cos(math.pi)) / (2 * math.pi)
        assert f.conditional_cdf(0, 0.5, [1 / 12])[0] == pytest.approx(expected, abs=1e-14)
        assert expected == pytest.approx(0.8183099, abs=1e-7)
        val, _ = integrate.quad(lambda t: 1 + math.sin(2 * math.pi * t), 0, 0.5)
        assert val == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("name", ["gaussian", "mixture", "banana", "sine", "uniform", "product"])
    def test_monotone_in_xk(self, name):
        f = all_kinds()[name]
        rng = np.random.default_rng(3)
        grid = np.linspace(f.support.lower[0], f.support.upper[0], 200)
        for _ in range(20):
            t = f.support.lower[1] + f.support.width[1] * rng.uniform()
            c = f.conditional_cdf(0, grid, np.full((200, 1), t))
            assert np.all(np.diff(c) >= -1e-15)
        c = f.conditional_cdf(1, np.linspace(f.support.lower[1], f.support.upper[1], 200))
        assert np.all(np.diff(c) >= -1e-15)

    @pytest.mark.parametrize("name", ["gaussian", "mixture", "banana", "sine"])
    def test_closed_form_matches_quadrature(self, name):
        # closed forms ignore the box, so they differ by at most the truncated mass (< 1e-6)
        f = all_kinds()[name]
        x = f.sample(30, 8)
        np.testing.assert_allclose(
            f.conditional_cdf(0, x[:, 0], x[:, 1:]), quadrature_conditional_cdf(f, 0, x[:, 0], x[:, 1:], 256), atol=1e-6
        )
        np.testing.assert_allclose(f.conditional_cdf(1, x[:, 1]), quadrature_conditional_cdf(f, 1, x[:, 1], None, 256), atol=1e-6)

    def test_cdf_plus_sf(self):
        f = GaussianMixture.eight_gaussians()
        x = f.sample(100, 1)
        np.testing.assert_allclose(f.conditional_cdf(0, x[:, 0], x[:, 1:]) + f.conditional_sf(0, x[:, 0], x[:, 1:]), 1.0, atol=1e-14)

    def test_bad_index(self):
        with pytest.raises(IndexError):
            Banana().conditional_cdf(2, 0.0)

    def test_quadrature_limited_to_two_dims(self):
        with pytest.raises(UnsupportedDensityError):
            quadrature_conditional_cdf(Gaussian.standard(3), 0, [0.0], [[0.0, 0.0]])


class TestNormalization:
    def test_uniform(self):
        assert quadrature_normalization(UniformBox.unit(2), 64) == pytest.approx(1.0, abs=1e-14)

    def test_sine(self):
        assert quadrature_normalization(Sine([1, 3]), 256) == pytest.approx(1.0, abs=1e-9)

    def test_truncated_gaussian(self):
        assert quadrature_normalization(Gaussian.standard(2), 256) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("name", list(all_kinds()))
    def test_every_kind(self, name):
        assert quadrature_normalization(all_kinds()[name], 256) == pytest.approx(1.0, abs=1e-6)

    def test_banana_box_mass(self):
        # the default box keeps the truncated mass below 1e-6
        assert 1 - quadrature_normalization(Banana(), 512) < 1e-6

    def test_limits(self):
        with pytest.raises(ValueError):
            quadrature_normalization(UniformBox.unit(2), 8)
        with pytest.raises(UnsupportedDensityError):
            quadrature_normalization(UniformBox.unit(3), 16)

    @settings(max_examples=20, deadline=None)
    @given(x1=st.floats(0.0, 1.0), k1=st.integers(1, 5), k2=st.integers(1, 7))
    def test_sine_marginal_is_uniform(self, x1, k1, k2):
        f = Sine([k1, k2])
        t, w = np.polynomial.legendre.leggauss(64)
        x2 = 0.5 * (t + 1)
        val = 0.5 * np.sum(w * f.density(np.stack([np.full(64, x1), x2], axis=1)))
        assert val == pytest.approx(1.0, abs=1e-10)


class TestConfig:
    @pytest.mark.parametrize("name", list(all_kinds()))
    def test_round_trip(self, name):
        f = all_kinds()[name]
        g = density_from_config(f.to_config())
        x = f.sample(20, 0)
        np.testing.assert_allclose(g.log_density(x), f.log_density(x), rtol=1e-14)

    def test_presets_and_rho(self):
        assert density_from_config({"kind": "gaussian_mixture", "preset": "eight_gaussians"}).dim == 2
        f = density_from_config({"kind": "gaussian", "rho": 0.7})
        assert f.cov[0, 1] == pytest.approx(0.7)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            density_from_config({"kind": "moons"})

    def test_permuted_log_density(self):
        f = Banana()
        p = f.permuted([1, 0])
        x = f.sample(10, 2)
        np.testing.assert_allclose(p.log_density(x[:, [1, 0]]), f.log_density(x))
