import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krflow.densities import Banana, Gaussian, GaussianMixture, Product, SupportBox, UniformBox, UnsupportedDensityError
from krflow.kr_exact import AffineTriangularMap, gaussian_to_gaussian_kr, kr_to_standard_gaussian
from krflow.objective import (
    LossConfig,
    OptimizerOptions,
    empirical_loss,
    kl_change_of_variables_check,
    loss_gradient,
    optimize,
    optimize_separable,
    per_coordinate_loss,
    pointwise_loss,
    prepare_data,
)
from krflow.param_maps import JacobianFlow, MonotoneMap, OutOfSupportError

G2 = Gaussian.standard(2)
RHO7 = Gaussian.bivariate(0.0, 0.0, 1.0, 1.0, rho=0.7)
AFFINE = dict(diag_degrees=0, tail_degrees=0, shift_degrees=1)


def perturbed(box, seed, scale=0.2, **kw):
    m = MonotoneMap.identity(box, **kw)
    return m.with_theta(m.theta + scale * np.random.default_rng(seed).normal(size=m.n_params))


def fd_gradient(spec, x, cfg, h=1e-6):
    g = np.empty(spec.n_params)
    for i in range(spec.n_params):
        e = np.zeros(spec.n_params)
        e[i] = h
        g[i] = (empirical_loss(spec.with_theta(spec.theta + e), x, cfg) - empirical_loss(spec.with_theta(spec.theta - e), x, cfg)) / (2 * h)
    return g


class TestLoss:
    def test_identity_map_value(self):
        x = RHO7.sample(100, 0)
        m = MonotoneMap.identity(RHO7.support)
        expected = np.mean(0.5 * np.sum(x**2, axis=1) + math.log(2 * math.pi))
        assert empirical_loss(m, x, LossConfig(G2)) == pytest.approx(expected, rel=1e-12)

    def test_f_term_gives_zero_for_exact_map(self):
        x = RHO7.sample(1000, 1)
        psi = pointwise_loss(gaussian_to_gaussian_kr(RHO7), x, LossConfig(G2, RHO7, include_f_term=True))
        np.testing.assert_allclose(psi, 0.0, atol=1e-12)

    def test_f_term_needs_target(self):
        with pytest.raises(ValueError):
            LossConfig(G2, include_f_term=True)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), f_term=st.booleans())
    def test_chain_rule_split(self, seed, f_term):
        f = [RHO7, Banana(), GaussianMixture.eight_gaussians()][seed % 3]
        m = perturbed(f.support, seed, scale=0.1)
        x = f.sample(50, seed)
        cfg = LossConfig(G2, f, include_f_term=f_term)
        assert abs(per_coordinate_loss(m, x, cfg).sum() - empirical_loss(m, x, cfg)) <= 1e-10

    def test_per_coordinate_rejects_flows(self):
        flow = JacobianFlow.alternating(MonotoneMap.identity(SupportBox([-1.0, -1.0], [1.0, 1.0])), 2)
        with pytest.raises(UnsupportedDensityError):
            per_coordinate_loss(flow, np.zeros((1, 2)), LossConfig(G2))


class TestPrepareData:
    def test_boundary_rows_nudged(self):
        m = MonotoneMap(SupportBox([0.0, 0.0], [1.0, 1.0]))
        x = prepare_data(m, [[0.0, 1.0 + 5e-13]])
        assert 0.0 < x[0, 0] and x[0, 1] < 1.0

    def test_out_of_support_row_reported(self):
        m = MonotoneMap(SupportBox([0.0, 0.0], [1.0, 1.0]))
        with pytest.raises(OutOfSupportError) as exc:
            prepare_data(m, [[0.5, 0.5], [0.5, 0.5], [1.5, 0.5]])
        assert exc.value.row == 2

    def test_shape_checks(self):
        m = MonotoneMap(SupportBox([0.0, 0.0], [1.0, 1.0]))
        with pytest.raises(ValueError):
            prepare_data(m, np.zeros((0, 2)))
        with pytest.raises(ValueError):
            prepare_data(m, np.zeros((3, 3)))


class TestGradient:
    @pytest.mark.parametrize("integrand", ["exp", "square"])
    def test_map_gradient(self, integrand):
        f = Banana()
        m = perturbed(f.support, 3, integrand=integrand)
        x = f.sample(100, 2)
        cfg = LossConfig(G2)
        g, fd = loss_gradient(m, x, cfg), fd_gradient(m, x, cfg)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-6

    def test_flow_gradient(self):
        box = SupportBox([-1.0, -1.0], [1.0, 1.0])
        flow = JacobianFlow.alternating(MonotoneMap.identity(box), 2)
        flow = flow.with_theta(flow.theta + 0.05 * np.random.default_rng(0).normal(size=flow.n_params))
        x = 0.3 * np.random.default_rng(1).uniform(-1, 1, size=(80, 2))
        cfg = LossConfig(G2)
        g, fd = loss_gradient(flow, x, cfg), fd_gradient(flow, x, cfg)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-6

    def test_non_parametric_map_rejected(self):
        with pytest.raises(TypeError):
            loss_gradient(gaussian_to_gaussian_kr(RHO7), RHO7.sample(5, 0), LossConfig(G2))


class TestOptimize:
    def test_affine_fit_matches_empirical_cholesky(self):
        # the affine maximum-likelihood map whitens the empirical covariance
        x = RHO7.sample(2000, 5)
        res = optimize(MonotoneMap.identity(RHO7.support, **AFFINE), x, LossConfig(G2), OptimizerOptions(grad_tol=1e-6))
        assert res.converged
        fitted = MonotoneMap.identity(RHO7.support, **AFFINE).with_theta(res.theta_hat)
        emp = Gaussian(x.mean(axis=0), np.cov(x.T, bias=True), half_width=6.0)
        grid = RHO7.support.grid(7)
        np.testing.assert_allclose(fitted(grid), gaussian_to_gaussian_kr(emp)(grid), atol=1e-6)

    def test_history_nonincreasing(self):
        f = Banana()
        res = optimize(MonotoneMap.identity(f.support), f.sample(500, 0), LossConfig(G2), OptimizerOptions(max_iters=50))
        assert np.all(np.diff(res.loss_history) < 0)
        assert res.iterations == len(res.loss_history) - 1
        assert set(res.to_json()) >= {"final_loss", "converged", "diagnostics"}
        assert "derivative_cap" in res.diagnostics

    def test_zero_iterations_not_converged(self):
        x = RHO7.sample(100, 0)
        res = optimize(MonotoneMap.identity(RHO7.support, **AFFINE), x, LossConfig(G2), OptimizerOptions(max_iters=0))
        assert not res.converged and res.iterations == 0

    def test_gradient_descent_rule(self):
        x = RHO7.sample(500, 0)
        m = MonotoneMap.identity(RHO7.support, **AFFINE)
        res = optimize(m, x, LossConfig(G2), OptimizerOptions(step_rule="gd", max_iters=200))
        assert res.final_loss < empirical_loss(m, x, LossConfig(G2))

    def test_flow_training_decreases_loss(self):
        box = SupportBox([-1.0, -1.0], [1.0, 1.0])
        flow = JacobianFlow.alternating(MonotoneMap.identity(box), 2)
        x = 0.5 * UniformBox([-1.0, -1.0], [1.0, 1.0]).sample(300, 0)
        cfg = LossConfig(G2)
        res = optimize(flow, x, cfg, OptimizerOptions(max_iters=30))
        assert res.final_loss < empirical_loss(flow, x, cfg)

    def test_separable_matches_joint(self):
        f = Product([Gaussian.standard(1), UniformBox([0.0], [1.0])])
        x = f.sample(1000, 4)
        m = MonotoneMap.identity(f.support)
        opts = OptimizerOptions(grad_tol=1e-9, max_iters=3000)
        joint = optimize(m, x, LossConfig(G2), opts)
        sep = optimize_separable(m, x, LossConfig(G2), opts)
        assert abs(joint.final_loss - sep.final_loss) <= 1e-6

    def test_separable_needs_product_source(self):
        with pytest.raises(UnsupportedDensityError):
            optimize_separable(MonotoneMap.identity(RHO7.support), RHO7.sample(10, 0), LossConfig(RHO7))


class TestKlCheck:
    def test_identity_gives_closed_form(self):
        chk = kl_change_of_variables_check(AffineTriangularMap.identity(RHO7.support), RHO7, G2, 50_000, 0)
        assert chk.agree
        assert chk.backward == pytest.approx(-0.5 * math.log(0.51), abs=4 * chk.se_backward)

    def test_banana_exact_map(self):
        chk = kl_change_of_variables_check(kr_to_standard_gaussian(Banana()), Banana(), G2, 2000, 1)
        assert abs(chk.forward) < 1e-8 and abs(chk.backward) < 1e-8
