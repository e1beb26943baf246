import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krflow.densities import SupportBox
from krflow.kr_exact import invert_triangular_map
from krflow.param_maps import (
    JacobianFlow,
    MonotoneMap,
    OutOfSupportError,
    derivative_cap_diagnostic,
    flow_eval_with_logdet,
    legendre_with_derivative,
    map_diag_partial,
    map_eval,
    map_from_json,
    map_param_jacobian,
)

BOX2 = SupportBox([-2.0, -3.0], [2.0, 1.0])
BOX3 = SupportBox([-1.0, -1.0, 0.0], [1.0, 2.0, 1.0])


def random_map(box=BOX2, seed=0, scale=0.3, **kw):
    kw.setdefault("diag_degrees", 2)
    kw.setdefault("tail_degrees", 2)
    kw.setdefault("shift_degrees", 2)
    m = MonotoneMap.identity(box, **kw)
    rng = np.random.default_rng(seed)
    return m.with_theta(m.theta + scale * rng.normal(size=m.n_params))


def inside(box, n, seed=1):
    rng = np.random.default_rng(seed)
    return box.lo + box.width * rng.uniform(0.02, 0.98, size=(n, box.dim))


def test_legendre_derivative():
    t = np.linspace(-1, 1, 9)
    P, dP = legendre_with_derivative(t, 5)
    for a in range(5):
        c = np.zeros(5)
        c[a] = 1.0
        np.testing.assert_allclose(dP[:, a], np.polynomial.legendre.legval(t, np.polynomial.legendre.legder(c)), atol=1e-13)


class TestStructure:
    def test_parameter_count(self):
        m = MonotoneMap(BOX3, diag_degrees=2, tail_degrees=1, shift_degrees=3)
        # component k: shift (3+1)^(d-k-1) + integrand 3 * 2^(d-k-1)
        assert [lay.size for lay in m.layouts] == [16 + 12, 4 + 6, 1 + 3]
        assert m.n_params == 42

    def test_identity(self):
        m = MonotoneMap.identity(BOX2)
        x = inside(BOX2, 50)
        np.testing.assert_allclose(m(x), x, atol=1e-13)
        np.testing.assert_allclose(m.diag_partials(x), 1.0, atol=1e-13)

    def test_identity_square_integrand(self):
        m = MonotoneMap.identity(BOX2, integrand="square")
        x = inside(BOX2, 50)
        np.testing.assert_allclose(m(x), x, atol=1e-12)

    def test_standardizing(self):
        x = inside(BOX2, 200)
        y = MonotoneMap(BOX2).standardizing(x)(x)
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-12)

    def test_theta_read_only_and_length(self):
        m = MonotoneMap(BOX2)
        with pytest.raises(ValueError):
            m.theta[0] = 1.0
        with pytest.raises(ValueError):
            m.with_theta(np.zeros(3))
        with pytest.raises(ValueError):
            MonotoneMap(BOX2, integrand="softplus")

    def test_out_of_support(self):
        with pytest.raises(OutOfSupportError) as exc:
            MonotoneMap(BOX2)([[0.0, 0.0], [3.0, 0.0]])
        assert exc.value.row == 1

    def test_affine_family_is_affine(self):
        m = random_map(diag_degrees=0, tail_degrees=0, shift_degrees=1, scale=1.0)
        x = inside(BOX2, 3)
        lam = 0.3
        mix = lam * x[0] + (1 - lam) * x[1]
        np.testing.assert_allclose(m(mix), lam * m(x[0]) + (1 - lam) * m(x[1]), atol=1e-12)


class TestMonotonicity:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), integrand=st.sampled_from(["exp", "square"]))
    def test_strictly_increasing_in_own_coordinate(self, seed, integrand):
        m = random_map(BOX3, seed=seed, scale=1.0, integrand=integrand)
        x = inside(BOX3, 20, seed)
        assert np.all(m.diag_partials(x) > 0)
        for k in range(3):
            grid = np.repeat(x[:1], 50, axis=0)
            grid[:, k] = np.linspace(BOX3.lower[k], BOX3.upper[k], 50)
            assert np.all(np.diff(m(grid)[:, k]) > 0)

    def test_triangular_dependence(self):
        m = random_map(BOX3, scale=1.0)
        x = inside(BOX3, 10)
        x2 = x.copy()
        x2[:, 0] += 0.1
        y, y2 = m(x), m(x2)
        np.testing.assert_array_equal(y[:, 1:], y2[:, 1:])
        assert np.all(y[:, 0] != y2[:, 0])


class TestDerivatives:
    @pytest.mark.parametrize("integrand", ["exp", "square"])
    def test_param_jacobian_by_finite_differences(self, integrand):
        m = random_map(BOX3, seed=4, integrand=integrand)
        x = inside(BOX3, 30)
        dS, dD = map_param_jacobian(m, x)
        h = 1e-6
        for i in range(m.n_params):
            e = np.zeros(m.n_params)
            e[i] = h
            mp, mm = m.with_theta(m.theta + e), m.with_theta(m.theta - e)
            np.testing.assert_allclose(dS[:, :, i], (mp(x) - mm(x)) / (2 * h), rtol=1e-5, atol=1e-7)
            np.testing.assert_allclose(dD[:, :, i], (mp.diag_partials(x) - mm.diag_partials(x)) / (2 * h), rtol=1e-5, atol=1e-7)

    def test_diag_partial_by_finite_differences(self):
        m = random_map(BOX3, seed=5)
        x = inside(BOX3, 30)
        h = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd = (m(x + e)[:, k] - m(x - e)[:, k]) / (2 * h)
            np.testing.assert_allclose(map_diag_partial(m, x, k), fd, rtol=1e-7)

    def test_jacobian_x_and_logdiag_gradient(self):
        m = random_map(BOX3, seed=6)
        x = inside(BOX3, 20)
        bases = m.basis(x, derivs=True)
        fw = m.forward(bases)
        J = m.jacobian_x(bases, fw)
        G = m.grad_x_logdiag(bases, fw)
        assert np.all(np.tril(J[0], -1) == 0)
        h = 1e-6
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            np.testing.assert_allclose(J[:, :, j], (m(x + e) - m(x - e)) / (2 * h), rtol=1e-6, atol=1e-8)
            fd = (m.log_diag(x + e).sum(axis=1) - m.log_diag(x - e).sum(axis=1)) / (2 * h)
            np.testing.assert_allclose(G[:, j], fd, rtol=1e-6, atol=1e-8)

    def test_vjp_matches_param_jacobian(self):
        m = random_map(BOX3, seed=7)
        x = inside(BOX3, 25)
        rng = np.random.default_rng(0)
        v, w = rng.normal(size=(25, 3)), rng.normal(size=(25, 3))
        bases = m.basis(x)
        g = m.vjp_theta(bases, m.forward(bases), v, w)
        dS, dD = m.param_jacobian(x)
        expected = np.einsum("nk,nkp->p", v, dS) + np.einsum("nk,nkp->p", w / m.diag_partials(x), dD)
        np.testing.assert_allclose(g, expected, rtol=1e-10, atol=1e-12)


class TestWhitening:
    def test_features_become_orthonormal(self):
        m = random_map(BOX2)
        x = inside(BOX2, 500)
        bases = m.basis(x)
        P = m.whitening(bases)
        for lay, b in zip(m.layouts, bases):
            sl = slice(lay.offset, lay.offset + lay.n_shift)
            F = b.Vshift @ P[sl, sl]
            np.testing.assert_allclose(F.T @ F / len(F), np.eye(lay.n_shift), atol=1e-8)
        np.testing.assert_allclose(P, P.T, atol=1e-12)

    def test_rank_deficient_is_finite(self):
        m = random_map(BOX2)
        x = np.tile(inside(BOX2, 1), (10, 1))
        assert np.all(np.isfinite(m.whitening(m.basis(x))))


class TestInverse:
    @pytest.mark.parametrize("integrand", ["exp", "square"])
    def test_round_trip(self, integrand):
        m = random_map(BOX3, seed=8, scale=0.8, integrand=integrand)
        x = inside(BOX3, 100)
        assert np.max(np.abs(invert_triangular_map(m, m(x)) - x)) <= 1e-8


class TestSerialization:
    def test_round_trip(self):
        m = random_map(BOX3, seed=9, integrand="square", tail_degrees=[1, 2, 0])
        m2 = map_from_json(json.loads(json.dumps(m.to_json())))
        x = inside(BOX3, 10)
        np.testing.assert_array_equal(m2(x), m(x))
        assert "n_params=" in repr(m2)

    def test_wrong_type(self):
        with pytest.raises(ValueError):
            MonotoneMap.from_json({"type": "jacobian_flow"})


class TestDerivativeCap:
    def test_identity(self):
        rep = derivative_cap_diagnostic(MonotoneMap.identity(BOX2))
        assert rep.min_diag == pytest.approx(1.0)
        assert rep.max_first_partial == pytest.approx(1.0)
        assert rep.max_diag_slope < 1e-6
        assert rep.realized_M == pytest.approx(1.0)

    def test_grid_limit(self):
        with pytest.raises(ValueError):
            derivative_cap_diagnostic(MonotoneMap(BOX2), grid_per_axis=4)


class TestFlow:
    def test_logdet_by_finite_differences(self):
        box = SupportBox([-1.0, -1.0], [1.0, 1.0])
        flow = JacobianFlow.alternating(random_map(box, scale=0.1), 2)
        flow = flow.with_theta(flow.theta + 0.05 * np.random.default_rng(1).normal(size=flow.n_params))
        x = inside(box, 10) * 0.3
        y, logdet = flow_eval_with_logdet(flow, x)
        h = 1e-6
        for i in range(len(x)):
            J = np.empty((2, 2))
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                J[:, j] = (flow.evaluate(x[i] + e) - flow.evaluate(x[i] - e)) / (2 * h)
            assert logdet[i] == pytest.approx(np.log(abs(np.linalg.det(J))), abs=1e-7)

    def test_rejects_non_orthogonal(self):
        m = MonotoneMap(BOX2)
        with pytest.raises(ValueError):
            JacobianFlow([(np.array([[1.0, 0.1], [0.0, 1.0]]), m)])
        with pytest.raises(ValueError):
            JacobianFlow([])

    def test_json_round_trip(self):
        box = SupportBox([-1.0, -1.0], [1.0, 1.0])
        flow = JacobianFlow.alternating(random_map(box, scale=0.1), 3)
        flow2 = map_from_json(flow.to_json())
        x = inside(box, 5) * 0.3
        np.testing.assert_array_equal(flow2.evaluate(x), flow.evaluate(x))

    def test_map_eval_alias(self):
        m = random_map()
        x = inside(BOX2, 3)
        np.testing.assert_array_equal(map_eval(m, x), m(x))
