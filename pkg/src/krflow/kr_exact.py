"""Exact Knothe-Rosenblatt maps and generic triangular-map machinery.

Maps are upper triangular: component ``k`` reads ``x[k:]``.  The exact map
from ``f`` to ``g`` is built from the top coordinate down,

    S_k(x) = G_k^{-1}( F_k(x_k | x_{k+1:}) | S_{k+1:}(x) ),

either from closed-form conditionals or (d <= 2) from Gauss-Legendre
quadrature of the joint densities with bisection for the quantiles.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from .core import invert_upper_triangular
from .densities import (
    Density,
    Gaussian,
    SupportBox,
    UniformBox,
    UnsupportedDensityError,
    quadrature_conditional_cdf,
    quadrature_conditional_log_pdf,
)


class BracketError(ValueError):
    """Target value lies outside the image of a monotone slice."""


class MonotonicityError(ValueError):
    pass


class InversionError(ValueError):
    pass


def _as_rows(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, single


class TriangularMap:
    """Monotone upper-triangular map on a box.

    Subclasses implement ``_evaluate`` and ``_log_diag`` on ``(n, d)`` arrays.
    """

    def __init__(self, dim: int, support_in: SupportBox):
        self.dim = dim
        self.support_in = support_in

    def _evaluate(self, x):
        raise NotImplementedError

    def _log_diag(self, x):
        return np.log(self._diag(x))

    def _diag(self, x):
        return np.exp(self._log_diag(x))

    def evaluate(self, x):
        x, single = _as_rows(x, self.dim)
        y = self._evaluate(x)
        return y[0] if single else y

    __call__ = evaluate

    def component(self, k: int, x) -> np.ndarray:
        return self._evaluate(np.atleast_2d(x))[:, k]

    def diag_partials(self, x):
        """D_k S_k at each row, shape ``(n, d)``."""
        x, single = _as_rows(x, self.dim)
        out = self._diag(x)
        return out[0] if single else out

    def log_diag(self, x):
        x, single = _as_rows(x, self.dim)
        out = self._log_diag(x)
        return out[0] if single else out

    def inverse(self, y, tol: float = 1e-8):
        return invert_triangular_map(self, y, tol)


class AffineTriangularMap(TriangularMap):
    """S(x) = A x + b with A upper triangular and a positive diagonal."""

    def __init__(self, A, b, support_in: SupportBox):
        A = np.array(A, dtype=float)
        if np.any(np.tril(A, -1) != 0) or np.any(np.diag(A) <= 0):
            raise ValueError("A must be upper triangular with a positive diagonal")
        super().__init__(A.shape[0], support_in)
        self.A = A
        self.b = np.array(b, dtype=float).reshape(self.dim)

    @classmethod
    def identity(cls, support: SupportBox):
        return cls(np.eye(support.dim), np.zeros(support.dim), support)

    def _evaluate(self, x):
        return x @ self.A.T + self.b

    def _diag(self, x):
        return np.broadcast_to(np.diag(self.A), x.shape).copy()

    def _log_diag(self, x):
        return np.log(self._diag(x))

    def solve(self, y):
        """Closed-form inverse (for cross-checks against bisection)."""
        return (np.atleast_2d(y) - self.b) @ invert_upper_triangular(self.A).T


class OffsetMap(TriangularMap):
    """``base(x) + offset``; same diagonal partials as ``base``."""

    def __init__(self, base: TriangularMap, offset):
        super().__init__(base.dim, base.support_in)
        self.base = base
        self.offset = np.asarray(offset, dtype=float).reshape(base.dim)

    def _evaluate(self, x):
        return self.base._evaluate(x) + self.offset

    def _log_diag(self, x):
        return self.base._log_diag(x)


def _is_standard_gaussian(g: Density) -> bool:
    return isinstance(g, Gaussian) and np.allclose(g.mean, 0.0) and np.allclose(g.cov, np.eye(g.dim))


def gaussian_to_gaussian_kr(f: Gaussian, g: Gaussian | None = None) -> AffineTriangularMap:
    """Affine KR map from a Gaussian to the standard Gaussian.

    With ``Sigma = U U^T`` (U upper triangular, positive diagonal) the map is
    ``U^{-1}(x - mu)``.  In 2-d this gives S_2 = (x_2 - mu_2)/sigma_2 and
    S_1 = (x_1 - mu_1 - rho sigma_1/sigma_2 (x_2 - mu_2)) / (sigma_1 sqrt(1 - rho^2)).
    """
    if not isinstance(f, Gaussian):
        raise TypeError("f must be a Gaussian")
    if g is not None and (g.dim != f.dim or not _is_standard_gaussian(g)):
        raise UnsupportedDensityError("closed form requires a standard Gaussian target")
    c = f.cov
    sd = np.sqrt(np.diag(c))
    corr = c / np.outer(sd, sd)
    if np.any(np.abs(corr[np.triu_indices(f.dim, 1)]) >= 1):
        raise ValueError("correlations must satisfy |rho| < 1")
    flip = np.eye(f.dim)[::-1]
    U = flip @ np.linalg.cholesky(flip @ c @ flip) @ flip
    A = invert_upper_triangular(U)
    return AffineTriangularMap(A, -A @ f.mean, f.support)


def _gaussian_quantile(g: Gaussian, k, u, v, y_tail):
    m, sd = g.conditional_moments(k, y_tail)
    z = np.where(u <= 0.5, ndtri(u), -ndtri(v))
    return m + sd * z


def _uniform_quantile(g: UniformBox, k, u, v):
    lo, hi = g.support.lower[k], g.support.upper[k]
    return np.where(u <= 0.5, lo + u * (hi - lo), hi - v * (hi - lo))


class ExactKrMap(TriangularMap):
    """KR map from ``f`` to ``g`` using closed-form conditionals of ``f``.

    ``g`` must be a Gaussian or a uniform box, whose conditional quantiles are
    explicit.  Inputs are clamped to the closed support, so boundary values
    are the one-sided limits.
    """

    def __init__(self, f: Density, g: Density):
        if f.dim != g.dim:
            raise ValueError("f and g must have the same dimension")
        if not isinstance(g, (Gaussian, UniformBox)):
            raise UnsupportedDensityError("closed-form quantiles need a Gaussian or uniform target; use NumericalKr")
        super().__init__(f.dim, f.support)
        self.f = f
        self.g = g

    def _evaluate(self, x):
        x = np.clip(x, self.support_in.lo, self.support_in.hi)
        y = np.empty_like(x)
        for k in range(self.dim - 1, -1, -1):
            tail = x[:, k + 1 :]
            u = self.f.conditional_cdf(k, x[:, k], tail)
            v = self.f.conditional_sf(k, x[:, k], tail)
            if isinstance(self.g, Gaussian):
                y[:, k] = _gaussian_quantile(self.g, k, u, v, y[:, k + 1 :])
            else:
                y[:, k] = _uniform_quantile(self.g, k, u, v)
        return y

    def _log_diag(self, x):
        x = np.clip(x, self.support_in.lo, self.support_in.hi)
        y = self._evaluate(x)
        out = np.empty_like(x)
        for k in range(self.dim):
            lf = self.f.conditional_log_pdf(k, x[:, k], x[:, k + 1 :])
            lg = self.g.conditional_log_pdf(k, y[:, k], y[:, k + 1 :])
            out[:, k] = lf - lg
        return out


def rosenblatt_transform(f: Density) -> ExactKrMap:
    """KR map onto the uniform cube: the components are conditional CDFs."""
    return ExactKrMap(f, UniformBox.unit(f.dim))


def kr_to_standard_gaussian(f: Density) -> TriangularMap:
    g = Gaussian.standard(f.dim)
    if isinstance(f, Gaussian):
        return gaussian_to_gaussian_kr(f, g)
    return ExactKrMap(f, g)


class NumericalKr(TriangularMap):
    """Quadrature-plus-bisection KR map for d <= 2.

    Conditional CDFs of both densities come from fixed Gauss-Legendre rules on
    the joint densities (no closed forms), so this serves as an independent
    oracle for the closed-form maps.
    """

    max_bisect = 60

    def __init__(self, f: Density, g: Density, quad_nodes: int = 64, bisect_tol: float = 1e-12):
        if f.dim != g.dim:
            raise ValueError("f and g must have the same dimension")
        if f.dim > 2:
            raise UnsupportedDensityError("numerical KR is limited to d <= 2")
        if bisect_tol < 1e-12:
            raise ValueError("bisect_tol must be >= 1e-12")
        super().__init__(f.dim, f.support)
        self.f, self.g = f, g
        self.quad_nodes = quad_nodes
        self.bisect_tol = bisect_tol

    def _cdf(self, den, k, xk, tail):
        return quadrature_conditional_cdf(den, k, xk, tail, self.quad_nodes)

    def _quantile(self, k, u, y_tail):
        lo = np.full_like(u, self.g.support.lower[k])
        hi = np.full_like(u, self.g.support.upper[k])
        top = self._cdf(self.g, k, hi, y_tail)
        if not np.all(np.isfinite(top)) or np.any(top < 1.0 - 1e-9):
            raise BracketError("target conditional CDF does not reach 1 inside its support")
        for _ in range(self.max_bisect):
            mid = 0.5 * (lo + hi)
            below = self._cdf(self.g, k, mid, y_tail) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= self.bisect_tol):
                break
        return 0.5 * (lo + hi)

    def _component(self, k, x, y_tail):
        tail = x[:, k + 1 :]
        if k == self.dim - 1:
            # the marginal component depends on x_k alone; solve once per value
            vals, inv = np.unique(x[:, k], return_inverse=True)
            u = self._cdf(self.f, k, vals, np.zeros((len(vals), 0)))
            return self._quantile(k, u, np.zeros((len(vals), 0)))[inv.ravel()]
        u = self._cdf(self.f, k, x[:, k], tail)
        return self._quantile(k, u, y_tail)

    def _evaluate(self, x):
        x = np.clip(x, self.support_in.lo, self.support_in.hi)
        y = np.empty_like(x)
        for k in range(self.dim - 1, -1, -1):
            y[:, k] = self._component(k, x, y[:, k + 1 :])
        return y

    def _log_diag(self, x):
        x = np.clip(x, self.support_in.lo, self.support_in.hi)
        y = self._evaluate(x)
        out = np.empty_like(x)
        for k in range(self.dim):
            lf = quadrature_conditional_log_pdf(self.f, k, x[:, k], x[:, k + 1 :], self.quad_nodes)
            lg = quadrature_conditional_log_pdf(self.g, k, y[:, k], y[:, k + 1 :], self.quad_nodes)
            out[:, k] = lf - lg
        return out


def numerical_kr(f: Density, g: Density, quad_nodes: int = 64, bisect_tol: float = 1e-12) -> NumericalKr:
    return NumericalKr(f, g, quad_nodes, bisect_tol)


def invert_triangular_map(S: TriangularMap, y, tol: float = 1e-8):
    """Solve S(x) = y by back-substitution, last coordinate first.

    Each coordinate is found by bisection on its monotone slice over the
    input support box.
    """
    fast = getattr(S, "_invert", None)
    y, single = _as_rows(y, S.dim)
    if fast is not None:
        x = fast(y)
    else:
        x = _bisect_invert(S, y, tol)
    # residual relative to |y| so large outputs are not held to an absolute tol
    resid = np.max(np.abs(S._evaluate(x) - y) / np.maximum(1.0, np.abs(y))) if len(y) else 0.0
    if resid > tol:
        raise InversionError(f"relative inversion residual {resid:.3e} exceeds tol {tol:.1e}")
    return x[0] if single else x


def _bisect_invert(S: TriangularMap, y, tol):
    n, d = y.shape
    box = S.support_in
    x = np.tile(0.5 * (box.lo + box.hi), (n, 1))
    for k in range(d - 1, -1, -1):
        lo = np.full(n, box.lower[k])
        hi = np.full(n, box.upper[k])
        probe = x.copy()
        probe[:, k] = lo
        f_lo = S.component(k, probe)
        probe[:, k] = hi
        f_hi = S.component(k, probe)
        bad = (y[:, k] < f_lo - tol) | (y[:, k] > f_hi + tol)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise BracketError(f"row {i}: y_{k} = {y[i, k]} outside slice image [{f_lo[i]}, {f_hi[i]}]")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            probe[:, k] = mid
            below = S.component(k, probe) < y[:, k]
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(mid))):
                break
        x[:, k] = 0.5 * (lo + hi)
    return x


def pushforward_density(S: TriangularMap, g: Density, x):
    """(S^{-1} # g)(x) = g(S(x)) prod_k D_k S_k(x).

    g uses its analytic formula beyond its truncation box, as in the loss.
    """
    x, single = _as_rows(x, S.dim)
    diag = S.diag_partials(x)
    if np.any(diag <= 0):
        raise MonotonicityError("nonpositive diagonal partial: map is not strictly increasing")
    out = np.exp(g.log_density(S.evaluate(x), extend=True) + np.sum(np.log(diag), axis=1))
    return float(out[0]) if single else out
