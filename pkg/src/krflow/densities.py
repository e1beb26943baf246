"""Target and source densities with box supports.

Every density is vectorized over rows: ``x`` is an ``(n, d)`` array (a single
``(d,)`` point is accepted and gives scalar results).  Conditionals follow the
upper-triangular convention: component ``k`` (0-based) is the law of ``x_k``
given the tail ``x_{k+1:}``; the last component is a marginal.

Gaussian supports are truncation boxes; closed-form formulas ignore the
truncated mass (below 1e-8 at the default 6 sigma half width).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, ndtr

from .core import SeedSpec, as_rng, check_permutation, gl_interval

_LOG_2PI = math.log(2.0 * math.pi)


class DensityDomainError(ValueError):
    """Log-density requested where the density vanishes."""


class UnsupportedDensityError(ValueError):
    pass


@dataclass(frozen=True)
class SupportBox:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper must have the same positive length")
        if any(not a < b for a, b in zip(lo, hi)):
            raise ValueError(f"support box needs lower < upper, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, atol: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo - atol) & (x <= self.hi + atol), axis=1)

    def permuted(self, perm) -> "SupportBox":
        perm = list(perm)
        return SupportBox(self.lo[perm], self.hi[perm])

    def grid(self, per_axis: int) -> np.ndarray:
        """Cell-centred tensor grid, shape ``(per_axis**d, d)``."""
        axes = [a + (np.arange(per_axis) + 0.5) * (b - a) / per_axis for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_config(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


def _rows(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, single


def _norm_logpdf(z, mean, sd):
    u = (z - mean) / sd
    return -0.5 * u * u - np.log(sd) - 0.5 * _LOG_2PI


class Density:
    """Base class; subclasses provide ``_logpdf`` and a sampler."""

    kind = "density"
    quad_nodes = 128  # fallback conditional quadrature (d <= 2)

    def __init__(self, support: SupportBox, smoothness: Sequence[int] | None = None):
        self.support = support
        self.dim = support.dim
        s = tuple(int(v) for v in smoothness) if smoothness is not None else (1,) * self.dim
        if len(s) != self.dim or any(v < 1 for v in s):
            raise ValueError(f"invalid smoothness profile {s}")
        self.smoothness = s

    # -- evaluation -----------------------------------------------------
    def _logpdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self._logpdf(x))

    def _grad_logpdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, x, extend: bool = False):
        """ln f(x); ``-inf`` outside the support unless ``extend`` is set.

        ``extend`` evaluates the analytic formula past the truncation box,
        which is how source densities are used inside the training loss.
        """
        x, single = _rows(x, self.dim)
        if extend:
            out = self._logpdf(x)
        else:
            inside = self.support.contains(x)
            out = np.full(len(x), -np.inf)
            if inside.any():
                out[inside] = self._logpdf(x[inside])
        return float(out[0]) if single else out

    def density(self, x):
        x, single = _rows(x, self.dim)
        inside = self.support.contains(x)
        out = np.zeros(len(x))
        if inside.any():
            out[inside] = self._pdf(x[inside])
        return float(out[0]) if single else out

    def grad_log_density(self, x):
        x, single = _rows(x, self.dim)
        g = self._grad_logpdf(x)
        return g[0] if single else g

    @property
    def is_product(self) -> bool:
        return False

    # -- sampling -------------------------------------------------------
    def _draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise UnsupportedDensityError(f"no sampler for kind {self.kind!r}")

    def sample(self, n: int, seed) -> np.ndarray:
        """``n`` rows from the density restricted to its support box."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = as_rng(seed)
        chunks, have = [], 0
        while have < n:
            batch = self._draw(rng, max(n - have, 16))
            batch = batch[self.support.contains(batch)]
            chunks.append(batch)
            have += len(batch)
        return np.concatenate(chunks)[:n]

    # -- conditionals ---------------------------------------------------
    def _check_k(self, k: int, xk, tail):
        if not 0 <= k < self.dim:
            raise IndexError(f"coordinate index {k} out of range for dim {self.dim}")
        xk = np.atleast_1d(np.asarray(xk, dtype=float))
        tail = np.asarray(tail, dtype=float).reshape(len(xk), self.dim - k - 1) if self.dim - k - 1 else np.zeros((len(xk), 0))
        return xk, tail

    def conditional_cdf(self, k: int, xk, tail=()):
        xk, tail = self._check_k(k, xk, tail)
        return np.clip(self._cond_cdf(k, xk, tail), 0.0, 1.0)

    def conditional_sf(self, k: int, xk, tail=()):
        """1 - conditional_cdf, computed without cancellation where possible."""
        xk, tail = self._check_k(k, xk, tail)
        return np.clip(self._cond_sf(k, xk, tail), 0.0, 1.0)

    def conditional_log_pdf(self, k: int, xk, tail=()):
        xk, tail = self._check_k(k, xk, tail)
        return self._cond_logpdf(k, xk, tail)

    def _cond_cdf(self, k, xk, tail):
        return quadrature_conditional_cdf(self, k, xk, tail, self.quad_nodes)

    def _cond_sf(self, k, xk, tail):
        return 1.0 - self._cond_cdf(k, xk, tail)

    def _cond_logpdf(self, k, xk, tail):
        return quadrature_conditional_log_pdf(self, k, xk, tail, self.quad_nodes)

    # -- misc -------------------------------------------------------------
    def permuted(self, perm) -> "Density":
        perm = check_permutation(perm, self.dim)
        if perm == tuple(range(self.dim)):
            return self
        return PermutedDensity(self, perm)

    def to_config(self) -> dict:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim}, support={self.support})"


class Gaussian(Density):
    """Multivariate normal truncated to ``mean +- half_width * sd`` per axis."""

    kind = "gaussian"

    def __init__(self, mean, cov, half_width: float = 6.0, smoothness=None):
        self.mean = np.array(mean, dtype=float).reshape(-1)
        self.cov = np.array(cov, dtype=float).reshape(len(self.mean), len(self.mean))
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("covariance must be symmetric")
        self.chol = np.linalg.cholesky(self.cov)  # raises unless positive definite
        self.half_width = float(half_width)
        sd = np.sqrt(np.diag(self.cov))
        super().__init__(
            SupportBox(self.mean - half_width * sd, self.mean + half_width * sd),
            smoothness if smoothness is not None else (2,) * len(self.mean),
        )
        self.precision = np.linalg.inv(self.cov)
        self._log_norm = -0.5 * self.dim * _LOG_2PI - np.log(np.diag(self.chol)).sum()
        self._cond = []
        for k in range(self.dim):
            S_kT = self.cov[k, k + 1 :]
            S_TT = self.cov[k + 1 :, k + 1 :]
            beta = np.linalg.solve(S_TT, S_kT) if len(S_kT) else np.zeros(0)
            var = self.cov[k, k] - S_kT @ beta
            self._cond.append((beta, math.sqrt(var)))

    @classmethod
    def bivariate(cls, mu1=0.0, mu2=0.0, sigma1=1.0, sigma2=1.0, rho=0.0, half_width=6.0, smoothness=None):
        if not abs(rho) < 1:
            raise ValueError("correlation must satisfy |rho| < 1")
        if sigma1 <= 0 or sigma2 <= 0:
            raise ValueError("standard deviations must be positive")
        c = rho * sigma1 * sigma2
        return cls([mu1, mu2], [[sigma1**2, c], [c, sigma2**2]], half_width, smoothness)

    @classmethod
    def standard(cls, dim: int, half_width: float = 6.0):
        return cls(np.zeros(dim), np.eye(dim), half_width)

    @classmethod
    def diagonal(cls, mean, sigma, half_width: float = 6.0):
        sigma = np.asarray(sigma, dtype=float)
        return cls(mean, np.diag(sigma**2), half_width)

    @property
    def is_product(self) -> bool:
        return bool(np.all(self.cov == np.diag(np.diag(self.cov))))

    def _logpdf(self, x):
        z = np.linalg.solve(self.chol, (x - self.mean).T)
        return self._log_norm - 0.5 * np.sum(z * z, axis=0)

    def _grad_logpdf(self, x):
        return -(x - self.mean) @ self.precision

    def _draw(self, rng, n):
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T

    def conditional_moments(self, k, tail):
        beta, sd = self._cond[k]
        mean = self.mean[k] + (tail - self.mean[k + 1 :]) @ beta
        return mean, sd

    def _cond_cdf(self, k, xk, tail):
        m, sd = self.conditional_moments(k, tail)
        return ndtr((xk - m) / sd)

    def _cond_sf(self, k, xk, tail):
        m, sd = self.conditional_moments(k, tail)
        return ndtr((m - xk) / sd)

    def _cond_logpdf(self, k, xk, tail):
        m, sd = self.conditional_moments(k, tail)
        return _norm_logpdf(xk, m, sd)

    def permuted(self, perm):
        perm = list(check_permutation(perm, self.dim))
        return Gaussian(self.mean[perm], self.cov[np.ix_(perm, perm)], self.half_width, [self.smoothness[p] for p in perm])

    def to_config(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "cov": self.cov.tolist(), "half_width": self.half_width}


class GaussianMixture(Density):
    """Mixture of axis-aligned Gaussians, truncated to a box."""

    kind = "gaussian_mixture"

    def __init__(self, weights, means, sigmas, support: SupportBox | None = None, half_width=6.0, smoothness=None):
        self.weights = np.asarray(weights, dtype=float)
        self.weights = self.weights / self.weights.sum()
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), self.means.shape).copy()
        if np.any(self.sigmas <= 0) or len(self.weights) != len(self.means):
            raise ValueError("invalid mixture specification")
        if support is None:
            support = SupportBox(
                (self.means - half_width * self.sigmas).min(axis=0),
                (self.means + half_width * self.sigmas).max(axis=0),
            )
        self._log_w = np.log(self.weights)
        super().__init__(support, smoothness if smoothness is not None else (2,) * self.means.shape[1])

    @classmethod
    def eight_gaussians(cls, radius=2.0, sd=0.3):
        ang = np.arange(8) * np.pi / 4
        means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return cls(np.ones(8), means, sd, support=_square_box(radius + 6 * sd, 2))

    @classmethod
    def two_circles(cls, radii=(1.0, 2.0), per_circle=16, sd=0.15):
        ang = np.arange(per_circle) * 2 * np.pi / per_circle
        ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        means = np.concatenate([r * ring for r in radii])
        return cls(np.ones(len(means)), means, sd, support=_square_box(max(radii) + 6 * sd, 2))

    def _component_logpdf(self, x, coords):
        # (n, c): sum over the listed coordinates of each component's log-normal
        m = self.means[:, coords]
        s = self.sigmas[:, coords]
        u = (x[:, None, :] - m[None]) / s[None]
        return -0.5 * np.sum(u * u, axis=2) - np.log(s).sum(axis=1) - 0.5 * len(coords) * _LOG_2PI

    def _logpdf(self, x):
        return logsumexp(self._log_w + self._component_logpdf(x, list(range(self.dim))), axis=1)

    def _grad_logpdf(self, x):
        lc = self._log_w + self._component_logpdf(x, list(range(self.dim)))
        r = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        return -np.einsum("nc,ncd->nd", r, (x[:, None, :] - self.means[None]) / self.sigmas[None] ** 2)

    def _draw(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.sigmas[comp] * rng.standard_normal((n, self.dim))

    def _tail_posterior(self, k, tail):
        lt = self._log_w + self._component_logpdf(tail, list(range(k + 1, self.dim)))
        return np.exp(lt - logsumexp(lt, axis=1, keepdims=True))

    def _cond_cdf(self, k, xk, tail):
        w = self._tail_posterior(k, tail)
        return np.sum(w * ndtr((xk[:, None] - self.means[:, k]) / self.sigmas[:, k]), axis=1)

    def _cond_sf(self, k, xk, tail):
        w = self._tail_posterior(k, tail)
        return np.sum(w * ndtr((self.means[:, k] - xk[:, None]) / self.sigmas[:, k]), axis=1)

    def _cond_logpdf(self, k, xk, tail):
        full = np.concatenate([xk[:, None], tail], axis=1)
        head = logsumexp(self._log_w + self._component_logpdf(full, list(range(k, self.dim))), axis=1)
        if k == self.dim - 1:
            return head
        return head - logsumexp(self._log_w + self._component_logpdf(tail, list(range(k + 1, self.dim))), axis=1)

    def permuted(self, perm):
        perm = list(check_permutation(perm, self.dim))
        return GaussianMixture(
            self.weights, self.means[:, perm], self.sigmas[:, perm], self.support.permuted(perm),
            smoothness=[self.smoothness[p] for p in perm],
        )

    def to_config(self):
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "sigmas": self.sigmas.tolist(),
            "support": self.support.to_config(),
        }


def _square_box(half: float, d: int) -> SupportBox:
    return SupportBox([-half] * d, [half] * d)


class Banana(Density):
    """x_2 ~ N(0, 1), x_1 | x_2 ~ N(x_2^2 / 2, 1/2)."""

    kind = "banana"
    default_support = SupportBox((-4.0, -5.0), (16.0, 5.0))
    _cond_sd = math.sqrt(0.5)

    def __init__(self, support: SupportBox | None = None, smoothness=None):
        super().__init__(support or self.default_support, smoothness or (2, 2))

    def _logpdf(self, x):
        return _norm_logpdf(x[:, 1], 0.0, 1.0) + _norm_logpdf(x[:, 0], 0.5 * x[:, 1] ** 2, self._cond_sd)

    def _grad_logpdf(self, x):
        r = x[:, 0] - 0.5 * x[:, 1] ** 2
        return np.stack([-2.0 * r, -x[:, 1] + 2.0 * r * x[:, 1]], axis=1)

    def _draw(self, rng, n):
        z = rng.standard_normal((n, 2))
        x2 = z[:, 0]
        return np.stack([0.5 * x2**2 + self._cond_sd * z[:, 1], x2], axis=1)

    def _cond_params(self, k, tail):
        if k == 0:
            return 0.5 * tail[:, 0] ** 2, self._cond_sd
        return 0.0, 1.0

    def _cond_cdf(self, k, xk, tail):
        m, sd = self._cond_params(k, tail)
        return ndtr((xk - m) / sd)

    def _cond_sf(self, k, xk, tail):
        m, sd = self._cond_params(k, tail)
        return ndtr((m - xk) / sd)

    def _cond_logpdf(self, k, xk, tail):
        m, sd = self._cond_params(k, tail)
        return _norm_logpdf(xk, m, sd)

    def to_config(self):
        return {"kind": self.kind, "support": self.support.to_config()}


class Sine(Density):
    """f(x) = 1 + prod_j sin(2 pi k_j x_j) on the unit cube."""

    kind = "sine"

    def __init__(self, freqs: Sequence[int], smoothness=None):
        freqs = [int(k) for k in freqs]
        if any(k == 0 for k in freqs):
            raise ValueError("sine frequencies must be nonzero integers")
        self.freqs = np.array(freqs)
        d = len(freqs)
        if smoothness is None:
            # higher frequency means larger derivative norms, i.e. rougher
            kmax = max(abs(k) for k in freqs)
            smoothness = [math.ceil(kmax / abs(k)) for k in freqs]
        super().__init__(SupportBox([0.0] * d, [1.0] * d), smoothness)

    def _pdf(self, x):
        return 1.0 + np.prod(np.sin(2 * np.pi * self.freqs * x), axis=1)

    def _logpdf(self, x):
        f = self._pdf(x)
        if np.any(f <= 0):
            raise DensityDomainError("sine density vanishes at a requested point")
        return np.log(f)

    def _grad_logpdf(self, x):
        arg = 2 * np.pi * self.freqs * x
        s = np.sin(arg)
        g = np.empty_like(x)
        for j in range(self.dim):
            others = np.prod(np.delete(s, j, axis=1), axis=1)
            g[:, j] = 2 * np.pi * self.freqs[j] * np.cos(arg[:, j]) * others
        return g / (1.0 + np.prod(s, axis=1))[:, None]

    def sample(self, n, seed):
        """Rejection from the uniform proposal with envelope 2."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = as_rng(seed)
        chunks, have = [], 0
        while have < n:
            m = max(2 * (n - have), 64)
            x = rng.random((m, self.dim))
            u = rng.random(m)
            keep = x[2.0 * u < self._pdf(x)]
            chunks.append(keep)
            have += len(keep)
        return np.concatenate(chunks)[:n]

    def _tail_product(self, k, tail):
        return np.prod(np.sin(2 * np.pi * self.freqs[k + 1 :] * tail), axis=1)

    # Integrating out any leading coordinate kills the product term, so every
    # marginal of x_{k:} with k >= 1 is uniform.
    def _cond_cdf(self, k, xk, tail):
        if k > 0:
            return xk.copy()
        kk = self.freqs[0]
        return xk + self._tail_product(0, tail) * (1.0 - np.cos(2 * np.pi * kk * xk)) / (2 * np.pi * kk)

    def _cond_sf(self, k, xk, tail):
        if k > 0:
            return 1.0 - xk
        kk = self.freqs[0]
        # the periodic term vanishes at x = 1, so the upper tail integral is direct
        return (1.0 - xk) - self._tail_product(0, tail) * (1.0 - np.cos(2 * np.pi * kk * xk)) / (2 * np.pi * kk)

    def _cond_logpdf(self, k, xk, tail):
        if k > 0:
            return np.zeros_like(xk)
        f = 1.0 + np.sin(2 * np.pi * self.freqs[0] * xk) * self._tail_product(0, tail)
        if np.any(f <= 0):
            raise DensityDomainError("sine density vanishes at a requested point")
        return np.log(f)

    def permuted(self, perm):
        perm = list(check_permutation(perm, self.dim))
        return Sine(self.freqs[perm], [self.smoothness[p] for p in perm])

    def to_config(self):
        return {"kind": self.kind, "freqs": self.freqs.tolist()}


class UniformBox(Density):
    kind = "uniform_box"

    def __init__(self, lower, upper, smoothness=None):
        super().__init__(SupportBox(lower, upper), smoothness)
        self._logvol = float(np.log(self.support.width).sum())

    @classmethod
    def unit(cls, dim: int):
        return cls([0.0] * dim, [1.0] * dim)

    @property
    def is_product(self):
        return True

    def log_density(self, x, extend=False):
        # the formula has no extension beyond the box
        return super().log_density(x, extend=False)

    def _logpdf(self, x):
        return np.full(len(x), -self._logvol)

    def _grad_logpdf(self, x):
        return np.zeros_like(x)

    def _draw(self, rng, n):
        return self.support.lo + rng.random((n, self.dim)) * self.support.width

    def _cond_cdf(self, k, xk, tail):
        return (xk - self.support.lower[k]) / (self.support.upper[k] - self.support.lower[k])

    def _cond_sf(self, k, xk, tail):
        return (self.support.upper[k] - xk) / (self.support.upper[k] - self.support.lower[k])

    def _cond_logpdf(self, k, xk, tail):
        w = self.support.upper[k] - self.support.lower[k]
        inside = (xk >= self.support.lower[k]) & (xk <= self.support.upper[k])
        return np.where(inside, -math.log(w), -np.inf)

    def permuted(self, perm):
        perm = list(check_permutation(perm, self.dim))
        box = self.support.permuted(perm)
        return UniformBox(box.lower, box.upper, [self.smoothness[p] for p in perm])

    def to_config(self):
        return {"kind": self.kind, **self.support.to_config()}


class Product(Density):
    """Independent coordinates, one 1-d density per axis."""

    kind = "product"

    def __init__(self, factors: Sequence[Density]):
        if any(f.dim != 1 for f in factors):
            raise ValueError("product factors must be one-dimensional")
        self.factors = list(factors)
        super().__init__(
            SupportBox([f.support.lower[0] for f in factors], [f.support.upper[0] for f in factors]),
            [f.smoothness[0] for f in factors],
        )

    @property
    def is_product(self):
        return True

    def _logpdf(self, x):
        return sum(f.log_density(x[:, [j]], extend=True) for j, f in enumerate(self.factors))

    def _grad_logpdf(self, x):
        return np.concatenate([f.grad_log_density(x[:, [j]]) for j, f in enumerate(self.factors)], axis=1)

    def sample(self, n, seed):
        rng = as_rng(seed)
        return np.concatenate([f.sample(n, rng) for f in self.factors], axis=1)

    def _cond_cdf(self, k, xk, tail):
        return self.factors[k].conditional_cdf(0, xk)

    def _cond_sf(self, k, xk, tail):
        return self.factors[k].conditional_sf(0, xk)

    def _cond_logpdf(self, k, xk, tail):
        return self.factors[k].conditional_log_pdf(0, xk)

    def permuted(self, perm):
        perm = check_permutation(perm, self.dim)
        return Product([self.factors[p] for p in perm])

    def to_config(self):
        return {"kind": self.kind, "factors": [f.to_config() for f in self.factors]}


class PermutedDensity(Density):
    """Density of ``x[:, perm]`` for ``x`` drawn from ``base``.

    Conditionals are computed by quadrature (d <= 2) since the reordered
    chain rule rarely has a closed form.
    """

    kind = "permuted"

    def __init__(self, base: Density, perm):
        self.base = base
        self.perm = check_permutation(perm, base.dim)
        self.inverse = tuple(int(i) for i in np.argsort(self.perm))
        super().__init__(base.support.permuted(self.perm), [base.smoothness[p] for p in self.perm])

    def _logpdf(self, x):
        return self.base.log_density(x[:, list(self.inverse)], extend=True)

    def _pdf(self, x):
        return self.base._pdf(x[:, list(self.inverse)])

    def _grad_logpdf(self, x):
        return self.base.grad_log_density(x[:, list(self.inverse)])[:, list(self.perm)]

    def sample(self, n, seed):
        return self.base.sample(n, seed)[:, list(self.perm)]

    def permuted(self, perm):
        perm = check_permutation(perm, self.dim)
        return self.base.permuted([self.perm[p] for p in perm])

    def to_config(self):
        return {"kind": self.kind, "base": self.base.to_config(), "perm": list(self.perm)}


# -- quadrature oracles (d <= 2) ---------------------------------------------


def _leading_mass(den: Density, tail: np.ndarray, nodes: int) -> np.ndarray:
    """For d = 2: integral of f(t, x_2) over t in the support, per tail row."""
    t, w = gl_interval(den.support.lower[0], den.support.upper[0], nodes)
    pts = np.stack([np.broadcast_to(t, (len(tail), nodes)).ravel(), np.repeat(tail[:, 0], nodes)], axis=1)
    return (den.density(pts).reshape(len(tail), nodes) * w).sum(axis=1)


def _integrate_last(den: Density, a, b, nodes: int) -> np.ndarray:
    """Integral of the last-coordinate marginal (d <= 2) over [a, b]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s, ws = gl_interval(a, b, nodes)
    if den.dim == 1:
        vals = den.density(s.reshape(-1, 1)).reshape(s.shape)
    else:
        vals = _leading_mass(den, s.reshape(-1, 1), nodes).reshape(s.shape)
    return (vals * ws).sum(axis=-1)


def _check_quad_dim(den: Density):
    if den.dim > 2:
        raise UnsupportedDensityError("quadrature conditionals are limited to d <= 2")


def quadrature_conditional_cdf(den: Density, k: int, xk, tail, nodes: int = 128) -> np.ndarray:
    _check_quad_dim(den)
    xk = np.clip(np.asarray(xk, dtype=float), den.support.lower[k], den.support.upper[k])
    lo = den.support.lower[k]
    if k == den.dim - 1:
        num = _integrate_last(den, np.full_like(xk, lo), xk, nodes)
        total = _integrate_last(den, lo, den.support.upper[k], nodes)
        return np.clip(num / total, 0.0, 1.0)
    # d == 2, k == 0
    t, w = gl_interval(np.full_like(xk, lo), xk, nodes)
    pts = np.stack([t.ravel(), np.repeat(tail[:, 0], nodes)], axis=1)
    num = (den.density(pts).reshape(t.shape) * w).sum(axis=1)
    return np.clip(num / _leading_mass(den, tail, nodes), 0.0, 1.0)


def quadrature_conditional_log_pdf(den: Density, k: int, xk, tail, nodes: int = 128) -> np.ndarray:
    _check_quad_dim(den)
    xk = np.asarray(xk, dtype=float)
    if k == den.dim - 1:
        total = _integrate_last(den, den.support.lower[k], den.support.upper[k], nodes)
        if den.dim == 1:
            return den.log_density(xk[:, None]) - np.log(total)
        return np.log(_leading_mass(den, xk[:, None], nodes)) - np.log(total)
    return den.log_density(np.stack([xk, tail[:, 0]], axis=1)) - np.log(_leading_mass(den, tail, nodes))


def quadrature_normalization(den: Density, nodes_per_axis: int = 64) -> float:
    """Tensor-product Gauss-Legendre estimate of the integral over the support."""
    if den.dim > 2:
        raise UnsupportedDensityError("quadrature normalization is limited to d <= 2")
    if nodes_per_axis < 16:
        raise ValueError("nodes_per_axis must be >= 16")
    axes = [gl_interval(a, b, nodes_per_axis) for a, b in zip(den.support.lower, den.support.upper)]
    pts = np.stack([m.ravel() for m in np.meshgrid(*[a[0] for a in axes], indexing="ij")], axis=1)
    wts = np.ones(len(pts))
    for j, m in enumerate(np.meshgrid(*[a[1] for a in axes], indexing="ij")):
        wts = wts * m.ravel()
    return float(np.sum(den.density(pts) * wts))


# -- configuration ----------------------------------------------------------


def density_from_config(cfg: dict) -> Density:
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    smooth = cfg.pop("smoothness", None)
    if kind == "gaussian":
        hw = cfg.get("half_width", 6.0)
        if "cov" in cfg:
            return Gaussian(cfg["mean"], cfg["cov"], hw, smooth)
        if "rho" in cfg:
            mu = cfg.get("mean", [0.0, 0.0])
            sig = cfg.get("sigma", [1.0, 1.0])
            return Gaussian.bivariate(mu[0], mu[1], sig[0], sig[1], cfg["rho"], hw, smooth)
        if "sigma" in cfg:
            return Gaussian(cfg["mean"], np.diag(np.square(cfg["sigma"])), hw, smooth)
        d = int(cfg.get("dim", len(cfg.get("mean", [0, 0]))))
        return Gaussian(cfg.get("mean", np.zeros(d)), np.eye(d), hw, smooth)
    if kind == "gaussian_mixture":
        preset = cfg.get("preset")
        if preset == "eight_gaussians":
            return GaussianMixture.eight_gaussians(**cfg.get("params", {}))
        if preset == "two_circles":
            return GaussianMixture.two_circles(**cfg.get("params", {}))
        box = SupportBox(**cfg["support"]) if "support" in cfg else None
        return GaussianMixture(cfg["weights"], cfg["means"], cfg["sigmas"], box, smoothness=smooth)
    if kind == "banana":
        box = SupportBox(**cfg["support"]) if "support" in cfg else None
        return Banana(box, smooth)
    if kind == "sine":
        return Sine(cfg["freqs"], smooth)
    if kind == "uniform_box":
        return UniformBox(cfg["lower"], cfg["upper"], smooth)
    if kind == "product":
        return Product([density_from_config(f) for f in cfg["factors"]])
    if kind == "permuted":
        return density_from_config(cfg["base"]).permuted(cfg["perm"])
    raise ValueError(f"unknown density kind {kind!r}")


__all__ = [
    "Banana",
    "Density",
    "DensityDomainError",
    "Gaussian",
    "GaussianMixture",
    "PermutedDensity",
    "Product",
    "SeedSpec",
    "Sine",
    "SupportBox",
    "UniformBox",
    "UnsupportedDensityError",
    "density_from_config",
    "quadrature_conditional_cdf",
    "quadrature_conditional_log_pdf",
    "quadrature_normalization",
]
