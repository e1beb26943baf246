"""Evaluation of fitted maps: held-out NLL, Monte-Carlo KL, map errors
against exact oracles, and log-log rate fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import as_rng
from .densities import Density, SupportBox
from .objective import LossConfig, pointwise_loss


class NonPositiveLossError(ValueError):
    """A median loss is <= 0, so its logarithm is undefined.

    Usually the loss floor was reached; subtract a floor estimate first.
    """


class Estimate(NamedTuple):
    value: float
    stderr: float

    def __float__(self):
        return self.value


def _mean_se(v) -> Estimate:
    v = np.asarray(v, dtype=float)
    se = float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return Estimate(float(np.mean(v)), se)


def error_bar(values) -> tuple[float, float]:
    """(mean, half-width) of a 95% normal interval: mean +- 1.96 stderr."""
    est = _mean_se(values)
    return est.value, 1.96 * est.stderr


def test_nll(spec, test_data, g: Density) -> float:
    return float(np.mean(pointwise_loss(spec, test_data, LossConfig(g))))


def test_nll_estimate(spec, test_data, g: Density) -> Estimate:
    return _mean_se(pointwise_loss(spec, test_data, LossConfig(g)))


# keep pytest from collecting these when imported into test modules
test_nll.__test__ = False
test_nll_estimate.__test__ = False


def mc_kl_between(spec, f: Density, g: Density, n_mc: int, seed) -> Estimate:
    """KL(S#f | g) as the sample mean of the loss with the ln f term."""
    x = f.sample(n_mc, as_rng(seed))
    return _mean_se(pointwise_loss(spec, x, LossConfig(g, f, include_f_term=True)))


def kl_on_sample(spec, x, f: Density, g: Density) -> Estimate:
    return _mean_se(pointwise_loss(spec, x, LossConfig(g, f, include_f_term=True)))


def _evaluate(S, x):
    # unchecked evaluation: grids may touch the box edges
    if hasattr(S, "_evaluate"):
        return S._evaluate(np.atleast_2d(x))
    return S.evaluate(x)


def sup_grid_error(spec, oracle, grid_per_axis: int = 50, box: SupportBox | None = None) -> float:
    """max over a cell-centred grid and all components of |S_k - S*_k|."""
    box = box or spec.support_in
    grid = box.grid(grid_per_axis)
    return float(np.max(np.abs(_evaluate(spec, grid) - _evaluate(oracle, grid))))


def sobolev_error(spec, oracle, f: Density, n_mc: int, seed) -> float:
    """MC estimate of sum_k ||S_k - S*_k||^2 + ||D_k S_k - D_k S*_k||^2 in L2(f)."""
    x = f.sample(n_mc, as_rng(seed))
    dv = _evaluate(spec, x) - _evaluate(oracle, x)
    dd = spec.diag_partials(x) - oracle.diag_partials(x)
    return float(np.sum(np.mean(dv**2, axis=0)) + np.sum(np.mean(dd**2, axis=0)))


@dataclass
class RateCurve:
    sample_sizes: np.ndarray
    losses: list
    medians: np.ndarray
    slope: float
    intercept: float
    residuals: np.ndarray

    def predict(self, n):
        return np.exp(self.intercept) * np.asarray(n, dtype=float) ** self.slope

    def to_json(self) -> dict:
        return {
            "sample_sizes": [int(n) for n in self.sample_sizes],
            "medians": [float(m) for m in self.medians],
            "slope": self.slope,
            "intercept": self.intercept,
        }


def fit_loglog_slope(ns: Sequence[int], per_n_losses: Sequence[Sequence[float]]) -> RateCurve:
    """Least-squares line through (ln n, ln median loss)."""
    ns = np.asarray(ns)
    if len(ns) != len(per_n_losses):
        raise ValueError("one loss list is needed per sample size")
    if len(np.unique(ns)) < 3:
        raise ValueError("at least 3 distinct sample sizes are needed")
    if np.any(np.diff(ns) <= 0):
        raise ValueError("sample sizes must be strictly increasing")
    medians = np.array([np.median(np.asarray(v, dtype=float)) for v in per_n_losses])
    if not np.all(medians > 0):
        raise NonPositiveLossError(f"median losses must be positive, got {medians.tolist()}")
    u, v = np.log(ns.astype(float)), np.log(medians)
    uc = u - u.mean()
    slope = float(uc @ (v - v.mean()) / (uc @ uc))
    intercept = float(v.mean() - slope * u.mean())
    return RateCurve(ns, [list(map(float, l)) for l in per_n_losses], medians, slope, intercept, v - (intercept + slope * u))


def floor_estimate(losses, stderr: float = 0.0) -> float:
    """Entropy-floor proxy when no oracle exists: smallest loss minus one stderr."""
    return float(np.min(losses)) - stderr
