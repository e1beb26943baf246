"""Shared numeric primitives.

Upper-triangular inversion and the entrywise inverse bounds used for
triangular Jacobians, anisotropic rate exponents, coordinate orderings,
Gauss-Legendre rules and seeded random streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import solve_triangular


class SingularMatrixError(ValueError):
    pass


class HypothesisError(ValueError):
    """Input does not satisfy the preconditions of a bound check."""


def as_upper_triangular(A) -> np.ndarray:
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if np.any(np.tril(A, -1) != 0.0):
        raise ValueError("matrix has nonzero entries below the diagonal")
    return A


def invert_upper_triangular(A) -> np.ndarray:
    """Inverse of an upper-triangular matrix by back-substitution."""
    A = as_upper_triangular(A)
    if np.any(np.abs(np.diag(A)) < 1e-300):
        raise SingularMatrixError("upper-triangular matrix has a zero diagonal entry")
    inv = solve_triangular(A, np.eye(A.shape[0]), lower=False)
    return np.triu(inv)


def neumann_inverse(A) -> np.ndarray:
    """Inverse via the finite series sum_k (-D^-1 U)^k D^-1.

    Only used as an independent cross-check of `invert_upper_triangular`.
    """
    A = as_upper_triangular(A)
    d = A.shape[0]
    Dinv = np.diag(1.0 / np.diag(A))
    X = -Dinv @ np.triu(A, 1)
    term = np.eye(d)
    total = np.zeros_like(A)
    for _ in range(d):
        total += term
        term = term @ X
    return total @ Dinv


def inverse_entry_bounds(d: int, L: float, M: float) -> np.ndarray:
    """Entrywise bounds on |A^-1| for triangular A with |A_ij| <= L, |A_jj| >= 1/M."""
    B = np.zeros((d, d))
    for i in range(d):
        B[i, i] = M
        for j in range(i + 1, d):
            B[i, j] = M * M * L * (M * L + 1.0) ** (j - i - 1)
    return B


def check_inverse_bounds(A, L: float, M: float) -> bool:
    A = as_upper_triangular(A)
    if L <= 0 or M <= 0:
        raise HypothesisError("L and M must be positive")
    diag = np.abs(np.diag(A))
    if np.any(diag < 1.0 / M):
        raise HypothesisError(f"diagonal entries must satisfy |A_jj| >= 1/M = {1.0 / M}")
    if np.any(np.abs(np.triu(A, 1)) > L):
        raise HypothesisError(f"superdiagonal entries must satisfy |A_ij| <= L = {L}")
    inv = np.abs(invert_upper_triangular(A))
    bound = inverse_entry_bounds(A.shape[0], L, M)
    # slack for rounding in cases where the bound is attained
    return bool(np.all(np.triu(inv) <= bound * (1.0 + 1e-12)))


class RateExponent(NamedTuple):
    d_k: int
    sigma_k: Fraction
    regime: str  # "smooth" | "critical" | "rough"
    rate_power: Fraction  # c_{n,k} ~ n^-rate_power (times log n when critical)

    @property
    def rate(self) -> str:
        if self.regime == "critical":
            return "n^-1/2 log n"
        return f"n^-{self.rate_power}"


def _check_profile(s: Sequence[int]) -> tuple[int, ...]:
    s = tuple(int(v) for v in s)
    if not s or any(v < 1 for v in s):
        raise ValueError(f"smoothness profile entries must be >= 1, got {s}")
    return s


def rate_exponents(s: Sequence[int]) -> list[RateExponent]:
    s = _check_profile(s)
    d = len(s)
    out = []
    for k in range(d):
        d_k = d - k
        sigma = Fraction(d_k) / sum(Fraction(1, v) for v in s[k:])
        if d_k < 2 * sigma:
            out.append(RateExponent(d_k, sigma, "smooth", Fraction(1, 2)))
        elif d_k == 2 * sigma:
            out.append(RateExponent(d_k, sigma, "critical", Fraction(1, 2)))
        else:
            out.append(RateExponent(d_k, sigma, "rough", sigma / d_k))
    return out


def best_ordering(s: Sequence[int]) -> tuple[int, ...]:
    """Permutation (0-based) putting coordinates in nondecreasing smoothness.

    Applying it to data columns, ``x[:, perm]``, gives the ordering that
    minimizes the summed rate bound; ties keep the original index order.
    """
    s = _check_profile(s)
    return tuple(sorted(range(len(s)), key=lambda k: (s[k], k)))


def check_permutation(perm: Sequence[int], d: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(d)):
        raise ValueError(f"{perm} is not a permutation of 0..{d - 1}")
    return perm


def ordering_label(perm: Sequence[int]) -> str:
    return "".join(str(p + 1) for p in perm)


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [-1, 1] (read-only arrays)."""
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gl_interval(a, b, n: int):
    """Gauss-Legendre nodes/weights mapped onto [a, b], broadcasting over a, b.

    Returns arrays of shape ``broadcast(a, b).shape + (n,)``.
    """
    xi, w = gauss_legendre(n)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    half = 0.5 * (b - a)
    return a + half * (xi + 1.0), half * w


@dataclass(frozen=True)
class SeedSpec:
    """Seed for one independent random stream.

    Streams are keyed counter-based generators (Philox): every
    ``(master_seed, stream_id)`` pair gives its own reproducible sequence,
    independent of the order in which streams are consumed.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if not 0 <= self.stream_id < 2**64:
            raise ValueError("stream_id must be a non-negative 64-bit integer")

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.master_seed | (self.stream_id << 64)))

    def child(self, stream_id: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, stream_id)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, SeedSpec):
        return seed.rng()
    if isinstance(seed, np.random.Generator):
        return seed
    return SeedSpec(int(seed)).rng()
