"""NumPy implementations of the monotone-integral kernels.

Both backends share one contract.  On the reference interval [-1, 1] the
integrand of a component is ``rho(p(t))`` with ``p(t) = sum_a W[i, a] P_a(t)``
(Legendre ``P_a``) and ``rho = exp`` (form 0) or ``rho = p**2 + eps`` (form 1).
"""

import numpy as np

EXP, SQUARE = 0, 1
_CHUNK = 8192


def legendre_table(t, n_terms):
    """P_0..P_{n_terms-1} at ``t``; result has shape ``t.shape + (n_terms,)``."""
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (n_terms,))
    out[..., 0] = 1.0
    if n_terms > 1:
        out[..., 1] = t
    for n in range(1, n_terms - 1):
        out[..., n + 1] = ((2 * n + 1) * t * out[..., n] - n * out[..., n - 1]) / (n + 1)
    return out


def _rho(p, form, eps):
    if form == EXP:
        e = np.exp(p)
        return e, e
    return p * p + eps, 2.0 * p


def integrate_diag(xs, W, nodes, weights, form, eps):
    """Return ``I[i] = int_{-1}^{xs[i]} rho dt`` and ``M[i, a] = int rho'(p) P_a dt``."""
    xs = np.asarray(xs, dtype=float)
    W = np.asarray(W, dtype=float)
    n, A = W.shape
    I = np.empty(n)
    M = np.empty((n, A))
    for s in range(0, n, _CHUNK):
        e = min(s + _CHUNK, n)
        half = 0.5 * (xs[s:e] + 1.0)
        tau = -1.0 + half[:, None] * (nodes + 1.0)
        P = legendre_table(tau, A)
        p = np.einsum("nqa,na->nq", P, W[s:e])
        rho, drho = _rho(p, form, eps)
        wq = half[:, None] * weights
        I[s:e] = np.sum(wq * rho, axis=1)
        M[s:e] = np.einsum("nq,nqa->na", wq * drho, P)
    return I, M


def integral_only(xs, W, nodes, weights, form, eps):
    xs = np.asarray(xs, dtype=float)
    W = np.asarray(W, dtype=float)
    n, A = W.shape
    I = np.empty(n)
    for s in range(0, n, _CHUNK):
        e = min(s + _CHUNK, n)
        half = 0.5 * (xs[s:e] + 1.0)
        tau = -1.0 + half[:, None] * (nodes + 1.0)
        p = np.einsum("nqa,na->nq", legendre_table(tau, A), W[s:e])
        I[s:e] = np.sum(half[:, None] * weights * _rho(p, form, eps)[0], axis=1)
    return I


def invert_diag(target, W, nodes, weights, form, eps, maxiter=200):
    """Solve ``I(xs) = target`` on [-1, 1] by bisection, all rows in lockstep.

    Callers guarantee ``0 <= target <= I(1)``.
    """
    target = np.asarray(target, dtype=float)
    n = len(target)
    lo = np.full(n, -1.0)
    hi = np.full(n, 1.0)
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        below = integral_only(mid, W, nodes, weights, form, eps) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4e-16):
            break
    return 0.5 * (lo + hi)
