# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled monotone-integral kernels; same contract as ``_kernels_py``."""

import numpy as np

from libc.math cimport exp
from libc.stdlib cimport free, malloc

cdef enum:
    EXP_FORM = 0


cdef inline void _legendre(double t, int A, double* P) noexcept nogil:
    cdef int n
    P[0] = 1.0
    if A > 1:
        P[1] = t
    for n in range(1, A - 1):
        P[n + 1] = ((2 * n + 1) * t * P[n] - n * P[n - 1]) / (n + 1)


cdef inline double _integral(double x, const double[:] W, const double[:] nodes,
                             const double[:] weights, int form, double eps, double* P) noexcept nogil:
    cdef int Q = nodes.shape[0]
    cdef int A = W.shape[0]
    cdef int q, a
    cdef double half = 0.5 * (x + 1.0)
    cdef double tau, p, acc = 0.0
    for q in range(Q):
        tau = -1.0 + half * (nodes[q] + 1.0)
        _legendre(tau, A, P)
        p = 0.0
        for a in range(A):
            p += W[a] * P[a]
        if form == EXP_FORM:
            acc += weights[q] * exp(p)
        else:
            acc += weights[q] * (p * p + eps)
    return half * acc


def integrate_diag(const double[:] xs, const double[:, :] W, const double[:] nodes,
                   const double[:] weights, int form, double eps):
    cdef Py_ssize_t n = W.shape[0]
    cdef int A = W.shape[1]
    cdef int Q = nodes.shape[0]
    I_arr = np.zeros(n)
    M_arr = np.zeros((n, A))
    cdef double[:] I = I_arr
    cdef double[:, :] M = M_arr
    cdef Py_ssize_t i
    cdef int q, a
    cdef double half, tau, p, rho, drho, wq
    cdef double* P = <double*> malloc(A * sizeof(double))
    if P == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                half = 0.5 * (xs[i] + 1.0)
                for q in range(Q):
                    tau = -1.0 + half * (nodes[q] + 1.0)
                    _legendre(tau, A, P)
                    p = 0.0
                    for a in range(A):
                        p += W[i, a] * P[a]
                    if form == EXP_FORM:
                        rho = exp(p)
                        drho = rho
                    else:
                        rho = p * p + eps
                        drho = 2.0 * p
                    wq = half * weights[q]
                    I[i] += wq * rho
                    for a in range(A):
                        M[i, a] += wq * drho * P[a]
    finally:
        free(P)
    return I_arr, M_arr


def integral_only(const double[:] xs, const double[:, :] W, const double[:] nodes,
                  const double[:] weights, int form, double eps):
    cdef Py_ssize_t n = W.shape[0]
    cdef int A = W.shape[1]
    I_arr = np.empty(n)
    cdef double[:] I = I_arr
    cdef Py_ssize_t i
    cdef double* P = <double*> malloc(A * sizeof(double))
    if P == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                I[i] = _integral(xs[i], W[i], nodes, weights, form, eps, P)
    finally:
        free(P)
    return I_arr


def invert_diag(const double[:] target, const double[:, :] W, const double[:] nodes,
                const double[:] weights, int form, double eps, int maxiter=200):
    cdef Py_ssize_t n = W.shape[0]
    cdef int A = W.shape[1]
    out_arr = np.empty(n)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i
    cdef int it
    cdef double lo, hi, mid
    cdef double* P = <double*> malloc(A * sizeof(double))
    if P == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                lo = -1.0
                hi = 1.0
                for it in range(maxiter):
                    mid = 0.5 * (lo + hi)
                    if _integral(mid, W[i], nodes, weights, form, eps, P) < target[i]:
                        lo = mid
                    else:
                        hi = mid
                    if hi - lo <= 4e-16:
                        break
                out[i] = 0.5 * (lo + hi)
    finally:
        free(P)
    return out_arr
