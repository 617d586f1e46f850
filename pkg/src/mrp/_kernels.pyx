# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-cell likelihood kernels; same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()


cdef inline double _log1pexp(double x) nogil:
    # log(1 + exp(x)) without overflow
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _expit(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def linear_predictor(const double[::1] base, const cnp.int64_t[:, ::1] flat_idx,
                     const double[:, ::1] mult, const double[::1] beta):
    cdef Py_ssize_t n = base.shape[0], K = flat_idx.shape[1], i, k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n)
    cdef double[::1] eta = out
    cdef double acc
    with nogil:
        for i in range(n):
            acc = base[i]
            for k in range(K):
                acc = acc + beta[flat_idx[i, k]] * mult[i, k]
            eta[i] = acc
    return out


def loglik_grad(const double[::1] base, const cnp.int64_t[:, ::1] flat_idx,
                const double[:, ::1] mult, const double[::1] beta,
                const cnp.int64_t[::1] successes, const cnp.int64_t[::1] trials):
    cdef Py_ssize_t n = base.shape[0], K = flat_idx.shape[1], P = beta.shape[0], i, k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] resid_arr = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] grad_arr = np.zeros(P)
    cdef double[::1] resid = resid_arr
    cdef double[::1] grad = grad_arr
    cdef double eta, s, f, r, ll = 0.0
    with nogil:
        for i in range(n):
            eta = base[i]
            for k in range(K):
                eta = eta + beta[flat_idx[i, k]] * mult[i, k]
            s = <double>successes[i]
            f = <double>(trials[i] - successes[i])
            if s != 0.0:
                ll = ll - s * _log1pexp(-eta)
            if f != 0.0:
                ll = ll - f * _log1pexp(eta)
            r = s - (s + f) * _expit(eta)
            resid[i] = r
            for k in range(K):
                grad[flat_idx[i, k]] += r * mult[i, k]
    return ll, resid_arr, grad_arr
