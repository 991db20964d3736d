# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scaled forward/backward recursions.

Same contract as :mod:`gbm._fb_py`. The emission matrix passed in is the
per-step rescaled likelihood ``exp(logE[t] - max_z logE[t])`` so the largest
entry of every row is 1; the shifts are added back by the caller.
"""
import numpy as np
from libc.math cimport log


def forward(const double[::1] pi, const double[:, ::1] omega,
            const double[:, ::1] emis):
    """Normalised forward messages and per-step normalisers.

    Returns ``(fhat, scale, bad_t)``; ``bad_t`` is the first step whose
    normaliser is zero, or -1.
    """
    cdef Py_ssize_t T = emis.shape[0], Z = emis.shape[1]
    cdef Py_ssize_t t, z, zp
    cdef double s, acc
    fhat_arr = np.zeros((T, Z), dtype=np.float64)
    scale_arr = np.zeros(T, dtype=np.float64)
    cdef double[:, ::1] fhat = fhat_arr
    cdef double[::1] scale = scale_arr
    cdef Py_ssize_t bad = -1
    with nogil:
        s = 0.0
        for z in range(Z):
            fhat[0, z] = pi[z] * emis[0, z]
            s += fhat[0, z]
        scale[0] = s
        if s > 0.0:
            for z in range(Z):
                fhat[0, z] /= s
        else:
            bad = 0
        if bad < 0:
            for t in range(1, T):
                s = 0.0
                for z in range(Z):
                    acc = 0.0
                    for zp in range(Z):
                        acc += fhat[t - 1, zp] * omega[zp, z]
                    fhat[t, z] = acc * emis[t, z]
                    s += fhat[t, z]
                scale[t] = s
                if s > 0.0:
                    for z in range(Z):
                        fhat[t, z] /= s
                else:
                    bad = t
                    break
    return fhat_arr, scale_arr, bad


def backward(const double[:, ::1] omega, const double[:, ::1] emis,
             const double[::1] scale):
    """Normalised backward messages; ``bhat[T-1] = 1``."""
    cdef Py_ssize_t T = emis.shape[0], Z = emis.shape[1]
    cdef Py_ssize_t t, z, zn
    cdef double acc
    bhat_arr = np.ones((T, Z), dtype=np.float64)
    cdef double[:, ::1] bhat = bhat_arr
    with nogil:
        for t in range(T - 2, -1, -1):
            for z in range(Z):
                acc = 0.0
                for zn in range(Z):
                    acc += omega[z, zn] * emis[t + 1, zn] * bhat[t + 1, zn]
                bhat[t, z] = acc / scale[t + 1]
    return bhat_arr


def forward_loglik(const double[::1] pi, const double[:, ::1] omega,
                   const double[:, ::1] emis):
    """Sum of log normalisers of the forward pass, without storing messages.

    Returns ``(sum_log_scale, bad_t)``.
    """
    cdef Py_ssize_t T = emis.shape[0], Z = emis.shape[1]
    cdef Py_ssize_t t, z, zp
    cdef double s, acc, total = 0.0
    cdef Py_ssize_t bad = -1
    prev_arr = np.empty(Z, dtype=np.float64)
    cur_arr = np.empty(Z, dtype=np.float64)
    cdef double[::1] prev = prev_arr
    cdef double[::1] cur = cur_arr
    with nogil:
        s = 0.0
        for z in range(Z):
            prev[z] = pi[z] * emis[0, z]
            s += prev[z]
        if s > 0.0:
            total += log(s)
            for z in range(Z):
                prev[z] /= s
            for t in range(1, T):
                s = 0.0
                for z in range(Z):
                    acc = 0.0
                    for zp in range(Z):
                        acc += prev[zp] * omega[zp, z]
                    cur[z] = acc * emis[t, z]
                    s += cur[z]
                if s > 0.0:
                    total += log(s)
                    for z in range(Z):
                        prev[z] = cur[z] / s
                else:
                    bad = t
                    break
        else:
            bad = 0
    return total, bad
