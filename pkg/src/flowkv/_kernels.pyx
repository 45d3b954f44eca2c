# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled single-token attention step.

Mirrors kernels.attn_step_py: one query vector per head attends over that
layer's cached keys (token-major layout); returns the per-head context
vectors and the softmax rows.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def attn_step(double[:, ::1] q, double[:, :, ::1] keys, double[:, :, ::1] values):
    cdef Py_ssize_t h = q.shape[0]
    cdef Py_ssize_t d = q.shape[1]
    cdef Py_ssize_t n = keys.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ctx_arr = np.zeros((h, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] probs_arr = np.empty((h, n))
    cdef double[:, ::1] ctx = ctx_arr
    cdef double[:, ::1] probs = probs_arr
    cdef double scale = 1.0 / sqrt(<double> d)
    cdef Py_ssize_t i, j, k
    cdef double s, m, z, p

    for i in range(h):
        m = -1e300
        for j in range(n):
            s = 0.0
            for k in range(d):
                s += keys[j, i, k] * q[i, k]
            s *= scale
            probs[i, j] = s
            if s > m:
                m = s
        z = 0.0
        for j in range(n):
            p = exp(probs[i, j] - m)
            probs[i, j] = p
            z += p
        for j in range(n):
            p = probs[i, j] / z
            probs[i, j] = p
            for k in range(d):
                ctx[i, k] += p * values[j, i, k]
    return ctx_arr, probs_arr
