# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""OpenMP kernels for assembly and the CG inner loop.

Every reduction runs in a fixed order, so results do not depend on the
number of threads.
"""
from cython.parallel cimport prange
from libc.math cimport fmax

import numpy as np

DEF BLOCK = 4096


def element_means(const long[:, ::1] tri, const double[::1] u, double[::1] out, int nthreads=1):
    cdef Py_ssize_t e, m = tri.shape[0]
    for e in prange(m, nogil=True, schedule="static", num_threads=nthreads):
        out[e] = (u[tri[e, 0]] + u[tri[e, 1]] + u[tri[e, 2]]) / 3.0


def depth_coefficients(const long[:, ::1] tri, const double[::1] u, const double[::1] hb_mean,
                       double g, double eps_dry, double[::1] out, int nthreads=1):
    """out[e] = g * max(mean(u on e) - hb_mean[e], eps_dry)."""
    cdef Py_ssize_t e, m = tri.shape[0]
    cdef double ubar
    for e in prange(m, nogil=True, schedule="static", num_threads=nthreads):
        ubar = (u[tri[e, 0]] + u[tri[e, 1]] + u[tri[e, 2]]) / 3.0
        out[e] = g * fmax(ubar - hb_mean[e], eps_dry)


def gather_assemble(const long[::1] ptr, const long[::1] src, const double[::1] elem_vals,
                    const double[::1] coef, double[::1] out, int nthreads=1):
    """out[k] = sum(coef[s // 9] * elem_vals[s] for s in src[ptr[k]:ptr[k+1]])."""
    cdef Py_ssize_t k, p, s, nnz = out.shape[0]
    cdef double acc
    for k in prange(nnz, nogil=True, schedule="static", num_threads=nthreads):
        acc = 0.0
        for p in range(ptr[k], ptr[k + 1]):
            s = src[p]
            acc = acc + coef[s // 9] * elem_vals[s]
        out[k] = acc


def csr_matvec(const long[::1] indptr, const long[::1] indices, const double[::1] data,
               const double[::1] x, double[::1] out, int nthreads=1):
    cdef Py_ssize_t i, p, n = out.shape[0]
    cdef double acc
    for i in prange(n, nogil=True, schedule="static", num_threads=nthreads):
        acc = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            acc = acc + data[p] * x[indices[p]]
        out[i] = acc


def dot(const double[::1] x, const double[::1] y, int nthreads=1):
    """Blocked dot product; block partials are summed in block order."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t nb = (n + BLOCK - 1) // BLOCK
    cdef Py_ssize_t b, i, lo, hi
    cdef double acc, total = 0.0
    partial_arr = np.zeros(max(nb, 1))
    cdef double[::1] partial = partial_arr
    for b in prange(nb, nogil=True, schedule="static", num_threads=nthreads):
        lo = b * BLOCK
        hi = lo + BLOCK
        if hi > n:
            hi = n
        acc = 0.0
        for i in range(lo, hi):
            acc = acc + x[i] * y[i]
        partial[b] = acc
    for b in range(nb):
        total += partial[b]
    return total


def lincomb3(double a, const double[::1] x, double b, const double[::1] y,
             double c, const double[::1] z, double[::1] out, int nthreads=1):
    cdef Py_ssize_t i, n = out.shape[0]
    for i in prange(n, nogil=True, schedule="static", num_threads=nthreads):
        out[i] = a * x[i] + b * y[i] + c * z[i]
