# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for kernel propagation.

Every loop releases the GIL so that the thread workers in
``tangent_kernels.batching`` run truly in parallel.  Semantics must match
``fallback.py`` exactly (up to floating-point roundoff).
"""

from libc.math cimport sqrt, acos, asin, pi, fmax, fmin

import numpy as np
cimport numpy as cnp

cnp.import_array()


def abrelu_flat(const double[::1] cov, const double[::1] v1, const double[::1] v2,
                double a, double b,
                double[::1] t_out, double[::1] tdot_out, bint want_tdot):
    cdef Py_ssize_t i, n = cov.shape[0]
    cdef double apb = a * a + b * b
    cdef double ab2 = 2.0 * a * b
    cdef double two_pi = 2.0 * pi
    cdef double sq, rho, theta, sin_t
    with nogil:
        for i in range(n):
            sq = v1[i] * v2[i]
            if sq <= 0.0:
                t_out[i] = 0.0
                if want_tdot:
                    tdot_out[i] = 0.0
                continue
            sq = sqrt(sq)
            rho = cov[i] / sq
            rho = fmax(-1.0, fmin(1.0, rho))
            theta = acos(rho)
            sin_t = sqrt(fmax(1.0 - rho * rho, 0.0))
            t_out[i] = (sq / two_pi) * (apb * (sin_t + (pi - theta) * rho)
                                        - ab2 * (sin_t - theta * rho))
            if want_tdot:
                tdot_out[i] = (apb * (pi - theta) + ab2 * theta) / two_pi


def erf_flat(const double[::1] cov, const double[::1] v1, const double[::1] v2,
             double[::1] t_out, double[::1] tdot_out, bint want_tdot):
    cdef Py_ssize_t i, n = cov.shape[0]
    cdef double d1, d2, dd, arg
    with nogil:
        for i in range(n):
            d1 = 1.0 + 2.0 * v1[i]
            d2 = 1.0 + 2.0 * v2[i]
            dd = d1 * d2
            arg = 2.0 * cov[i] / sqrt(dd)
            arg = fmax(-1.0, fmin(1.0, arg))
            t_out[i] = (2.0 / pi) * asin(arg)
            if want_tdot:
                tdot_out[i] = (4.0 / pi) / sqrt(fmax(dd - 4.0 * cov[i] * cov[i], 1e-300))


def conv_accumulate_marginal(const double[:, :, ::1] padded,
                             Py_ssize_t qh, Py_ssize_t qw,
                             Py_ssize_t sh, Py_ssize_t sw,
                             Py_ssize_t oh, Py_ssize_t ow,
                             double scale):
    cdef cnp.ndarray out_arr = np.zeros(
        (padded.shape[0], oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t bsz = padded.shape[0]
    cdef Py_ssize_t b, i, j, dh, dw
    cdef double acc
    with nogil:
        for b in range(bsz):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for dh in range(qh):
                        for dw in range(qw):
                            acc += padded[b, sh * i + dh, sw * j + dw]
                    out[b, i, j] = acc * scale
    return out_arr


def conv_accumulate_full(const double[:, :, :, :, ::1] padded,
                         Py_ssize_t qh, Py_ssize_t qw,
                         Py_ssize_t sh, Py_ssize_t sw,
                         Py_ssize_t oh, Py_ssize_t ow,
                         double scale):
    cdef cnp.ndarray out_arr = np.zeros(
        (padded.shape[0], oh, ow, oh, ow), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t bsz = padded.shape[0]
    cdef Py_ssize_t b, i1, j1, i2, j2, dh, dw
    cdef double acc
    with nogil:
        for b in range(bsz):
            for i1 in range(oh):
                for j1 in range(ow):
                    for i2 in range(oh):
                        for j2 in range(ow):
                            acc = 0.0
                            for dh in range(qh):
                                for dw in range(qw):
                                    acc += padded[b, sh * i1 + dh, sw * j1 + dw,
                                                  sh * i2 + dh, sw * j2 + dw]
                            out[b, i1, j1, i2, j2] = acc * scale
    return out_arr
