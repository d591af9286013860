# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Same contracts and arithmetic order as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def stencil_eval(const double[::1] vals, const cnp.intp_t[:, ::1] nbr,
                 double hx, double hy, double inv_re):
    cdef Py_ssize_t m = nbr.shape[0], s
    f_arr = np.empty(m)
    dfd_arr = np.empty((m, 7))
    cdef double[::1] f = f_arr
    cdef double[:, ::1] dfd = dfd_arr
    cdef double wc, wl, wr, wd, wu, uc, vc, dx, dy, lap
    cdef double cx = inv_re / (hx * hx)
    cdef double cy = inv_re / (hy * hy)
    for s in range(m):
        wc = vals[nbr[s, 0]]
        wl = vals[nbr[s, 1]]
        wr = vals[nbr[s, 2]]
        wd = vals[nbr[s, 3]]
        wu = vals[nbr[s, 4]]
        uc = vals[nbr[s, 5]]
        vc = vals[nbr[s, 6]]
        dx = (wc - wl) / hx
        dy = (wc - wd) / hy
        lap = cx * ((wr - 2.0 * wc) + wl) + cy * ((wu - 2.0 * wc) + wd)
        f[s] = (lap - uc * dx) - vc * dy
        dfd[s, 0] = ((-uc / hx) - vc / hy) - 2.0 * (cx + cy)
        dfd[s, 1] = uc / hx + cx
        dfd[s, 2] = cx
        dfd[s, 3] = vc / hy + cy
        dfd[s, 4] = cy
        dfd[s, 5] = -dx
        dfd[s, 6] = -dy
    return f_arr, dfd_arr


def stencil_rhs(const double[::1] vals, const cnp.intp_t[:, ::1] nbr,
                double hx, double hy, double inv_re):
    cdef Py_ssize_t m = nbr.shape[0], s
    f_arr = np.empty(m)
    cdef double[::1] f = f_arr
    cdef double wc, dx, dy, lap
    cdef double cx = inv_re / (hx * hx)
    cdef double cy = inv_re / (hy * hy)
    for s in range(m):
        wc = vals[nbr[s, 0]]
        dx = (wc - vals[nbr[s, 1]]) / hx
        dy = (wc - vals[nbr[s, 3]]) / hy
        lap = cx * ((vals[nbr[s, 2]] - 2.0 * wc) + vals[nbr[s, 1]]) + cy * (
            (vals[nbr[s, 4]] - 2.0 * wc) + vals[nbr[s, 3]])
        f[s] = (lap - vals[nbr[s, 5]] * dx) - vals[nbr[s, 6]] * dy
    return f_arr


def masked_decode(const double[::1] z, const double[:, ::1] w1,
                  const double[::1] b1, const double[:, ::1] w2,
                  const cnp.intp_t[:, ::1] cols, const double[::1] b2,
                  bint jacobian=False):
    cdef Py_ssize_t nh = w1.shape[0], ns = z.shape[0]
    cdef Py_ssize_t m = w2.shape[0], width = cols.shape[1]
    cdef Py_ssize_t i, k, q
    cdef cnp.intp_t c
    cdef double a, s, acc, g
    h_arr = np.empty(nh)
    dh_arr = np.empty(nh)
    cdef double[::1] h = h_arr
    cdef double[::1] dh = dh_arr
    for i in range(nh):
        a = w1[i, 0] * z[0]
        for k in range(1, ns):
            a = a + w1[i, k] * z[k]
        a = a + b1[i]
        s = 1.0 / (1.0 + exp(-a))
        h[i] = a * s
        dh[i] = s * (1.0 + a * (1.0 - s))

    y_arr = np.empty(m)
    cdef double[::1] y = y_arr
    for i in range(m):
        acc = w2[i, 0] * h[cols[i, 0]]
        for k in range(1, width):
            acc = acc + w2[i, k] * h[cols[i, k]]
        y[i] = acc + b2[i]
    if not jacobian:
        return y_arr, None

    jac_arr = np.empty((m, ns))
    cdef double[:, ::1] jac = jac_arr
    for i in range(m):
        c = cols[i, 0]
        g = w2[i, 0] * dh[c]
        for q in range(ns):
            jac[i, q] = g * w1[c, q]
        for k in range(1, width):
            c = cols[i, k]
            g = w2[i, k] * dh[c]
            for q in range(ns):
                jac[i, q] = jac[i, q] + g * w1[c, q]
    return y_arr, jac_arr


def gather_rows(const double[:, ::1] coef, const cnp.intp_t[:, ::1] nbr,
                const double[:, ::1] mat):
    cdef Py_ssize_t m = nbr.shape[0], nk = nbr.shape[1], ncol = mat.shape[1]
    cdef Py_ssize_t s, k, q
    cdef cnp.intp_t r
    cdef double g
    out_arr = np.empty((m, ncol))
    cdef double[:, ::1] out = out_arr
    for s in range(m):
        r = nbr[s, 0]
        g = coef[s, 0]
        for q in range(ncol):
            out[s, q] = g * mat[r, q]
        for k in range(1, nk):
            r = nbr[s, k]
            g = coef[s, k]
            for q in range(ncol):
                out[s, q] = out[s, q] + g * mat[r, q]
    return out_arr
