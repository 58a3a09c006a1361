# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled verification kernels.

Same call signatures and results as :mod:`trdm._kernels_py`; see
:mod:`trdm.kernels` for backend selection.
"""
import numpy as np

cimport numpy as cnp
from libc.stdlib cimport free, malloc

cnp.import_array()


cdef inline void _insertion_sort(double* buf, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double key
    for i in range(1, n):
        key = buf[i]
        j = i - 1
        while j >= 0 and buf[j] > key:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = key


def crps_pixels(const double[:, ::1] members, const double[::1] obs):
    """Per-pixel empirical-CDF CRPS for members of shape (M, P)."""
    cdef Py_ssize_t m = members.shape[0]
    cdef Py_ssize_t p = members.shape[1]
    cdef Py_ssize_t i, k
    cdef double mae, spread, y
    out = np.empty(p, dtype=np.float64)
    cdef double[::1] res = out
    cdef double* buf = <double*> malloc(m * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for k in range(p):
                for i in range(m):
                    buf[i] = members[i, k]
                _insertion_sort(buf, m)
                y = obs[k]
                mae = 0.0
                spread = 0.0
                for i in range(m):
                    mae += buf[i] - y if buf[i] >= y else y - buf[i]
                    spread += (2.0 * i - m + 1.0) * buf[i]
                # sum_ij |x_i - x_j| = 2 * spread
                res[k] = mae / m - spread / (<double> m * m)
    finally:
        free(buf)
    return out


def box_mean(const double[:, ::1] field, Py_ssize_t window):
    """Centred window mean with zero padding outside the field."""
    cdef Py_ssize_t h = field.shape[0]
    cdef Py_ssize_t w = field.shape[1]
    cdef Py_ssize_t r = window // 2
    cdef Py_ssize_t i, j, i0, i1, j0, j1
    cdef double norm = 1.0 / (<double> window * window)
    sat_arr = np.zeros((h + 1, w + 1), dtype=np.float64)
    cdef double[:, ::1] sat = sat_arr
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] res = out
    with nogil:
        for i in range(h):
            for j in range(w):
                sat[i + 1, j + 1] = field[i, j] + sat[i, j + 1] + sat[i + 1, j] - sat[i, j]
        for i in range(h):
            i0 = i - r if i - r > 0 else 0
            i1 = i + r + 1 if i + r + 1 < h else h
            for j in range(w):
                j0 = j - r if j - r > 0 else 0
                j1 = j + r + 1 if j + r + 1 < w else w
                res[i, j] = (sat[i1, j1] - sat[i0, j1] - sat[i1, j0] + sat[i0, j0]) * norm
    return out


def contingency(const double[::1] forecast, const double[::1] obs, double threshold):
    """(hits, misses, false_alarms) for exceedance of ``threshold`` (>=)."""
    cdef Py_ssize_t n = forecast.shape[0]
    cdef Py_ssize_t k
    cdef long both = 0, n_f = 0, n_o = 0
    cdef long f, o
    # plain sums vectorize; the three counts follow from them
    with nogil:
        for k in range(n):
            f = forecast[k] >= threshold
            o = obs[k] >= threshold
            n_f += f
            n_o += o
            both += f & o
    hits = both
    misses = n_o - both
    false_alarms = n_f - both
    return hits, misses, false_alarms
