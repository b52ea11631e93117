# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel: exact 1D squared distance transform over many lines.

Lower envelope of parabolas (Felzenszwalb & Huttenlocher), weighted by the
squared voxel spacing along the processed axis.
"""
import numpy as np
from libc.math cimport INFINITY


def squared_edt_lines(double[:, ::1] f, double weight):
    """Transform every row of ``f`` in place.

    Rows hold 0 at feature voxels and +inf elsewhere on the first pass, and
    partial squared distances on later passes. Rows with no finite entry are
    left untouched.
    """
    cdef Py_ssize_t n_lines = f.shape[0]
    cdef Py_ssize_t n = f.shape[1]
    cdef Py_ssize_t i, q, k, p, d
    cdef double s, fq
    cdef Py_ssize_t[::1] v = np.empty(max(n, 1), dtype=np.intp)
    cdef double[::1] z = np.empty(n + 1, dtype=np.float64)
    cdef double[::1] out = np.empty(max(n, 1), dtype=np.float64)

    with nogil:
        for i in range(n_lines):
            k = -1
            for q in range(n):
                fq = f[i, q]
                if fq == INFINITY:
                    continue
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -INFINITY
                    z[1] = INFINITY
                    continue
                while True:
                    p = v[k]
                    s = ((fq + weight * (q * q)) - (f[i, p] + weight * (p * p))) / (2.0 * weight * (q - p))
                    if s <= z[k]:
                        k -= 1
                    else:
                        break
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = INFINITY
            if k < 0:
                continue
            k = 0
            for q in range(n):
                while z[k + 1] < q:
                    k += 1
                p = v[k]
                d = (q - p) * (q - p)
                out[q] = f[i, p] + weight * d
            for q in range(n):
                f[i, q] = out[q]
