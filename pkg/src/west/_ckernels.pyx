# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels; see ``west._pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()


cdef inline bint _lex_less(double ax, double ay, double bx, double by) nogil:
    return ax < bx or (ax == bx and ay < by)


cdef double _overlap(double x1, double y1, double x2, double y2,
                     double x3, double y3, double x4, double y4,
                     double tol) nogil:
    cdef double t, dx, dy, length, ux, uy, c, d, lo, hi
    # canonical endpoint order inside each segment, then canonical pair order
    if _lex_less(x2, y2, x1, y1):
        t = x1; x1 = x2; x2 = t
        t = y1; y1 = y2; y2 = t
    if _lex_less(x4, y4, x3, y3):
        t = x3; x3 = x4; x4 = t
        t = y3; y3 = y4; y4 = t
    if _lex_less(x3, y3, x1, y1) or (x3 == x1 and y3 == y1 and _lex_less(x4, y4, x2, y2)):
        t = x1; x1 = x3; x3 = t
        t = y1; y1 = y3; y3 = t
        t = x2; x2 = x4; x4 = t
        t = y2; y2 = y4; y4 = t
    dx = x2 - x1
    dy = y2 - y1
    length = sqrt(dx * dx + dy * dy)
    if length == 0.0:
        return 0.0
    ux = dx / length
    uy = dy / length
    if fabs(ux * (y3 - y1) - uy * (x3 - x1)) >= tol:
        return 0.0
    if fabs(ux * (y4 - y1) - uy * (x4 - x1)) >= tol:
        return 0.0
    c = ux * (x3 - x1) + uy * (y3 - y1)
    d = ux * (x4 - x1) + uy * (y4 - y1)
    if c > d:
        t = c; c = d; d = t
    # the reverse distance test keeps the relation symmetric for near-parallel pairs
    dx = x4 - x3
    dy = y4 - y3
    t = sqrt(dx * dx + dy * dy)
    if t == 0.0:
        return 0.0
    if fabs((dx * (y1 - y3) - dy * (x1 - x3)) / t) >= tol:
        return 0.0
    if fabs((dx * (y2 - y3) - dy * (x2 - x3)) / t) >= tol:
        return 0.0
    lo = c if c > 0.0 else 0.0
    hi = d if d < length else length
    # contact at a shared endpoint is not a shared border
    if hi - lo <= tol:
        return 0.0
    return hi - lo


def segment_overlap_batch(double[:, ::1] a, double[:, ::1] b, double tol):
    cdef Py_ssize_t m = a.shape[0], i
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(m):
            o[i] = _overlap(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                            b[i, 0], b[i, 1], b[i, 2], b[i, 3], tol)
    return out


def overlap_matrix_sum(double[:, ::1] segs, long[::1] owner, Py_ssize_t n, double tol):
    cdef Py_ssize_t m = segs.shape[0], i, j
    cdef long ri, rj
    cdef double v
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            ri = owner[i]
            for j in range(m):
                rj = owner[j]
                if ri == rj:
                    continue
                v = _overlap(segs[i, 0], segs[i, 1], segs[i, 2], segs[i, 3],
                             segs[j, 0], segs[j, 1], segs[j, 2], segs[j, 3], tol)
                o[ri, rj] += v
    return out


def locate_points(double[::1] px, double[::1] py, double[::1] vx, double[::1] vy,
                  long[::1] offsets, double tol):
    cdef Py_ssize_t m = px.shape[0], nreg = offsets.shape[0] - 1
    cdef Py_ssize_t i, r, j, j0, j1, jn
    cdef double x, y, ex, ey, el, cr
    cdef bint inside
    out = np.full(m, -1, dtype=np.int64)
    cdef long long[::1] o = out
    with nogil:
        for i in range(m):
            x = px[i]
            y = py[i]
            for r in range(nreg):
                j0 = offsets[r]
                j1 = offsets[r + 1]
                inside = True
                for j in range(j0, j1):
                    jn = j + 1 if j + 1 < j1 else j0
                    ex = vx[jn] - vx[j]
                    ey = vy[jn] - vy[j]
                    el = sqrt(ex * ex + ey * ey)
                    cr = ex * (y - vy[j]) - ey * (x - vx[j])
                    if cr < -tol * el:
                        inside = False
                        break
                if inside:
                    o[i] = r
                    break
    return out
