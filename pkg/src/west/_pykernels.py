"""Pure numpy implementations of the geometry kernels.

These are the reference semantics; ``west._ckernels`` must agree with them
bit-for-bit on the overlap kernel and exactly on point location.
"""

import numpy as np


def _canonical(a, b):
    a = np.array(a, dtype=np.float64, copy=True)
    b = np.array(b, dtype=np.float64, copy=True)
    for s in (a, b):
        swap = (s[:, 2] < s[:, 0]) | ((s[:, 2] == s[:, 0]) & (s[:, 3] < s[:, 1]))
        s[swap] = s[swap][:, [2, 3, 0, 1]]
    first_x, first_y = a[:, 0], a[:, 1]
    other_x, other_y = b[:, 0], b[:, 1]
    swap = (other_x < first_x) | ((other_x == first_x) & (other_y < first_y))
    swap |= (
        (other_x == first_x)
        & (other_y == first_y)
        & ((b[:, 2] < a[:, 2]) | ((b[:, 2] == a[:, 2]) & (b[:, 3] < a[:, 3])))
    )
    a2 = np.where(swap[:, None], b, a)
    b2 = np.where(swap[:, None], a, b)
    return a2, b2


def segment_overlap_batch(a, b, tol):
    """Overlap length of each collinear segment pair (rows ``x1,y1,x2,y2``)."""
    a, b = _canonical(a, b)
    x1, y1, x2, y2 = a.T
    x3, y3, x4, y4 = b.T
    dx = x2 - x1
    dy = y2 - y1
    length = np.sqrt(dx * dx + dy * dy)
    with np.errstate(invalid="ignore", divide="ignore"):
        ux = dx / length
        uy = dy / length
        ok = length != 0.0
        ok &= np.abs(ux * (y3 - y1) - uy * (x3 - x1)) < tol
        ok &= np.abs(ux * (y4 - y1) - uy * (x4 - x1)) < tol
        c = ux * (x3 - x1) + uy * (y3 - y1)
        d = ux * (x4 - x1) + uy * (y4 - y1)
        c, d = np.minimum(c, d), np.maximum(c, d)
        ex = x4 - x3
        ey = y4 - y3
        el = np.sqrt(ex * ex + ey * ey)
        ok &= el != 0.0
        ok &= np.abs((ex * (y1 - y3) - ey * (x1 - x3)) / el) < tol
        ok &= np.abs((ex * (y2 - y3) - ey * (x2 - x3)) / el) < tol
        lo = np.where(c > 0.0, c, 0.0)
        hi = np.where(d < length, d, length)
        ok &= hi - lo > tol
    return np.where(ok, hi - lo, 0.0)


def overlap_matrix_sum(segs, owner, n, tol):
    """Sum of pairwise overlaps between border segments of distinct owners."""
    segs = np.asarray(segs, dtype=np.float64)
    owner = np.asarray(owner)
    m = len(segs)
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    keep = owner[ii] != owner[jj]
    ii, jj = ii[keep], jj[keep]
    vals = segment_overlap_batch(segs[ii], segs[jj], tol)
    out = np.zeros((n, n))
    # accumulate in the same (i, j) order as the compiled loop
    for i, j, v in zip(ii, jj, vals):
        out[owner[i], owner[j]] += v
    return out


def locate_points(px, py, vx, vy, offsets, tol):
    """Index of the first convex CCW polygon containing each point, else -1."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    out = np.full(len(px), -1, dtype=np.int64)
    unresolved = np.ones(len(px), dtype=bool)
    for r in range(len(offsets) - 1):
        xs = vx[offsets[r]:offsets[r + 1]]
        ys = vy[offsets[r]:offsets[r + 1]]
        inside = unresolved.copy()
        for j in range(len(xs)):
            jn = (j + 1) % len(xs)
            ex = xs[jn] - xs[j]
            ey = ys[jn] - ys[j]
            el = np.sqrt(ex * ex + ey * ey)
            cr = ex * (py - ys[j]) - ey * (px - xs[j])
            inside &= ~(cr < -tol * el)
        out[inside] = r
        unresolved &= ~inside
    return out
