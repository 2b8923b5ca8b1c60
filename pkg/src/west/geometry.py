"""Regions and the shared-borders adjacency.

Regions are convex Voronoi cells of k-means centers, clipped to a bounding
box. Two regions are weighted by the total length of border they share,
and each region's self-weight is its perimeter.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from west import kernels
from west.errors import (
    AllZero,
    CenterOutsideBox,
    DegenerateInput,
    DuplicateCenters,
    EmptyInput,
    MissingArtifact,
)


class Point(NamedTuple):
    x: float
    y: float


class BBox(NamedTuple):
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def diagonal(self):
        return math.hypot(self.xmax - self.xmin, self.ymax - self.ymin)

    def contains(self, p, strict=False):
        if strict:
            return self.xmin < p[0] < self.xmax and self.ymin < p[1] < self.ymax
        return self.xmin <= p[0] <= self.xmax and self.ymin <= p[1] <= self.ymax

    def corners(self):
        """Corners in counter-clockwise order starting bottom-left."""
        return np.array(
            [
                [self.xmin, self.ymin],
                [self.xmax, self.ymin],
                [self.xmax, self.ymax],
                [self.xmin, self.ymax],
            ]
        )

    @classmethod
    def around(cls, points, margin=0.05):
        """Extent of ``points`` expanded by ``margin`` of its size on each side."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        lo = lo - margin * span
        hi = hi + margin * span
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


@dataclass(frozen=True)
class Segment:
    p1: Point
    p2: Point

    def __post_init__(self):
        p1, p2 = Point(*self.p1), Point(*self.p2)
        if not all(math.isfinite(v) for v in (*p1, *p2)):
            raise ValueError(f"segment has non-finite endpoint: {p1}, {p2}")
        if p1 == p2:
            raise ValueError(f"zero-length segment at {p1}")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p2", p2)

    @property
    def length(self):
        return math.hypot(self.p2.x - self.p1.x, self.p2.y - self.p1.y)

    def as_row(self):
        return (self.p1.x, self.p1.y, self.p2.x, self.p2.y)


@dataclass(frozen=True)
class Region:
    """A convex cell; ``vertices`` is an (m, 2) array in counter-clockwise order."""

    index: int
    center: Point
    vertices: np.ndarray

    @property
    def borders(self):
        v = self.vertices
        return [
            Segment(Point(*v[i]), Point(*v[(i + 1) % len(v)])) for i in range(len(v))
        ]

    def border_array(self):
        v = self.vertices
        return np.hstack([v, np.roll(v, -1, axis=0)])

    def contains(self, p, tol=1e-9):
        v = self.vertices
        for i in range(len(v)):
            a, b = v[i], v[(i + 1) % len(v)]
            e = b - a
            if e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0]) < -tol * math.hypot(*e):
                return False
        return True

    def centroid(self):
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        area = cross.sum() / 2.0
        return Point(
            float(((x + xn) * cross).sum() / (6.0 * area)),
            float(((y + yn) * cross).sum() / (6.0 * area)),
        )


def _as_xy(points):
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def kmeans_centers(points, k, seed=0, max_iter=100, tol=1e-9):
    """Lloyd's k-means with a seeded farthest-point initialisation.

    The first center is a seeded random input point; each further center is
    the input point farthest from those already chosen (lowest index on ties).
    Returns ``k`` centers as :class:`Point`.
    """
    pts = _as_xy(points)
    if len(pts) == 0:
        raise EmptyInput("k-means needs at least one point")
    if k < 1 or max_iter < 1:
        raise ValueError("k and max_iter must be >= 1")
    distinct = np.unique(pts, axis=0)
    if len(distinct) < k:
        raise DegenerateInput(f"{len(distinct)} distinct points cannot seed {k} clusters")

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(distinct)))]
    d2 = ((distinct - distinct[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((distinct - distinct[nxt]) ** 2).sum(axis=1))
    centers = distinct[chosen].copy()

    for _ in range(max_iter):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        label = np.argmin(dist, axis=1)
        new = centers.copy()
        for c in range(k):
            members = pts[label == c]
            if len(members):
                new[c] = members.mean(axis=0)
            else:
                # steal the point worst served by its current center
                worst = int(np.argmax(dist[np.arange(len(pts)), label]))
                new[c] = pts[worst]
                label[worst] = c
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    return [Point(float(x), float(y)) for x, y in centers]


def _clip_halfplane(poly, normal, offset, eps):
    """Keep the part of a convex polygon where ``normal . p <= offset``."""
    out = []
    m = len(poly)
    side = poly @ normal - offset
    for i in range(m):
        cur, nxt = poly[i], poly[(i + 1) % m]
        sc, sn = side[i], side[(i + 1) % m]
        if sc <= eps:
            out.append(cur)
        if (sc < -eps and sn > eps) or (sc > eps and sn < -eps):
            t = sc / (sc - sn)
            out.append(cur + t * (nxt - cur))
    return np.array(out) if out else np.empty((0, 2))


def _tidy_polygon(poly, eps):
    """Drop repeated and collinear vertices from a convex CCW polygon."""
    pts = list(poly)
    changed = True
    while changed and len(pts) >= 3:
        changed = False
        keep = []
        for i, p in enumerate(pts):
            prev = keep[-1] if keep else pts[-1]
            if np.hypot(*(p - prev)) <= eps:
                changed = True
                continue
            keep.append(p)
        pts = keep
        keep = []
        for i, p in enumerate(pts):
            a, b = pts[i - 1], pts[(i + 1) % len(pts)]
            e = b - a
            norm = math.hypot(*e)
            if norm > 0 and abs(e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0])) / norm <= eps:
                changed = True
                continue
            keep.append(p)
        pts = keep
    return np.array(pts)


def voronoi_partition(centers, bbox):
    """Voronoi cells of ``centers`` clipped to ``bbox``, one :class:`Region` each.

    Each cell is built by clipping the box against the bisector half-plane of
    every other center.
    """
    bbox = BBox(*bbox)
    c = _as_xy(centers)
    if len(c) < 2:
        raise DegenerateInput("a partition needs at least two centers")
    for i, p in enumerate(c):
        if not bbox.contains(p, strict=True):
            raise CenterOutsideBox(f"center {i} at {tuple(p)} is not strictly inside {tuple(bbox)}")
    for i in range(len(c)):
        for j in range(i + 1, len(c)):
            if np.hypot(*(c[i] - c[j])) <= 1e-12:
                raise DuplicateCenters(f"centers {i} and {j} coincide at {tuple(c[i])}")

    scale = bbox.diagonal
    eps = 1e-12 * scale
    regions = []
    for i, ci in enumerate(c):
        poly = bbox.corners()
        for j, cj in enumerate(c):
            if i == j:
                continue
            normal = cj - ci
            offset = (cj @ cj - ci @ ci) / 2.0
            poly = _clip_halfplane(poly, normal, offset, eps * np.hypot(*normal))
        poly = _tidy_polygon(poly, 1e-10 * scale)
        regions.append(Region(i, Point(float(ci[0]), float(ci[1])), poly))
    return regions


def shared_border_length(s1, s2, tol=1e-9):
    """Length of the common part of two segments, 0 unless they are collinear.

    Collinear means each segment's endpoints lie within ``tol`` of the
    other's carrier line. The overlap is measured as a 1-D interval
    intersection along the shared direction; overlaps no longer than ``tol``
    (segments meeting at an endpoint) count as 0.
    """
    s1 = s1 if isinstance(s1, Segment) else Segment(*s1)
    s2 = s2 if isinstance(s2, Segment) else Segment(*s2)
    a = np.array([s1.as_row()], dtype=np.float64)
    b = np.array([s2.as_row()], dtype=np.float64)
    return float(kernels.segment_overlap_batch(a, b, float(tol))[0])


def region_perimeter(region):
    v = region.vertices
    return float(np.hypot(*(np.roll(v, -1, axis=0) - v).T).sum())


def default_tolerance(regions):
    allv = np.vstack([r.vertices for r in regions])
    return 1e-9 * BBox.around(allv, margin=0.0).diagonal


def shared_borders_adjacency(regions: Sequence[Region], tol=None):
    """Raw (unnormalised) shared-border weights; diagonal holds perimeters."""
    if len(regions) < 2:
        raise DegenerateInput("adjacency needs at least two regions")
    if tol is None:
        tol = default_tolerance(regions)
    segs = np.vstack([r.border_array() for r in regions])
    owner = np.concatenate(
        [np.full(len(r.vertices), k, dtype=np.int64) for k, r in enumerate(regions)]
    )
    raw = kernels.overlap_matrix_sum(np.ascontiguousarray(segs), owner, len(regions), float(tol))
    a = (raw + raw.T) / 2.0
    for k, r in enumerate(regions):
        a[k, k] = region_perimeter(r)
    return a


def normalize_adjacency_weights(a):
    """Divide every entry by the global maximum so the largest becomes 1."""
    a = np.asarray(a, dtype=np.float64)
    if (a < 0).any():
        raise ValueError("adjacency weights must be nonnegative")
    top = a.max()
    if not top > 0:
        raise AllZero("cannot normalise an all-zero adjacency matrix")
    return a / top


def voronoi_neighbors(regions, tol=None):
    """Boolean matrix of regions whose cells share a border of positive length."""
    a = shared_borders_adjacency(regions, tol)
    nb = a > 0
    np.fill_diagonal(nb, False)
    return nb


# -- persistence -------------------------------------------------------------


def save_regions(path, regions, bbox):
    doc = {
        "bbox": [float(v) for v in bbox],
        "regions": [
            {
                "index": r.index,
                "center": [r.center.x, r.center.y],
                "vertices": [[float(x), float(y)] for x, y in r.vertices],
            }
            for r in regions
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_regions(path):
    """Returns ``(regions, bbox)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingArtifact(f"regions file not found: {path}") from exc
    regions = [
        Region(int(r["index"]), Point(*r["center"]), np.array(r["vertices"], dtype=np.float64))
        for r in doc["regions"]
    ]
    return regions, BBox(*doc["bbox"])


def save_matrix_csv(path, a):
    a = np.asarray(a)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(range(a.shape[0])))
        for row in a:
            w.writerow(["%.17g" % v for v in row])


def load_matrix_csv(path):
    try:
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise MissingArtifact(f"adjacency file not found: {path}") from exc
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
