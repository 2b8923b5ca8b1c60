"""Populations, trajectories and regional traffic series.

Covers the speed-driven hop policy that sets the snapshot duration and the
number of graph-convolution hops per population, conversion of raw
trajectories into per-region occupancy counts, and a seeded random-waypoint
generator used in place of a full traffic simulator.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from west import kernels
from west.errors import (
    EmptyWindow,
    InvalidConfig,
    MissingArtifact,
    NonPositiveSpeed,
    SingletonTrack,
)
from west.geometry import BBox, Point

log = logging.getLogger(__name__)


class TrajectoryPoint(NamedTuple):
    entity_id: int
    t: float
    pos: Point


class PopulationSpec(NamedTuple):
    population_id: int
    speed: float


class Trajectories:
    """Column store of trajectory records sorted by ``(entity_id, t)``.

    Iterating yields :class:`TrajectoryPoint`. ``labels`` optionally maps
    entity ids to the population that generated them.
    """

    def __init__(self, entity_id, t, x, y, labels=None):
        eid = np.asarray(entity_id, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not (len(eid) == len(t) == len(x) == len(y)):
            raise ValueError("trajectory columns differ in length")
        if len(t) and (not np.isfinite(t).all() or (t < 0).any()):
            raise ValueError("trajectory times must be finite and nonnegative")
        order = np.lexsort((t, eid))
        self.entity_id = eid[order]
        self.t = t[order]
        self.x = x[order]
        self.y = y[order]
        same = self.entity_id[1:] == self.entity_id[:-1]
        if (same & (self.t[1:] <= self.t[:-1])).any():
            raise ValueError("times must be strictly increasing within an entity")
        self.labels = dict(labels) if labels else {}

    @classmethod
    def from_points(cls, points):
        pts = list(points)
        if not pts:
            return cls([], [], [], [])
        eid, t, pos = zip(*pts)
        xy = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
        return cls(eid, t, xy[:, 0], xy[:, 1])

    @classmethod
    def coerce(cls, traj):
        return traj if isinstance(traj, cls) else cls.from_points(traj)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for e, t, x, y in zip(self.entity_id, self.t, self.x, self.y):
            yield TrajectoryPoint(int(e), float(t), Point(float(x), float(y)))

    def spans(self):
        """Yield ``(entity_id, start, stop)`` row ranges per entity."""
        if not len(self):
            return
        cut = np.flatnonzero(np.diff(self.entity_id)) + 1
        starts = np.concatenate([[0], cut])
        stops = np.concatenate([cut, [len(self)]])
        for a, b in zip(starts, stops):
            yield int(self.entity_id[a]), int(a), int(b)

    def entities(self):
        return np.unique(self.entity_id)

    def subset(self, entity_ids):
        keep = np.isin(self.entity_id, np.fromiter(entity_ids, dtype=np.int64))
        labels = {e: p for e, p in self.labels.items() if e in set(entity_ids)}
        return Trajectories(self.entity_id[keep], self.t[keep], self.x[keep], self.y[keep], labels)

    def save_csv(self, path):
        table = np.column_stack([self.entity_id, self.t, self.x, self.y])
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("entity_id,t,x,y\n")
            np.savetxt(fh, table, fmt=["%d", "%.17g", "%.17g", "%.17g"], delimiter=",")

    @classmethod
    def load_csv(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                header = fh.readline().strip()
                if header != "entity_id,t,x,y":
                    raise ValueError(f"unexpected trajectory header {header!r}")
                data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except FileNotFoundError as exc:
            raise MissingArtifact(f"trajectory file not found: {path}") from exc
        if data.size == 0:
            return cls([], [], [], [])
        return cls(data[:, 0].astype(np.int64), data[:, 1], data[:, 2], data[:, 3])


@dataclass(frozen=True)
class TrafficSeries:
    n_regions: int
    t_window: float
    counts: np.ndarray  # T x n_regions, nonnegative integers

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[1] != self.n_regions or c.shape[0] < 1:
            raise ValueError(f"counts of shape {c.shape} do not match {self.n_regions} regions")
        if (c < 0).any():
            raise ValueError("counts must be nonnegative")
        if not self.t_window > 0:
            raise ValueError("t_window must be positive")

    @property
    def steps(self):
        return self.counts.shape[0]

    def __add__(self, other):
        if other.n_regions != self.n_regions or other.counts.shape != self.counts.shape:
            raise ValueError("cannot add traffic series of different shapes")
        return TrafficSeries(self.n_regions, self.t_window, self.counts + other.counts)

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            cols = ",".join(f"region_{i}" for i in range(self.n_regions))
            fh.write(f"step,{cols}\n")
            table = np.column_stack([np.arange(self.steps), self.counts])
            np.savetxt(fh, table, fmt="%d", delimiter=",")

    @classmethod
    def load_csv(cls, path, t_window):
        try:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.int64)
        except FileNotFoundError as exc:
            raise MissingArtifact(f"traffic series not found: {path}") from exc
        return cls(data.shape[1] - 1, float(t_window), data[:, 1:])


# -- adjustable hops ---------------------------------------------------------


def average_center_distance(centers, mode="ordered"):
    """Mean distance between region centers.

    ``ordered`` sums over all N^2 ordered pairs including self-pairs and
    divides by N^2; ``unordered`` averages the N(N-1)/2 distinct pairs.
    """
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    n = len(c)
    if n < 2:
        raise ValueError("need at least two centers")
    total = 0.0
    for k in range(n):
        for l in range(n):
            total += math.hypot(c[l, 0] - c[k, 0], c[l, 1] - c[k, 1])
    if mode == "ordered":
        return total / (n * n)
    if mode == "unordered":
        return (total / 2.0) / (n * (n - 1) / 2.0)
    raise ValueError(f"unknown distance mode {mode!r}")


def round_half_away(x):
    return math.floor(x + 0.5) if x >= 0 else -math.floor(-x + 0.5)


def _snap(x, rel=1e-9):
    # ratios such as 2.4999999999999996 come from rescaled speeds; pin them to the half-grid
    half = round(x * 2.0) / 2.0
    return half if abs(x - half) <= rel * max(1.0, abs(x)) else x


def adjustable_hops(speeds, centers, u, window="alg3", distance_mode="ordered"):
    """Snapshot duration and per-population hop counts.

    The slowest population may cross at most one region per snapshot; with
    ``window="alg3"`` and ``u > 1`` the duration is stretched by ``u / 2``.
    Each population's K is its speed times the duration over the mean center
    distance, rounded half away from zero and floored at 1.

    Returns ``(t_window, k_values)``.
    """
    speeds = [float(s) for s in speeds]
    if not speeds:
        raise ValueError("need at least one population speed")
    for i, s in enumerate(speeds):
        if not (s > 0 and math.isfinite(s)):
            raise NonPositiveSpeed(f"population {i} has speed {s}")
    if u < 1:
        raise ValueError("u must be >= 1")
    if window not in ("alg3", "base"):
        raise ValueError(f"unknown hops window {window!r}")
    d = average_center_distance(centers, distance_mode)
    min_speed = speeds[0]
    for s in speeds:
        if s < min_speed:
            min_speed = s
    factor = u / 2.0 if (window == "alg3" and u > 1) else 1.0
    t_window = d / min_speed * factor
    # speed * t_window / D, with the D cancelled analytically
    ks = [max(1, round_half_away(_snap(s / min_speed * factor))) for s in speeds]
    return t_window, ks


# -- populations ---------------------------------------------------------------


def entity_speeds(traj):
    """Mean speed (path length / elapsed time) of every entity with >= 2 records."""
    traj = Trajectories.coerce(traj)
    out = {}
    for eid, a, b in traj.spans():
        if b - a < 2:
            continue
        path = np.hypot(np.diff(traj.x[a:b]), np.diff(traj.y[a:b])).sum()
        out[eid] = float(path / (traj.t[b - 1] - traj.t[a]))
    return out


def classify_populations(traj, boundaries, strict=False):
    """Assign each entity to the speed bucket its mean speed falls in.

    Bucket ``p`` holds speeds in ``[boundaries[p-1], boundaries[p])``.
    Entities with fewer than two records are skipped with a warning, or
    raise :class:`SingletonTrack` when ``strict``.
    """
    bounds = [float(b) for b in boundaries]
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ValueError("speed boundaries must be strictly increasing")
    traj = Trajectories.coerce(traj)
    speeds = entity_speeds(traj)
    singles = [eid for eid, a, b in traj.spans() if b - a < 2]
    if singles:
        if strict:
            raise SingletonTrack(f"entities with a single record: {singles[:10]}")
        log.warning("excluding %d single-record entities", len(singles))
    return {eid: bisect.bisect_right(bounds, v) for eid, v in speeds.items()}


def population_speeds(traj, assignment):
    """Average mean speed of the entities in each population, ordered by id."""
    speeds = entity_speeds(traj)
    groups = {}
    for eid, pid in assignment.items():
        groups.setdefault(pid, []).append(speeds[eid])
    return [PopulationSpec(pid, float(np.mean(groups[pid]))) for pid in sorted(groups)]


# -- occupancy -----------------------------------------------------------------


def _flatten_regions(regions):
    vx = np.concatenate([r.vertices[:, 0] for r in regions]).astype(np.float64)
    vy = np.concatenate([r.vertices[:, 1] for r in regions]).astype(np.float64)
    offsets = np.concatenate([[0], np.cumsum([len(r.vertices) for r in regions])])
    return np.ascontiguousarray(vx), np.ascontiguousarray(vy), offsets.astype(np.int64)


def locate(px, py, regions, tol=1e-9):
    """Index of the region containing each point (lowest index on borders), else -1."""
    vx, vy, off = _flatten_regions(regions)
    px = np.ascontiguousarray(px, dtype=np.float64)
    py = np.ascontiguousarray(py, dtype=np.float64)
    return kernels.locate_points(px, py, vx, vy, off, float(tol))


def step_positions(traj, t_window, t_start, t_end):
    """Interpolated entity positions at every snapshot end instant.

    Returns ``(steps, step_index, entity_id, x, y)``; an entity only appears
    for instants within its first and last record.
    """
    if not t_window > 0:
        raise ValueError("t_window must be positive")
    if t_end - t_start < t_window:
        raise EmptyWindow(f"horizon {t_end - t_start} is shorter than one window {t_window}")
    steps = int(math.floor((t_end - t_start) / t_window + 1e-9))
    ends = t_start + t_window * np.arange(1, steps + 1)
    traj = Trajectories.coerce(traj)
    idx, ent, xs, ys = [], [], [], []
    for eid, a, b in traj.spans():
        t = traj.t[a:b]
        lo = np.searchsorted(ends, t[0], side="left")
        hi = np.searchsorted(ends, t[-1], side="right")
        if hi <= lo:
            continue
        at = ends[lo:hi]
        idx.append(np.arange(lo, hi))
        ent.append(np.full(hi - lo, eid, dtype=np.int64))
        xs.append(np.interp(at, t, traj.x[a:b]))
        ys.append(np.interp(at, t, traj.y[a:b]))
    if not idx:
        empty = np.empty(0)
        return steps, empty.astype(np.int64), empty.astype(np.int64), empty, empty
    return steps, np.concatenate(idx), np.concatenate(ent), np.concatenate(xs), np.concatenate(ys)


def aggregate_traffic(traj, regions, t_window, t_start, t_end):
    """Count entities per region at the end of every snapshot window.

    Steps are ``[t_start + m*t_window, t_start + (m+1)*t_window)`` and an
    entity is counted where its linearly interpolated position lies at the
    step's end. Points outside every region are not counted.
    """
    steps, idx, _, xs, ys = step_positions(traj, t_window, t_start, t_end)
    n = len(regions)
    counts = np.zeros((steps, n), dtype=np.int64)
    if len(idx):
        where = locate(xs, ys, regions)
        ok = where >= 0
        np.add.at(counts, (idx[ok], where[ok]), 1)
    return TrafficSeries(n, float(t_window), counts)


# -- synthetic generator ---------------------------------------------------------


@dataclass
class SynthConfig:
    """Random-waypoint generator settings.

    ``day_period_s = None`` keeps every entity alive for the whole horizon;
    otherwise each entity is one visit whose arrival time follows a
    sinusoidal daily intensity and whose length is drawn from ``session_s``.
    """

    bbox: tuple
    populations: list  # of {"count": int, "speed": float}
    horizon_s: float
    sample_period_s: float = 1.0
    region_attraction: list = field(default_factory=lambda: [1.0])
    day_period_s: float | None = None
    seasonal_amplitude: float = 0.8
    session_s: tuple = (300.0, 1500.0)
    pause_s: float = 0.0
    seed: int = 0

    KEYS = (
        "bbox", "populations", "horizon_s", "sample_period_s", "region_attraction",
        "day_period_s", "seasonal_amplitude", "session_s", "pause_s", "seed",
    )

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.KEYS)
        if unknown:
            raise InvalidConfig(f"unknown generator key {sorted(unknown)[0]!r}", sorted(unknown)[0])
        for key in ("bbox", "populations", "horizon_s"):
            if key not in doc:
                raise InvalidConfig(f"generator config is missing {key!r}", key)
        cfg = cls(**{k: doc[k] for k in cls.KEYS if k in doc})
        cfg.validate()
        return cfg

    def to_dict(self):
        return {k: getattr(self, k) for k in self.KEYS}

    def validate(self):
        try:
            box = BBox(*[float(v) for v in self.bbox])
        except (TypeError, ValueError) as exc:
            raise InvalidConfig("bbox must be [xmin, ymin, xmax, ymax]", "bbox") from exc
        if not (box.xmax > box.xmin and box.ymax > box.ymin):
            raise InvalidConfig("bbox must have positive extent", "bbox")
        if not self.populations:
            raise InvalidConfig("at least one population is required", "populations")
        for i, p in enumerate(self.populations):
            if not isinstance(p, dict) or "count" not in p or "speed" not in p:
                raise InvalidConfig(f"population {i} needs count and speed", "populations")
            if not float(p["speed"]) > 0:
                raise InvalidConfig(f"population {i} speed must be positive", "populations")
            if int(p["count"]) < 0:
                raise InvalidConfig(f"population {i} count must be >= 0", "populations")
        if not float(self.horizon_s) > 0:
            raise InvalidConfig("horizon_s must be positive", "horizon_s")
        if not float(self.sample_period_s) > 0:
            raise InvalidConfig("sample_period_s must be positive", "sample_period_s")
        w = self.region_attraction
        if not w or any(float(v) < 0 for v in w) or sum(float(v) for v in w) <= 0:
            raise InvalidConfig("region_attraction needs nonnegative weights with positive sum",
                                "region_attraction")
        if self.day_period_s is not None and not float(self.day_period_s) > 0:
            raise InvalidConfig("day_period_s must be positive", "day_period_s")
        if not 0 <= float(self.seasonal_amplitude) <= 1:
            raise InvalidConfig("seasonal_amplitude must lie in [0, 1]", "seasonal_amplitude")
        lo, hi = (float(v) for v in self.session_s)
        if not 0 < lo <= hi:
            raise InvalidConfig("session_s must be [min, max] with 0 < min <= max", "session_s")
        if float(self.pause_s) < 0:
            raise InvalidConfig("pause_s must be >= 0", "pause_s")


class _Cells:
    """Attraction cells: convex polygons sampled uniformly via triangle fans."""

    def __init__(self, polygons, weights):
        self.fans = []
        for poly in polygons:
            v = np.asarray(poly, dtype=np.float64)
            a, b, c = v[0], v[1:-1], v[2:]
            areas = np.abs((b[:, 0] - a[0]) * (c[:, 1] - a[1]) - (c[:, 0] - a[0]) * (b[:, 1] - a[1]))
            self.fans.append((a, b, c, areas / areas.sum()))
        w = np.asarray(weights, dtype=np.float64)
        self.p = w / w.sum()

    def sample(self, rng, size):
        cell = rng.choice(len(self.fans), size=size, p=self.p)
        out = np.empty((size, 2))
        for i, k in enumerate(cell):
            a, b, c, pa = self.fans[k]
            tri = rng.choice(len(pa), p=pa)
            r1, r2 = rng.random(2)
            if r1 + r2 > 1.0:
                r1, r2 = 1.0 - r1, 1.0 - r2
            out[i] = a + r1 * (b[tri] - a) + r2 * (c[tri] - a)
        return out


def _grid_cells(box, n):
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    w = (box.xmax - box.xmin) / cols
    h = (box.ymax - box.ymin) / rows
    cells = []
    for k in range(n):
        r, c = divmod(k, cols)
        x0, y0 = box.xmin + c * w, box.ymin + r * h
        cells.append([(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)])
    return cells


def _arrival_time(rng, horizon, period, amplitude):
    # thinning against the peak of 1 + a*sin(2*pi*t/P)
    while True:
        t = rng.uniform(0.0, horizon)
        if rng.random() * (1.0 + amplitude) <= 1.0 + amplitude * math.sin(2.0 * math.pi * t / period):
            return t


def synth_generate(config, seed=None, regions=None):
    """Seeded random-waypoint trajectories.

    Destinations are drawn region-by-attraction-weight and then uniformly
    inside the chosen cell; cells are ``regions`` when given, otherwise a
    near-square grid over the bounding box with one cell per weight.
    Returns :class:`Trajectories` whose ``labels`` record each entity's
    population index.
    """
    cfg = config if isinstance(config, SynthConfig) else SynthConfig.from_dict(config)
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    box = BBox(*[float(v) for v in cfg.bbox])
    weights = [float(v) for v in cfg.region_attraction]
    if regions is not None:
        if len(regions) != len(weights):
            raise InvalidConfig("region_attraction needs one weight per region", "region_attraction")
        cells = _Cells([r.vertices for r in regions], weights)
    else:
        cells = _Cells(_grid_cells(box, len(weights)), weights)

    horizon = float(cfg.horizon_s)
    period = float(cfg.sample_period_s)
    pause = float(cfg.pause_s)
    s_lo, s_hi = (float(v) for v in cfg.session_s)

    cols_e, cols_t, cols_x, cols_y = [], [], [], []
    labels = {}
    eid = 0
    for pid, pop in enumerate(cfg.populations):
        speed = float(pop["speed"])
        for _ in range(int(pop["count"])):
            if cfg.day_period_s is None:
                t0, t1 = 0.0, horizon
            else:
                t0 = _arrival_time(rng, horizon, float(cfg.day_period_s), float(cfg.seasonal_amplitude))
                t1 = min(horizon, t0 + rng.uniform(s_lo, s_hi))
            # knots of the piecewise-linear path
            kt, kx, ky = [t0], [], []
            start = cells.sample(rng, 1)[0]
            kx.append(start[0])
            ky.append(start[1])
            while kt[-1] < t1:
                dest = cells.sample(rng, 1)[0]
                leg = math.hypot(dest[0] - kx[-1], dest[1] - ky[-1])
                kt.append(kt[-1] + leg / speed)
                kx.append(dest[0])
                ky.append(dest[1])
                if pause > 0:
                    kt.append(kt[-1] + pause)
                    kx.append(dest[0])
                    ky.append(dest[1])
            first = math.ceil(t0 / period - 1e-12)
            last = math.floor(t1 / period + 1e-12)
            ts = period * np.arange(first, last + 1)
            ts = ts[(ts >= t0) & (ts <= t1)]
            labels[eid] = pid
            if len(ts):
                cols_e.append(np.full(len(ts), eid, dtype=np.int64))
                cols_t.append(ts)
                cols_x.append(np.interp(ts, kt, kx))
                cols_y.append(np.interp(ts, kt, ky))
            eid += 1
    if not cols_t:
        return Trajectories([], [], [], [], labels)
    return Trajectories(
        np.concatenate(cols_e), np.concatenate(cols_t), np.concatenate(cols_x),
        np.concatenate(cols_y), labels,
    )
