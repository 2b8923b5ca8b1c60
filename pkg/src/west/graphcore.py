"""Dataset machinery for snapshot sequences over a static region graph.

Sliding windows turn a traffic series into ``(x, y)`` samples, a
chronological split keeps training targets strictly before test features,
and the propagation operator of each graph-convolution layer is built here
along with the three baseline adjacency matrices used for comparison.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from west.errors import DuplicateCenters, EmptySplit, MissingArtifact, TooShort
from west.geometry import normalize_adjacency_weights, shared_borders_adjacency
from west.mobility import TrafficSeries


@dataclass(frozen=True)
class RenormalizedAdjacency:
    n: int
    matrix: np.ndarray


def renormalize(a):
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if (a < 0).any():
        raise ValueError("adjacency must be nonnegative")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise ValueError("adjacency must be symmetric")
    a = (a + a.T) / 2.0
    a_hat = a + np.eye(len(a))
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    m = d[:, None] * a_hat * d[None, :]
    # exact symmetry; the two products above differ only in rounding order
    m = (m + m.T) / 2.0
    return RenormalizedAdjacency(len(a), m)


@dataclass(frozen=True)
class MinMaxScaler:
    lo: float
    hi: float

    @property
    def span(self):
        return self.hi - self.lo if self.hi > self.lo else 1.0

    def transform(self, v):
        return (np.asarray(v, dtype=np.float64) - self.lo) / self.span

    def inverse(self, v):
        return np.asarray(v, dtype=np.float64) * self.span + self.lo

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi}


IDENTITY_SCALER = MinMaxScaler(0.0, 1.0)


@dataclass(frozen=True)
class SampleWindow:
    x: np.ndarray  # n x u_in, oldest column first
    y: np.ndarray  # n x u_out
    start: int  # time index of x[:, 0]


class AccessLog:
    """Records which dataset windows were read, and under which label."""

    def __init__(self):
        self.events = []

    def record(self, label, starts):
        self.events.append((label, tuple(int(s) for s in starts)))

    def reads(self, label):
        return [e for e in self.events if e[0] == label]


@dataclass
class DTDGDataset:
    """Chronological windows stacked into arrays ``x (W, n, u_in)``, ``y (W, n, u_out)``.

    ``x`` and ``y`` are stored scaled. Reading windows through
    :meth:`arrays` is what the access log sees.
    """

    x: np.ndarray
    y: np.ndarray
    starts: np.ndarray
    u_in: int
    u_out: int
    scaler: MinMaxScaler = IDENTITY_SCALER
    t_window: float = 1.0
    label: str = "all"
    log: AccessLog | None = field(default=None, repr=False, compare=False)

    @property
    def n_regions(self):
        return self.x.shape[1]

    def __len__(self):
        return len(self.starts)

    @property
    def windows(self):
        return [SampleWindow(self.x[i], self.y[i], int(self.starts[i])) for i in range(len(self))]

    def arrays(self, index=None):
        """Scaled ``(x, y)`` for all windows or the selected indices."""
        idx = np.arange(len(self)) if index is None else np.asarray(index)
        if self.log is not None:
            self.log.record(self.label, self.starts[idx])
        return self.x[idx], self.y[idx]

    def subset(self, index, label=None):
        idx = np.asarray(index, dtype=np.int64)
        return DTDGDataset(
            self.x[idx], self.y[idx], self.starts[idx], self.u_in, self.u_out,
            self.scaler, self.t_window, label or self.label, self.log,
        )

    def with_log(self, log):
        self.log = log
        return self

    def target_indices(self):
        """Time indices covered by targets of every window."""
        return self.starts[:, None] + self.u_in + np.arange(self.u_out)[None, :]

    def feature_indices(self):
        return self.starts[:, None] + np.arange(self.u_in)[None, :]

    def fingerprint(self):
        """Hash identifying the exact windows (positions and raw targets)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.starts, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.scaler.inverse(self.y), dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    # -- persistence ---------------------------------------------------------

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        meta = {
            "n_regions": self.n_regions, "u_in": self.u_in, "u_out": self.u_out,
            "windows": len(self), "scaler": self.scaler.to_dict(),
            "t_window": self.t_window, "starts": [int(s) for s in self.starts],
        }
        with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
        flat = np.hstack([self.x.reshape(len(self), -1), self.y.reshape(len(self), -1)])
        np.savetxt(os.path.join(directory, "windows.csv"), flat, fmt="%.17g", delimiter=",")

    @classmethod
    def load(cls, directory):
        try:
            with open(os.path.join(directory, "meta.json"), encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError as exc:
            raise MissingArtifact(f"dataset metadata not found in {directory}") from exc
        n, ui, uo, w = meta["n_regions"], meta["u_in"], meta["u_out"], meta["windows"]
        flat = np.loadtxt(os.path.join(directory, "windows.csv"), delimiter=",", ndmin=2)
        flat = flat.reshape(w, -1)
        x = flat[:, : n * ui].reshape(w, n, ui)
        y = flat[:, n * ui:].reshape(w, n, uo)
        return cls(x, y, np.array(meta["starts"], dtype=np.int64), ui, uo,
                   MinMaxScaler(**meta["scaler"]), meta["t_window"])


def _train_cut(n_windows, train_fraction):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    return int(np.floor(train_fraction * n_windows))


def window_dataset(series, u_in, u_out, scale=True, train_fraction=0.8):
    """Stride-1 sliding windows over ``series``.

    With ``scale``, counts are min-max scaled by the global min and max of
    the time steps before the first test window (the portion
    :func:`chrono_split` with the same ``train_fraction`` leaves to training).
    """
    counts = np.asarray(series.counts, dtype=np.float64)
    T, n = counts.shape
    if u_in < 1 or u_out < 1:
        raise ValueError("u_in and u_out must be >= 1")
    if T < u_in + u_out:
        raise TooShort(f"series of {T} steps is too short for {u_in}+{u_out} windows")
    W = T - u_in - u_out + 1
    starts = np.arange(W, dtype=np.int64)
    if scale:
        cut = max(1, _train_cut(W, train_fraction))
        part = counts[:cut]
        scaler = MinMaxScaler(float(part.min()), float(part.max()))
    else:
        scaler = IDENTITY_SCALER
    z = scaler.transform(counts)
    x = np.stack([z[s:s + u_in].T for s in starts])
    y = np.stack([z[s + u_in:s + u_in + u_out].T for s in starts])
    return DTDGDataset(x, y, starts, u_in, u_out, scaler, float(series.t_window))


def chrono_split(ds, train_fraction=0.8):
    """First ``floor(f * W)`` windows for training, the rest for testing.

    Training windows whose targets reach into the first test window's
    features are dropped, so the test set covers the tail exactly.
    """
    W = len(ds)
    cut = _train_cut(W, train_fraction)
    if cut < 1 or cut >= W:
        raise EmptySplit(f"{W} windows at fraction {train_fraction} leave an empty side")
    test_start = ds.starts[cut]
    last_target = ds.starts[:cut] + ds.u_in + ds.u_out - 1
    keep = np.flatnonzero(last_target < test_start)
    if len(keep) == 0:
        raise EmptySplit("every training window straddles the test boundary")
    return ds.subset(keep, "train"), ds.subset(np.arange(cut, W), "test")


# -- baseline adjacencies --------------------------------------------------------


def baseline_adjacency_binary(regions, tol=None):
    """1 between regions sharing a border of positive length, 1 on the diagonal."""
    a = shared_borders_adjacency(regions, tol)
    b = (a > 0).astype(np.float64)
    np.fill_diagonal(b, 1.0)
    return b


def baseline_adjacency_centers(centers):
    """Inverse center distances, max-normalised, with unit diagonal."""
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    d = np.hypot(c[:, None, 0] - c[None, :, 0], c[:, None, 1] - c[None, :, 1])
    off = ~np.eye(len(c), dtype=bool)
    if (d[off] <= 1e-12).any():
        i, j = np.argwhere((d <= 1e-12) & off)[0]
        raise DuplicateCenters(f"centers {i} and {j} coincide")
    inv = np.zeros_like(d)
    inv[off] = 1.0 / d[off]
    a = normalize_adjacency_weights(inv)
    np.fill_diagonal(a, 1.0)
    return a


def baseline_adjacency_traffic(train_series):
    """Pearson correlation of training counts per region pair, negatives clipped."""
    counts = np.asarray(
        train_series.counts if isinstance(train_series, TrafficSeries) else train_series,
        dtype=np.float64,
    )
    z = counts - counts.mean(axis=0)
    norm = np.sqrt((z * z).sum(axis=0))
    n = counts.shape[1]
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if norm[i] > 0 and norm[j] > 0:
                r = float(z[:, i] @ z[:, j] / (norm[i] * norm[j]))
                a[i, j] = a[j, i] = min(1.0, max(0.0, r))
    np.fill_diagonal(a, 1.0)
    return a
