"""Training, evaluation metrics and the per-K model pipeline."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from west import autodiff as ad
from west.errors import Diverged, ShapeMismatch
from west.geometry import normalize_adjacency_weights, shared_borders_adjacency
from west.graphcore import chrono_split, renormalize, window_dataset
from west.mobility import Trajectories, adjustable_hops, aggregate_traffic
from west.model import WestConfig, forward, init_params, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 0  # 0 means full batch
    optimizer: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int = 50
    val_fraction: float = 0.1
    shuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 0 or self.early_stop_patience < 1:
            raise ValueError("epochs and patience must be positive, batch_size nonnegative")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


class SGD:
    def __init__(self, params, lr):
        self.params, self.lr = params, lr

    def step(self):
        for p in self.params:
            p.value -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = params, lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, tcfg):
    if tcfg.optimizer == "sgd":
        return SGD(params, tcfg.learning_rate)
    return Adam(params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.eps)


@dataclass
class History:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss or nan)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def train_loss(self):
        return [e[1] for e in self.epochs]

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tl, vl in self.epochs:
                w.writerow([epoch, repr(float(tl)), "" if math.isnan(vl) else repr(float(vl))])


def _loss(x, y, a_norm, params, config):
    pred = forward(x, a_norm, params, config)
    return ad.mse_loss(pred, y.reshape(-1, config.u_out))


def evaluate_loss(dataset, a_norm, params, config, index=None):
    x, y = dataset.arrays(index)
    return _loss(x, y, a_norm, params, config).item()


def train(config, dataset, a_norm, tcfg, params=None):
    """Fit a model by minimising MSE on the scaled training targets.

    The last ``val_fraction`` of the windows (chronologically) are held out
    for early stopping; training stops after ``early_stop_patience`` epochs
    without a validation improvement and the best parameters are restored.

    Returns ``(params, history)``.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    params = init_params(config) if params is None else params
    plist = params.as_list()
    opt = make_optimizer(plist, tcfg)

    n = len(dataset)
    n_val = int(math.floor(tcfg.val_fraction * n))
    if n - n_val < 1:
        n_val = 0
    fit_idx = np.arange(n - n_val)
    val_idx = np.arange(n - n_val, n)
    bs = len(fit_idx) if tcfg.batch_size == 0 else min(tcfg.batch_size, len(fit_idx))
    rng = np.random.default_rng(tcfg.seed)

    hist = History()
    best = (math.inf, None, 0)
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(fit_idx) if tcfg.shuffle else fit_idx
        total = 0.0
        for s in range(0, len(order), bs):
            batch = order[s:s + bs]
            x, y = dataset.arrays(batch)
            for p in plist:
                p.zero_grad()
            # overflow surfaces as a non-finite loss, reported as Diverged below
            with ad.Tape(), np.errstate(over="ignore", invalid="ignore"):
                loss = _loss(x, y, a_norm, params, config)
            value = loss.item()
            if not math.isfinite(value):
                raise Diverged(epoch, value)
            ad.backward(loss, plist)
            opt.step()
            total += value * len(batch)
        train_loss = total / len(order)
        with np.errstate(over="ignore", invalid="ignore"):
            val_loss = evaluate_loss(dataset, a_norm, params, config, val_idx) if n_val else math.nan
        if n_val and not math.isfinite(val_loss):
            raise Diverged(epoch, val_loss)
        hist.epochs.append((epoch, train_loss, val_loss))
        if n_val:
            if val_loss < best[0]:
                best = (val_loss, params.copy(), epoch)
            elif epoch - best[2] >= tcfg.early_stop_patience:
                hist.stopped_early = True
                break
    if n_val and best[1] is not None:
        params.load_values(best[1])
        hist.best_epoch = best[2]
    else:
        hist.best_epoch = len(hist.epochs)
    return params, hist


# -- metrics --------------------------------------------------------------------


@dataclass
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    per_region: dict  # metric -> n-vector
    per_step: dict  # metric -> U-vector
    k: object = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        doc = {
            "mae": self.mae, "mse": self.mse, "rmse": self.rmse,
            "per_region": [
                {m: float(self.per_region[m][i]) for m in ("mae", "mse", "rmse")}
                for i in range(len(self.per_region["mae"]))
            ],
            "per_step": [
                {m: float(self.per_step[m][i]) for m in ("mae", "mse", "rmse")}
                for i in range(len(self.per_step["mae"]))
            ],
            "k": self.k,
        }
        doc.update(self.extra)
        return doc

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _marginals(err, axes):
    mae = np.abs(err).mean(axis=axes)
    mse = (err * err).mean(axis=axes)
    return {"mae": mae, "mse": mse, "rmse": np.sqrt(mse)}


def compute_metrics(pred, truth, k=None):
    """MAE, MSE and RMSE over every (sample, region, step) value.

    Arrays are ``(S, n, U)``; lower-rank inputs are read as ``(S,)`` or
    ``(S, n)`` with the missing axes of size one.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"predictions {pred.shape} vs targets {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[:, None, None], truth[:, None, None]
    elif pred.ndim == 2:
        pred, truth = pred[:, :, None], truth[:, :, None]
    elif pred.ndim != 3:
        raise ShapeMismatch(f"expected at most 3 axes, got {pred.shape}")
    err = pred - truth
    mse = float((err * err).mean())
    return MetricsReport(
        mae=float(np.abs(err).mean()),
        mse=mse,
        rmse=math.sqrt(mse),
        per_region=_marginals(err, (0, 2)),
        per_step=_marginals(err, (0, 1)),
        k=k,
    )


# -- pipelines ----------------------------------------------------------------


@dataclass
class ModelRun:
    """One trained model with its data splits and raw-unit test predictions."""

    config: WestConfig
    a_norm: object
    params: object
    history: History
    train_set: object
    test_set: object
    pred: np.ndarray
    truth: np.ndarray
    report: MetricsReport


def fit_series(series, adjacency, k_layers, u_in, u_out, tcfg, model_kw=None,
               train_fraction=0.8, access_log=None):
    """Window, split, train and evaluate one model on one traffic series.

    ``adjacency`` is the normalised (not yet renormalised) weight matrix.
    """
    model_kw = dict(model_kw or {})
    ds = window_dataset(series, u_in, u_out, scale=True, train_fraction=train_fraction)
    train_set, test_set = chrono_split(ds, train_fraction)
    if access_log is not None:
        train_set.with_log(access_log)
        test_set.with_log(access_log)
    config = WestConfig(n_regions=series.n_regions, u_in=u_in, u_out=u_out,
                        k_layers=int(k_layers), **model_kw)
    a_norm = renormalize(adjacency)
    params, hist = train(config, train_set, a_norm, tcfg)
    x, y = test_set.arrays()
    pred = test_set.scaler.inverse(predict(x, a_norm, params, config))
    truth = test_set.scaler.inverse(y)
    report = compute_metrics(pred, truth, k=int(k_layers))
    return ModelRun(config, a_norm, params, hist, train_set, test_set, pred, truth, report)


@dataclass
class PipelineResult:
    t_window: float
    k_values: list  # K per population
    groups: dict  # K -> ModelRun
    pred: np.ndarray
    truth: np.ndarray
    report: MetricsReport
    total_series: object
    test_starts: np.ndarray


def group_by_k(assignment, k_values):
    """Entities per distinct K, given entity -> population and population -> K."""
    groups = {}
    for eid, pid in sorted(assignment.items()):
        groups.setdefault(int(k_values[pid]), []).append(eid)
    return dict(sorted(groups.items()))


def per_k_pipeline(trajectories, regions, assignment, speeds, u_in, u_out, tcfg,
                   adjacency=None, hops_window="alg3", train_fraction=0.8,
                   t_start=0.0, t_end=None, model_kw=None, workers=1, access_log=None):
    """One dedicated model per distinct K, summed into a total-traffic forecast.

    ``assignment`` maps entity ids to population indices and ``speeds`` gives
    each population's average speed. Each K group gets its own traffic
    series (its entities only) and a model with K stacked layers; the
    total forecast is the sum of group forecasts.
    """
    traj = Trajectories.coerce(trajectories)
    centers = [r.center for r in regions]
    t_window, ks = adjustable_hops(speeds, centers, u_out, window=hops_window)
    if adjacency is None:
        adjacency = normalize_adjacency_weights(shared_borders_adjacency(regions))
    if t_end is None:
        t_end = float(traj.t.max())
    groups = group_by_k(assignment, ks)

    def run(item):
        k, members = item
        series = aggregate_traffic(traj.subset(members), regions, t_window, t_start, t_end)
        return k, fit_series(series, adjacency, k, u_in, u_out, tcfg, model_kw,
                             train_fraction, access_log)

    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = dict(pool.map(run, groups.items()))
    else:
        runs = dict(map(run, groups.items()))

    classified = [e for members in groups.values() for e in members]
    total = aggregate_traffic(traj.subset(classified), regions, t_window, t_start, t_end)
    first = next(iter(runs.values()))
    starts = first.test_set.starts
    truth = np.stack([
        total.counts[s + u_in:s + u_in + u_out].T.astype(np.float64) for s in starts
    ])
    pred = sum(r.pred for r in runs.values())
    report = compute_metrics(pred, truth, k=sorted(runs))
    report.extra["groups"] = {str(k): r.report.to_dict() for k, r in runs.items()}
    return PipelineResult(t_window, ks, runs, pred, truth, report, total, starts)


def assert_report_sane(report):
    """Check the identities every report must satisfy; raise AssertionError if not."""
    assert report.mae >= 0 and report.mse >= 0 and report.rmse >= 0
    assert abs(report.rmse - math.sqrt(report.mse)) <= 1e-12 * max(1.0, report.rmse)
    assert report.mae <= report.rmse + 1e-12 * max(1.0, report.rmse)

