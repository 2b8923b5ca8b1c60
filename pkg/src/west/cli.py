"""Command-line pipeline: simulate -> regions -> adjacency -> hops -> train -> evaluate -> predict.

Every command reads one JSON run configuration (``--config``), accepts
dotted overrides (``--set train.epochs=50``) and a global ``--seed``.

Exit codes: 0 success, 2 configuration or shape error, 3 missing input
artifact, 4 numeric failure (divergence).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from importlib import resources

import numpy as np

from west import __version__
from west.errors import ConfigError, MissingArtifact, NumericFailure, ShapeMismatch, WestError
from west.geometry import (
    BBox,
    kmeans_centers,
    load_matrix_csv,
    load_regions,
    normalize_adjacency_weights,
    save_matrix_csv,
    save_regions,
    shared_borders_adjacency,
    voronoi_partition,
)
from west.graphcore import (
    baseline_adjacency_binary,
    baseline_adjacency_centers,
    baseline_adjacency_traffic,
    chrono_split,
    renormalize,
    window_dataset,
)
from west.mobility import (
    SynthConfig,
    TrafficSeries,
    Trajectories,
    adjustable_hops,
    aggregate_traffic,
    average_center_distance,
    classify_populations,
    population_speeds,
    synth_generate,
)
from west.model import Checkpoint, WestConfig, load_checkpoint, predict, save_checkpoint
from west.training import (
    TrainConfig,
    compute_metrics,
    fit_series,
    group_by_k,
    train,
)

ADJACENCY_MODES = ("shared_borders", "binary", "centers", "traffic")

DEFAULTS = {
    "paths": {
        "trajectories": "trajectories.csv",
        "regions": "regions.json",
        "adjacency": "adjacency.csv",
        "hops": "hops.json",
        "checkpoint": "checkpoints",
        "reports": "reports",
    },
    "generator": {
        "bbox": [0.0, 0.0, 100.0, 100.0],
        "populations": [{"count": 200, "speed": 1.0}, {"count": 200, "speed": 3.0}],
        "horizon_s": 4000.0,
        "sample_period_s": 5.0,
        "region_attraction": [3.0, 1.0, 1.0, 2.0, 1.0, 4.0],
        "day_period_s": 1000.0,
        "seasonal_amplitude": 0.9,
        "session_s": [300.0, 1200.0],
        "pause_s": 0.0,
    },
    "n_regions": 6,
    "u_in": 6,
    "u_out": 6,
    "train_fraction": 0.8,
    "adjacency_mode": "shared_borders",
    "hops_window": "alg3",
    "distance_mode": "ordered",
    "encoder_mode": "step",
    "head": "node",
    "pipeline": "per_k",
    "single_k": 1,
    "speed_boundaries": [2.0],
    "speeds": None,
    "bbox": None,
    "kmeans": {"max_iter": 100, "max_points": 20000},
    "model": {"gcn_hidden": 32, "lstm_hidden": 64, "use_bias": True},
    "train": {
        "epochs": 300,
        "learning_rate": 0.001,
        "batch_size": 0,
        "optimizer": "adam",
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "early_stop_patience": 50,
        "val_fraction": 0.1,
    },
    "seeds": {"generator": 0, "kmeans": 0, "model": 0, "train": 0},
}

ENUMS = {
    "adjacency_mode": ADJACENCY_MODES,
    "hops_window": ("alg3", "base"),
    "distance_mode": ("ordered", "unordered"),
    "encoder_mode": ("step", "block"),
    "head": ("node", "global"),
    "pipeline": ("per_k", "single"),
    "train.optimizer": ("adam", "sgd"),
}

# keys whose value may be null or take a free-form shape
NULLABLE = {"speeds", "bbox", "generator.day_period_s"}
FREEFORM = {"generator.populations", "generator.bbox", "generator.region_attraction",
            "generator.session_s", "speed_boundaries", "speeds", "bbox"}


def _check(doc, schema, prefix=""):
    for key in doc:
        path = prefix + key
        if key not in schema:
            raise ConfigError(f"unknown configuration key {path!r}", path)
        val, ref = doc[key], schema[key]
        if val is None:
            if path in NULLABLE or ref is None:
                continue
            raise ConfigError(f"{path!r} must not be null", path)
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path!r} must be an object", path)
            _check(val, ref, path + ".")
            continue
        if path in FREEFORM or ref is None:
            if not isinstance(val, list):
                raise ConfigError(f"{path!r} must be a list", path)
            continue
        if isinstance(ref, bool):
            ok = isinstance(val, bool)
        elif isinstance(ref, int):
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif isinstance(ref, float):
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        else:
            ok = isinstance(val, type(ref))
        if not ok:
            raise ConfigError(f"{path!r} must be of type {type(ref).__name__}, got {val!r}", path)
        if path in ENUMS and val not in ENUMS[path]:
            raise ConfigError(f"{path!r} must be one of {list(ENUMS[path])}, got {val!r}", path)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(doc, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not an object", dotted)
    node[keys[-1]] = value


def load_run_config(path=None, overrides=(), seed=None):
    """Defaults merged with the config file, ``--set`` overrides and ``--seed``."""
    user = {}
    base_dir = os.getcwd()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError as exc:
            raise MissingArtifact(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}", "config") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object", "config")
        base_dir = os.path.dirname(os.path.abspath(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", item)
        key, raw = item.split("=", 1)
        _set_dotted(user, key.strip(), raw)
    _check(user, DEFAULTS)
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seeds"] = {k: int(seed) for k in DEFAULTS["seeds"]}
    for k, v in cfg["paths"].items():
        cfg["paths"][k] = v if os.path.isabs(v) else os.path.join(base_dir, v)
    if cfg["u_in"] < 1 or cfg["u_out"] < 1 or cfg["n_regions"] < 2:
        raise ConfigError("u_in, u_out must be >= 1 and n_regions >= 2", "n_regions")
    if not 0 < cfg["train_fraction"] < 1:
        raise ConfigError("train_fraction must lie in (0, 1)", "train_fraction")
    return cfg


def _require(path, what):
    if not os.path.exists(path):
        raise MissingArtifact(f"{what} not found at {path}; run the upstream command first")
    return path


def _write_json(path, doc):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path, what):
    _require(path, what)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _tcfg(cfg):
    return TrainConfig(seed=cfg["seeds"]["train"], **cfg["train"])


def _model_kw(cfg):
    return dict(cfg["model"], seed=cfg["seeds"]["model"], encoder_mode=cfg["encoder_mode"],
                head=cfg["head"])


# -- stages ----------------------------------------------------------------


def cmd_simulate(cfg, out=None):
    out = out or sys.stdout
    gen = dict(cfg["generator"], seed=cfg["seeds"]["generator"])
    traj = synth_generate(SynthConfig.from_dict(gen))
    path = cfg["paths"]["trajectories"]
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    traj.save_csv(path)
    per_pop = [0] * len(gen["populations"])
    for pid in traj.labels.values():
        per_pop[pid] += 1
    print(f"entities: {len(traj.labels)}", file=out)
    print(f"points: {len(traj)}", file=out)
    for pid, n in enumerate(per_pop):
        print(f"population {pid}: {n} entities", file=out)
    return traj


def cmd_regions(cfg, out=None):
    out = out or sys.stdout
    traj = Trajectories.load_csv(_require(cfg["paths"]["trajectories"], "trajectories"))
    pts = np.column_stack([traj.x, traj.y])
    bbox = BBox(*cfg["bbox"]) if cfg["bbox"] else BBox.around(pts)
    step = max(1, -(-len(pts) // cfg["kmeans"]["max_points"]))
    centers = kmeans_centers(pts[::step], cfg["n_regions"], seed=cfg["seeds"]["kmeans"],
                             max_iter=cfg["kmeans"]["max_iter"])
    regions = voronoi_partition(centers, bbox)
    save_regions(cfg["paths"]["regions"], regions, bbox)
    print(f"regions: {len(regions)} in bbox {list(bbox)}", file=out)
    return regions


def _hops(cfg, traj, regions):
    assignment = classify_populations(traj, cfg["speed_boundaries"])
    measured = population_speeds(traj, assignment)
    if cfg["speeds"] is not None:
        speeds = [float(s) for s in cfg["speeds"]]
    else:
        # populations absent from the data have no speed; keep ids dense
        speeds = [0.0] * (max(assignment.values()) + 1 if assignment else 0)
        for p in measured:
            speeds[p.population_id] = p.speed
        if any(s <= 0 for s in speeds):
            raise ConfigError("a speed bucket has no entities; set 'speeds' explicitly", "speeds")
    centers = [r.center for r in regions]
    t_window, ks = adjustable_hops(speeds, centers, cfg["u_out"], window=cfg["hops_window"],
                                   distance_mode=cfg["distance_mode"])
    d = average_center_distance(centers, cfg["distance_mode"])
    return {
        "D": d,
        "t_window": t_window,
        "k": ks,
        "speeds": speeds,
        "window": cfg["hops_window"],
        "assignment": {str(e): p for e, p in sorted(assignment.items())},
    }


def cmd_hops(cfg, out=None):
    out = out or sys.stdout
    regions, _ = load_regions(_require(cfg["paths"]["regions"], "regions"))
    if cfg["speeds"] is not None and not os.path.exists(cfg["paths"]["trajectories"]):
        traj = Trajectories([], [], [], [])
    else:
        traj = Trajectories.load_csv(_require(cfg["paths"]["trajectories"], "trajectories"))
    doc = _hops(cfg, traj, regions)
    _write_json(cfg["paths"]["hops"], doc)
    print(f"D={doc['D']!r}", file=out)
    print(f"t_window={doc['t_window']!r}", file=out)
    print(f"K={doc['k']}", file=out)
    for pid, (s, k) in enumerate(zip(doc["speeds"], doc["k"])):
        print(f"population {pid}: speed={s!r} K={k}", file=out)
    return doc


def _load_context(cfg):
    traj = Trajectories.load_csv(_require(cfg["paths"]["trajectories"], "trajectories"))
    regions, bbox = load_regions(_require(cfg["paths"]["regions"], "regions"))
    hops = _read_json(cfg["paths"]["hops"], "hops")
    assignment = {int(e): int(p) for e, p in hops["assignment"].items()}
    return traj, regions, hops, assignment


def _span(traj):
    return 0.0, float(traj.t.max()) if len(traj) else 0.0


def _total_series(cfg, traj, regions, hops, assignment):
    t0, t1 = _span(traj)
    return aggregate_traffic(traj.subset(sorted(assignment)), regions, hops["t_window"], t0, t1)


def _train_portion(series, cfg):
    W = series.steps - cfg["u_in"] - cfg["u_out"] + 1
    cut = max(1, int(np.floor(cfg["train_fraction"] * W)))
    return TrafficSeries(series.n_regions, series.t_window, series.counts[:cut])


def build_adjacency(mode, regions, train_series=None):
    if mode == "shared_borders":
        return normalize_adjacency_weights(shared_borders_adjacency(regions))
    if mode == "binary":
        return baseline_adjacency_binary(regions)
    if mode == "centers":
        return baseline_adjacency_centers([r.center for r in regions])
    if mode == "traffic":
        if train_series is None:
            raise ConfigError("traffic adjacency needs the training series", "adjacency_mode")
        return baseline_adjacency_traffic(train_series)
    raise ConfigError(f"unknown adjacency mode {mode!r}", "adjacency_mode")


def cmd_adjacency(cfg, out=None):
    out = out or sys.stdout
    regions, _ = load_regions(_require(cfg["paths"]["regions"], "regions"))
    train_series = None
    if cfg["adjacency_mode"] == "traffic":
        traj, regions, hops, assignment = _load_context(cfg)
        train_series = _train_portion(_total_series(cfg, traj, regions, hops, assignment), cfg)
    a = build_adjacency(cfg["adjacency_mode"], regions, train_series)
    save_matrix_csv(cfg["paths"]["adjacency"], a)
    print(f"adjacency ({cfg['adjacency_mode']}): {a.shape[0]}x{a.shape[1]}", file=out)
    return a


def _group_series(cfg, traj, regions, hops, assignment):
    """``[(K, members, series)]`` for the configured pipeline."""
    t0, t1 = _span(traj)
    if cfg["pipeline"] == "single":
        members = sorted(assignment)
        series = aggregate_traffic(traj.subset(members), regions, hops["t_window"], t0, t1)
        return [(int(cfg["single_k"]), members, series)]
    out = []
    for k, members in group_by_k(assignment, hops["k"]).items():
        series = aggregate_traffic(traj.subset(members), regions, hops["t_window"], t0, t1)
        out.append((k, members, series))
    return out


def _ckpt_path(cfg, k):
    return os.path.join(cfg["paths"]["checkpoint"], f"model_k{k}.json")


def cmd_train(cfg, out=None):
    out = out or sys.stdout
    traj, regions, hops, assignment = _load_context(cfg)
    adjacency = load_matrix_csv(_require(cfg["paths"]["adjacency"], "adjacency"))
    if adjacency.shape != (len(regions), len(regions)):
        raise ShapeMismatch(f"adjacency {adjacency.shape} does not match {len(regions)} regions")
    os.makedirs(cfg["paths"]["checkpoint"], exist_ok=True)
    a_norm = renormalize(adjacency)
    manifest = {"pipeline": cfg["pipeline"], "adjacency_mode": cfg["adjacency_mode"], "models": []}
    for k, members, series in _group_series(cfg, traj, regions, hops, assignment):
        ds = window_dataset(series, cfg["u_in"], cfg["u_out"], True, cfg["train_fraction"])
        train_set, _ = chrono_split(ds, cfg["train_fraction"])
        config = WestConfig(n_regions=len(regions), u_in=cfg["u_in"], u_out=cfg["u_out"],
                            k_layers=k, **_model_kw(cfg))
        params, hist = train(config, train_set, a_norm, _tcfg(cfg))
        save_checkpoint(_ckpt_path(cfg, k), Checkpoint(config, a_norm, params, ds.scaler))
        hist.save_csv(os.path.join(cfg["paths"]["checkpoint"], f"history_k{k}.csv"))
        manifest["models"].append({"k": k, "entities": len(members),
                                   "checkpoint": os.path.basename(_ckpt_path(cfg, k)),
                                   "epochs": len(hist.epochs), "best_epoch": hist.best_epoch})
        print(f"K={k}: {len(members)} entities, {len(hist.epochs)} epochs, "
              f"final train loss {hist.train_loss[-1]:.6g}", file=out)
    _write_json(os.path.join(cfg["paths"]["checkpoint"], "manifest.json"), manifest)
    return manifest


def _load_models(cfg):
    manifest = _read_json(os.path.join(cfg["paths"]["checkpoint"], "manifest.json"), "model manifest")
    models = {}
    for entry in manifest["models"]:
        path = _require(os.path.join(cfg["paths"]["checkpoint"], entry["checkpoint"]), "checkpoint")
        models[int(entry["k"])] = load_checkpoint(path)
    return manifest, models


def _configured_forecast(cfg, traj, regions, hops, assignment, models):
    """Sum of group test forecasts in raw counts, plus the test window starts."""
    pred, starts = None, None
    for k, _, series in _group_series(cfg, traj, regions, hops, assignment):
        ck = models[k]
        ds = window_dataset(series, cfg["u_in"], cfg["u_out"], True, cfg["train_fraction"])
        _, test_set = chrono_split(ds, cfg["train_fraction"])
        x, _ = test_set.arrays()
        p = ck.scaler.inverse(predict(x, ck.adjacency, ck.params, ck.config))
        pred = p if pred is None else pred + p
        starts = test_set.starts
    return pred, starts


def cmd_evaluate(cfg, out=None):
    out = out or sys.stdout
    traj, regions, hops, assignment = _load_context(cfg)
    _, models = _load_models(cfg)
    total = _total_series(cfg, traj, regions, hops, assignment)
    ds = window_dataset(total, cfg["u_in"], cfg["u_out"], True, cfg["train_fraction"])
    _, test_total = chrono_split(ds, cfg["train_fraction"])
    window_hash = test_total.fingerprint()
    truth = test_total.scaler.inverse(test_total.y)

    blocks = {}
    pred, starts = _configured_forecast(cfg, traj, regions, hops, assignment, models)
    if not np.array_equal(starts, test_total.starts):
        raise ShapeMismatch("group test windows do not align with the total-traffic windows")
    rep = compute_metrics(pred, truth, k=sorted(models))
    blocks["west"] = dict(rep.to_dict(), adjacency_mode=cfg["adjacency_mode"],
                          pipeline=cfg["pipeline"], window_hash=window_hash)

    train_portion = _train_portion(total, cfg)
    for mode in ("binary", "centers", "traffic"):
        adj = build_adjacency(mode, regions, train_portion)
        run = fit_series(total, adj, cfg["single_k"], cfg["u_in"], cfg["u_out"], _tcfg(cfg),
                         _model_kw(cfg), cfg["train_fraction"])
        blocks[mode] = dict(run.report.to_dict(), adjacency_mode=mode, pipeline="single",
                            window_hash=run.test_set.fingerprint())
    doc = {"window_hash": window_hash, "test_windows": int(len(test_total)), "blocks": blocks}
    _write_json(os.path.join(cfg["paths"]["reports"], "evaluation.json"), doc)
    for name, b in blocks.items():
        print(f"{name:>8}: MAE={b['mae']:.4f} MSE={b['mse']:.4f} RMSE={b['rmse']:.4f} "
              f"windows={b['window_hash']}", file=out)
    return doc


def cmd_predict(cfg, out=None):
    out = out or sys.stdout
    traj, regions, hops, assignment = _load_context(cfg)
    _, models = _load_models(cfg)
    total = None
    steps = None
    for k, _, series in _group_series(cfg, traj, regions, hops, assignment):
        ck = models[k]
        latest = ck.scaler.transform(series.counts[-cfg["u_in"]:].T.astype(np.float64))
        p = ck.scaler.inverse(predict(latest, ck.adjacency, ck.params, ck.config))
        total = p if total is None else total + p
        steps = series.steps
    path = os.path.join(cfg["paths"]["reports"], "predictions.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step," + ",".join(f"region_{i}" for i in range(total.shape[0])) + "\n")
        for j in range(total.shape[1]):
            fh.write(f"{steps + j}," + ",".join("%.17g" % v for v in total[:, j]) + "\n")
    print(f"forecast for steps {steps}..{steps + total.shape[1] - 1} written to {path}", file=out)
    return total


def cmd_run(cfg, out=None):
    out = out or sys.stdout
    for stage in (cmd_simulate, cmd_regions, cmd_hops, cmd_adjacency, cmd_train,
                  cmd_evaluate, cmd_predict):
        stage(cfg, out)


def cmd_config_init(args, out=None):
    out = out or sys.stdout
    if args.fixture:
        doc = json.loads(resources.files("west").joinpath(f"fixtures/{args.fixture}.json").read_text())
    else:
        doc = copy.deepcopy(DEFAULTS)
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        out.write(text)


STAGES = {
    "simulate": (cmd_simulate, "generate synthetic trajectories"),
    "regions": (cmd_regions, "k-means centers and Voronoi regions"),
    "adjacency": (cmd_adjacency, "adjacency matrix for the configured mode"),
    "hops": (cmd_hops, "snapshot duration and K per population"),
    "train": (cmd_train, "train one model per K group"),
    "evaluate": (cmd_evaluate, "test metrics against the baseline adjacencies"),
    "predict": (cmd_predict, "forecast from the latest window"),
    "run": (cmd_run, "every stage in order"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="west", description=__doc__.splitlines()[0],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in STAGES.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None, help="run configuration JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key (dotted path, JSON value)")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
    p = sub.add_parser("config", help="configuration helpers",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    csub = p.add_subparsers(dest="action", required=True)
    init = csub.add_parser("init", help="print the default configuration",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    init.add_argument("--out", default=None, help="write to this file instead of stdout")
    init.add_argument("--fixture", default=None, choices=["two_speed"],
                      help="start from a bundled fixture configuration")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        if stage == "config":
            cmd_config_init(args)
            return 0
        cfg = load_run_config(args.config, args.set, args.seed)
        STAGES[stage][0](cfg)
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"west {stage}: missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericFailure as exc:
        print(f"west {stage}: numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, ShapeMismatch) as exc:
        key = getattr(exc, "key", None)
        where = f" [{key}]" if key else ""
        print(f"west {stage}: configuration error{where}: {exc}", file=sys.stderr)
        return 2
    except (WestError, ValueError) as exc:
        print(f"west {stage}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
