import hashlib
import json
import os
import subprocess
import sys

import pytest

from west.cli import DEFAULTS, build_parser, load_run_config, main
from west.geometry import BBox, save_regions, voronoi_partition

ARTIFACTS = [
    "trajectories.csv", "regions.json", "hops.json", "adjacency.csv",
    "checkpoints/manifest.json", "checkpoints/model_k1.json", "checkpoints/model_k3.json",
    "checkpoints/history_k1.csv", "checkpoints/history_k3.csv",
    "reports/evaluation.json", "reports/predictions.csv",
]


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _fixture(tmp, **overrides):
    cfg = tmp / "run.json"
    assert main(["config", "init", "--fixture", "two_speed", "--out", str(cfg)]) == 0
    if overrides:
        doc = json.loads(cfg.read_text())
        doc.update(overrides)
        cfg.write_text(json.dumps(doc))
    return cfg


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = _fixture(tmp)
    assert main(["run", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_full_pipeline_emits_artifacts(pipeline_run):
    tmp, _ = pipeline_run
    for name in ARTIFACTS:
        assert (tmp / name).is_file(), name


def test_evaluate_blocks_share_windows(pipeline_run):
    tmp, _ = pipeline_run
    doc = json.loads((tmp / "reports/evaluation.json").read_text())
    blocks = doc["blocks"]
    assert set(blocks) == {"west", "binary", "centers", "traffic"}
    assert {b["window_hash"] for b in blocks.values()} == {doc["window_hash"]}
    for b in blocks.values():
        assert b["mae"] <= b["rmse"]


def test_predictions_shape(pipeline_run):
    tmp, _ = pipeline_run
    lines = (tmp / "reports/predictions.csv").read_text().splitlines()
    assert lines[0] == "step," + ",".join(f"region_{i}" for i in range(6))
    assert len(lines) == 1 + DEFAULTS["u_out"]


def test_idempotent_and_inputs_untouched(pipeline_run):
    tmp, cfg = pipeline_run
    before = {n: _digest(tmp / n) for n in ARTIFACTS}
    cfg_before = _digest(cfg)
    for stage in ("regions", "hops", "adjacency", "train", "evaluate", "predict"):
        assert main([stage, "--config", str(cfg)]) == 0
        assert _digest(tmp / "trajectories.csv") == before["trajectories.csv"]
    assert {n: _digest(tmp / n) for n in ARTIFACTS} == before
    assert _digest(cfg) == cfg_before


def test_simulate_header_hash_and_counts(tmp_path, capsys):
    cfg = _fixture(tmp_path)
    hashes = []
    for _ in range(2):
        assert main(["simulate", "--config", str(cfg), "--set", "generator.horizon_s=300"]) == 0
        hashes.append(_digest(tmp_path / "trajectories.csv"))
    assert hashes[0] == hashes[1]
    assert (tmp_path / "trajectories.csv").read_text().startswith("entity_id,t,x,y\n")
    out = capsys.readouterr().out
    assert "entities: 300" in out
    assert "population 0: 150 entities" in out and "population 1: 150 entities" in out


def test_simulate_400_entities(tmp_path, capsys):
    cfg = _fixture(tmp_path)
    pops = '[{"count": 250, "speed": 1.0}, {"count": 150, "speed": 2.5}]'
    assert main(["simulate", "--config", str(cfg), "--set", f"generator.populations={pops}",
                 "--set", "generator.horizon_s=200"]) == 0
    out = capsys.readouterr().out
    assert "entities: 400" in out
    assert "population 0: 250 entities" in out and "population 1: 150 entities" in out


def test_seed_flag_changes_output(tmp_path):
    cfg = _fixture(tmp_path)
    main(["simulate", "--config", str(cfg), "--set", "generator.horizon_s=100"])
    a = _digest(tmp_path / "trajectories.csv")
    main(["simulate", "--config", str(cfg), "--set", "generator.horizon_s=100", "--seed", "9"])
    assert _digest(tmp_path / "trajectories.csv") != a


def test_hops_fixture(tmp_path, capsys):
    regions = voronoi_partition([(0, 0), (3, 4)], BBox(-1, -1, 4, 5))
    save_regions(tmp_path / "regions.json", regions, BBox(-1, -1, 4, 5))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_regions": 2, "u_out": 1, "speeds": [1.0, 2.0]}))
    assert main(["hops", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[:3] == ["D=2.5", "t_window=2.5", "K=[1, 2]"]
    doc = json.loads((tmp_path / "hops.json").read_text())
    assert doc["t_window"] == 2.5 and doc["k"] == [1, 2]


@pytest.mark.parametrize("setting,key", [
    ("adjacency_mode=\"euclid\"", "adjacency_mode"),
    ("train.epochs=\"many\"", "train.epochs"),
    ("no_such_key=1", "no_such_key"),
    ("generator.horizon_s=-5", "horizon_s"),
])
def test_config_errors_exit_2(tmp_path, capsys, setting, key):
    cfg = _fixture(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--set", setting]) == 2
    err = capsys.readouterr().err
    assert "west simulate" in err and key in err


def test_missing_artifact_exit_3(tmp_path, capsys):
    cfg = _fixture(tmp_path)
    for stage in ("regions", "hops", "train", "evaluate", "predict"):
        assert main([stage, "--config", str(cfg)]) == 3
        assert f"west {stage}" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "absent.json")]) == 3


def test_divergence_exit_4(tmp_path, capsys):
    cfg = _fixture(tmp_path)
    main(["simulate", "--config", str(cfg), "--set", "generator.horizon_s=1500"])
    for stage in ("regions", "hops", "adjacency"):
        assert main([stage, "--config", str(cfg)]) == 0
    code = main(["train", "--config", str(cfg), "--set", "train.learning_rate=1e200",
                 "--set", "train.optimizer=\"sgd\""])
    assert code == 4
    assert "west train" in capsys.readouterr().err


def test_help_lists_flags_with_defaults():
    for argv in (["--help"], ["train", "--help"], ["config", "init", "--help"]):
        proc = subprocess.run([sys.executable, "-m", "west.cli", *argv],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "--" in proc.stdout
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for flag in ("--config", "--set", "--seed"):
        assert flag in text
    assert text.count("(default:") >= 3


def test_relative_paths_follow_config(tmp_path):
    cfg = _fixture(tmp_path)
    loaded = load_run_config(str(cfg))
    assert loaded["paths"]["regions"] == os.path.join(str(tmp_path), "regions.json")
    assert loaded["n_regions"] == 6 and loaded["train"]["epochs"] == 20
