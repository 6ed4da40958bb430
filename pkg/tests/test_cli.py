import csv
import json

import pytest

from cityfields.cli import dispatch
from cityfields.data import load_dataset

SMALL = ["iterations=150", "fields.log2_table_size=12", "sampler.proposal_log2_table_size=10"]


@pytest.fixture(scope="module")
def static_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert dispatch(["generate", "--scene", "static", "--out", str(root / "data")]) == 0
    assert dispatch(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--preset", "static",
                     "--quiet", *SMALL]) == 0
    return root


def test_no_arguments_is_a_usage_error(capsys):
    assert dispatch([]) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["frobnicate"], ["generate"], ["generate", "--scene", "nowhere", "--out", "x"],
                                  ["train", "--data", "x", "--out", "y", "bogus.key=1"],
                                  ["train", "--data", "x", "--out", "y", "not-an-override"],
                                  ["train", "--data", "x", "--out", "y", "--ablation", "no_bananas"]])
def test_bad_arguments_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert dispatch(argv) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert dispatch(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "m.csv")]) == 1
    assert "cityfields:" in capsys.readouterr().err


def test_generate_round_trips_through_the_loader(static_run):
    frames, bounds, meta = load_dataset(static_run / "data")
    assert len(frames) == 35 and frames[0].image.shape == (64, 64, 3) and meta["feature_dim"] == 8


def test_train_then_eval_reaches_threshold(static_run):
    out = static_run / "metrics.csv"
    assert dispatch(["eval", "--checkpoint", str(static_run / "run" / "checkpoint.bin"),
                     "--data", str(static_run / "data"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["frame"] for r in rows[:-1]] == ["7", "14", "21", "28", "35"]
    assert rows[-1]["video"] == "mean" and float(rows[-1]["psnr"]) >= 15.0
    again = static_run / "metrics2.csv"
    dispatch(["eval", "--checkpoint", str(static_run / "run" / "checkpoint.bin"),
              "--data", str(static_run / "data"), "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_render_unseen_time_is_deterministic(static_run):
    ck = str(static_run / "run" / "checkpoint.bin")
    args = ["render", "--checkpoint", ck, "--pose", "3,1.5,3,0,-0.2,0", "--time", "0.37", "--size", "24,16"]
    a, b = static_run / "a.png", static_run / "b.png"
    assert dispatch(args + ["--out", str(a)]) == 0
    assert dispatch(args + ["--out", str(b), "--branch", "full"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert dispatch(args + ["--out", str(a), "--video", "9"]) == 2
    assert dispatch(args[:-4] + ["--time", "1.5", "--out", str(a)]) == 2


def test_instances_report(static_run):
    out = static_run / "inst.json"
    assert dispatch(["instances", "--checkpoint", str(static_run / "run" / "checkpoint.bin"), "--out", str(out),
                     "--resolution", "16"]) == 0
    report = json.loads(out.read_text())
    for inst in report["instances"]:
        assert len(inst["cuboid"]["extents"]) == 3


def test_partition_and_cell_training(tmp_path):
    assert dispatch(["generate", "--scene", "city", "--out", str(tmp_path / "city")]) == 0
    assert dispatch(["partition", "--data", str(tmp_path / "city"), "--cells", "2", "--out",
                     str(tmp_path / "cells")]) == 0
    manifest = json.loads((tmp_path / "cells" / "partition.json").read_text())
    assert len(manifest["cells"]) == 2 and manifest["pruned_pairs"] <= manifest["frustum_pairs"]
    assert dispatch(["train", "--data", str(tmp_path / "city"), "--out", str(tmp_path / "runs"), "--preset", "city",
                     "--partition", str(tmp_path / "cells"), "--quiet", "iterations=2",
                     "fields.log2_table_size=10", "sampler.proposal_log2_table_size=8"]) == 0
    for c in range(2):
        assert (tmp_path / "runs" / f"cell_{c:03d}" / "checkpoint.bin").exists()
    assert dispatch(["render", "--partition", str(tmp_path / "cells"), "--runs", str(tmp_path / "runs"),
                     "--pose=-3,0.4,0,0,0.2,0", "--size", "8,8", "--focal", "6", "--samples", "16",
                     "--out", str(tmp_path / "routed.png")]) == 0


def test_ablate_writes_a_table(static_run, tmp_path):
    assert dispatch(["ablate", "--data", str(static_run / "data"), "--out", str(tmp_path), "--preset", "static",
                     "--ablation", "no_depth", "--ablation", "no_warp", "iterations=2",
                     "fields.log2_table_size=10", "sampler.proposal_log2_table_size=8"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["full", "no_depth", "no_warp"]
    assert float(rows[0]["delta_psnr"]) == 0.0
