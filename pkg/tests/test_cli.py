from __future__ import annotations

import json

import pytest

from segeval.cli import main
from segeval.dataset_io import load_dataset, read_split_csv
from segeval.evaluate import EvalReport
from segeval.report import parse_csv_table

SYNTH = ["--width", "120", "--height", "90", "--seed", "4"]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _echo(err, command):
    lines = [json.loads(l) for l in err.splitlines() if l.startswith("{")]
    assert lines and lines[0]["command"] == command
    return lines[0]["config"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    args = ["synth", "--out", str(root / "ds"), "--frames", "12", "--with-images", "--predictions", str(root / "pred.json")]
    assert main(args + SYNTH + ["--jitter", "2", "--score-noise", "0.2"]) == 0
    return root


def test_synth_writes_dataset(synth_dir):
    ds = load_dataset(synth_dir / "ds" / "manifest.json", load_images=True)
    assert len(ds.frames) == 12 and ds.frames[0].image.shape == (90, 120, 3)
    assert json.loads((synth_dir / "pred.json").read_text())


def test_validate(synth_dir, capsys):
    assert main(["validate", str(synth_dir / "ds" / "manifest.json"), "--check-images"]) == 0
    assert main(["validate", str(synth_dir / "ds" / "annotations.json")]) == 0
    bad = synth_dir / "bad.json"
    doc = json.loads((synth_dir / "ds" / "annotations.json").read_text())
    doc["annotations"][0]["category_id"] = 40
    bad.write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["validate", str(bad)]) == 1
    out, err = capsys.readouterr()
    assert "violations: 1" in out and "unknown category" in err


def test_evaluate_happy_path(synth_dir, capsys, tmp_path):
    gt, pred = str(synth_dir / "ds" / "annotations.json"), str(synth_dir / "pred.json")
    assert main(["evaluate", "--gt", gt, "--pred", pred, "--mode", "binary", "--iou", "mask"]) == 0
    out, err = capsys.readouterr()
    config = _echo(err, "evaluate")
    assert config["mode"] == "binary" and config["iou_kind"] == "mask"
    report, end = json.JSONDecoder().raw_decode(out)
    assert report["config"]["mode"] == "binary"
    tables = out[end:]
    assert "binary AP50:95" in tables and "mean" in tables

    args = ["evaluate", "--gt", gt, "--pred", pred, "--out", str(tmp_path / "r.json"), "--csv", str(tmp_path / "r.csv")]
    assert main(args + ["--threads", "1"]) == 0
    first = (tmp_path / "r.json").read_bytes()
    assert main(args + ["--threads", "3"]) == 0
    assert (tmp_path / "r.json").read_bytes() == first
    rep = EvalReport.from_json(json.loads(first))
    rows = parse_csv_table((tmp_path / "r.csv").read_text())
    assert rows[-1]["AP50:95"] == round(100 * rep.ap, 2)


def test_report_command(synth_dir, tmp_path, capsys):
    gt, pred = str(synth_dir / "ds" / "annotations.json"), str(synth_dir / "pred.json")
    for mode in ("binary", "multiclass"):
        assert main(["evaluate", "--gt", gt, "--pred", pred, "--mode", mode, "--label", "run", "--out", str(tmp_path / f"{mode}.json")]) == 0
    capsys.readouterr()
    assert main(["report", "--report", str(tmp_path / "binary.json"), str(tmp_path / "multiclass.json"), "--style", "csv"]) == 0
    rows = parse_csv_table(capsys.readouterr().out)
    assert len(rows) == 1 and rows[0]["Run"] == "run" and len(rows[0]) == 5
    assert main(["report", "--report", str(tmp_path / "binary.json"), str(tmp_path / "multiclass.json"), "--layout", "per-class"]) == 2
    assert main(["report", "--report", str(tmp_path / "nope.json")]) == 1


def test_split_command(synth_dir, tmp_path, capsys):
    manifest = str(synth_dir / "ds" / "manifest.json")
    args = ["split", "--manifest", manifest, "--train", "0.6", "--val", "0.2", "--test", "0.2", "--quota", "0", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a.csv"), "--save", str(tmp_path / "tagged")]) == 0
    out, err = capsys.readouterr()
    assert "frames: train=" in out
    assert _echo(err, "split")["seed"] == 1
    tags = read_split_csv(tmp_path / "a.csv")
    assert sorted(tags.values()).count("train") == 7
    assert main(args + ["--out", str(tmp_path / "b.csv"), "--threads", "4"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    tagged = load_dataset(tmp_path / "tagged" / "manifest.json", load_images=True)
    assert {f.frame_id: f.split for f in tagged.frames} == tags
    capsys.readouterr()
    # a tagged dataset needs --force, and an unreachable quota is a data error
    assert main(["split", "--manifest", str(tmp_path / "tagged" / "manifest.json"), "--quota", "0"]) == 1
    assert main(["split", "--manifest", manifest, "--quota", "50"]) == 1
    assert "short by" in capsys.readouterr().err
    assert main(["split", "--manifest", manifest, "--train", "0.9"]) == 2


def test_augment_is_deterministic(synth_dir, tmp_path, capsys):
    manifest = str(synth_dir / "ds" / "manifest.json")
    base = ["augment", "--manifest", manifest, "--area-threshold", "0.9", "--seed", "7", "--rotations", "90,180", "--scales", "1.25", "--translations", ""]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a = _tree(tmp_path / "a")
    assert a == _tree(tmp_path / "b")
    cfg = _echo(capsys.readouterr().err, "augment")
    assert cfg["seed"] == 7 and cfg["preservation_threshold"] == 0.9
    out = load_dataset(tmp_path / "a" / "manifest.json")
    assert len(out.frames) >= 12
    assert all(f.frame_id.split("/")[0].startswith("synth") for f in out.frames)


def test_commands_do_not_touch_inputs(synth_dir, tmp_path):
    before = _tree(synth_dir)
    main(["evaluate", "--gt", str(synth_dir / "ds" / "manifest.json"), "--pred", str(synth_dir / "pred.json"), "--out", str(tmp_path / "r.json")])
    main(["split", "--manifest", str(synth_dir / "ds" / "manifest.json"), "--quota", "0", "--out", str(tmp_path / "s.csv")])
    assert _tree(synth_dir) == before


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["evaluate", "--gt", "x.json"],
        ["evaluate", "--gt", "x.json", "--pred", "y.json", "--unknown-flag"],
        ["evaluate", "--gt", "x.json", "--pred", "y.json", "--mode", "ternary"],
        ["synth", "--out", "o", "--drop", "2"],
        ["synth", "--out", "o", "--threads", "0"],
        ["augment", "--manifest", "m.json", "--out", "o", "--rotations", "a,b"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_data_errors_exit_1(tmp_path, synth_dir, capsys):
    assert main(["validate", str(tmp_path / "missing.json")]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["evaluate", "--gt", str(tmp_path / "broken.json"), "--pred", str(synth_dir / "pred.json")]) == 1
    pred = json.loads((synth_dir / "pred.json").read_text())
    pred[0]["score"] = 1.5
    (tmp_path / "p.json").write_text(json.dumps(pred))
    assert main(["evaluate", "--gt", str(synth_dir / "ds" / "annotations.json"), "--pred", str(tmp_path / "p.json")]) == 1
    assert "outside [0, 1]" in capsys.readouterr().err
