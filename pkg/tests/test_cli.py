import csv
import json

import pytest

from reptransfer.cli import build_tables, main


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny ripple corpus, a teacher, a student and eval runs built through the CLI."""
    root = tmp_path_factory.mktemp("ws")
    steps = [
        ["gen", "--out", str(root / "data"), "--transform", "ripple", "--train", "6", "--val", "2", "--test", "3",
         "--size", "16", "--classes", "3", "--seed", "4"],
        ["train-sup", "--data", str(root / "data"), "--out", str(root / "teacher"), "--iters", "4", "--batch", "3"],
        ["train-transfer", "--teacher", str(root / "teacher" / "model.ck"), "--data", str(root / "data"),
         "--out", str(root / "student"), "--iters", "3", "--batch", "3"],
        ["eval", "--ckpt", str(root / "teacher" / "model.ck"), "--data", str(root / "data"),
         "--out", str(root / "runs" / "b0"), "--tag", "B0"],
        ["eval", "--ckpt", str(root / "teacher" / "model.ck"), "--data", str(root / "data"), "--side", "x1",
         "--out", str(root / "runs" / "h1"), "--tag", "H1"],
        ["eval", "--ckpt", str(root / "student" / "model.ck"), "--data", str(root / "data"),
         "--out", str(root / "runs" / "our"), "--tag", "Our,pool_5"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return root


def test_distance_command_examples(capsys):
    code, out, err = run(["distance", "--ref", "79.92,69.22", "--scores", "54.73,46.07"], capsys)
    assert code == 0 and out.strip() == "32.48"
    assert json.loads(err.splitlines()[0])["scores"] == "54.73,46.07"


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["distance"],
    ["distance", "--scores", "1"],
    ["gen", "--out", "x", "--train", "many"],
    ["gen", "--out", "x", "--transform", "blur"],
    ["invert", "--ckpt", "a", "--image", "b", "--out", "c", "--content", "pool_5=heavy"],
])
def test_usage_errors_exit_1(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_config_conflicts_exit_1(workspace, capsys, tmp_path):
    base = ["train-transfer", "--teacher", str(workspace / "teacher" / "model.ck"), "--data",
            str(workspace / "data"), "--out", str(tmp_path / "s")]
    assert run(base + ["--strategy", "W_inc", "--weights", "1"], capsys)[0] == 1
    assert run(base + ["--taps", "pool_1,pool_2", "--weights", "1"], capsys)[0] == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "gen", "out": "x"}))
    assert run(["eval", "--config", str(cfg)], capsys)[0] == 1
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert run(["distance", "--config", str(cfg), "--scores", "1,1"], capsys)[0] == 1
    assert run(["distance", "--config", str(tmp_path / "missing.json"), "--scores", "1,1"], capsys)[0] == 1


def test_runtime_errors_exit_2(workspace, capsys, tmp_path):
    code, _, err = run(["eval", "--ckpt", str(tmp_path / "nope.ck"), "--data", str(workspace / "data"),
                        "--out", str(tmp_path / "e")], capsys)
    assert code == 2 and "nope.ck" in err
    assert run(["report", "--runs", str(tmp_path)], capsys)[0] == 2


def test_locked_run_directory_exit_2(workspace, capsys, tmp_path):
    (tmp_path / "e").mkdir()
    (tmp_path / "e" / "run.lock").write_text("123")
    argv = ["eval", "--ckpt", str(workspace / "teacher" / "model.ck"), "--data", str(workspace / "data"),
            "--out", str(tmp_path / "e")]
    assert run(argv, capsys)[0] == 2
    (tmp_path / "e" / "run.lock").unlink()
    assert run(argv, capsys)[0] == 0
    assert not (tmp_path / "e" / "run.lock").exists()


def test_run_directory_contents(workspace):
    for name in ("config.json", "loss.csv", "model.ck"):
        assert (workspace / "teacher" / name).exists()
    with open(workspace / "teacher" / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "lr", "loss"] and len(rows) == 5
    cfg = json.loads((workspace / "teacher" / "config.json").read_text())
    assert cfg["command"] == "train-sup" and cfg["lr"] == 0.03 and cfg["iters"] == 4
    assert (workspace / "runs" / "b0" / "scores.csv").exists()


def test_finetune_defaults_to_lower_lr(workspace, capsys, tmp_path):
    code, _, err = run(["train-sup", "--data", str(workspace / "data"), "--side", "x2", "--out",
                        str(tmp_path / "b2"), "--init", str(workspace / "teacher" / "model.ck"),
                        "--iters", "1", "--batch", "3"], capsys)
    assert code == 0 and json.loads(err.splitlines()[0])["lr"] == 0.01


@pytest.mark.parametrize("run_name", ["teacher", "student"])
def test_rerun_from_snapshot_is_bitwise(workspace, capsys, tmp_path, run_name):
    src = workspace / run_name
    cfg = json.loads((src / "config.json").read_text())
    assert run([cfg["command"], "--config", str(src / "config.json"), "--out", str(tmp_path / "again")],
               capsys)[0] == 0
    for name in ("model.ck", "loss.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (src / name).read_bytes()


def test_gen_rerun_is_bitwise(workspace, capsys, tmp_path):
    src = workspace / "data"
    assert run(["gen", "--config", str(src / "config.json"), "--out", str(tmp_path / "d")], capsys)[0] == 0
    for f in src.rglob("*"):
        if f.is_file() and f.name != "config.json":
            assert (tmp_path / "d" / f.relative_to(src)).read_bytes() == f.read_bytes()


def test_transfer_ignores_target_labels(workspace, capsys, tmp_path):
    import shutil
    data = tmp_path / "data"
    shutil.copytree(workspace / "data", data)
    for f in data.rglob("*_y2.pgm"):
        f.write_bytes(b"\x00corrupt")
    cfg = workspace / "student" / "config.json"
    assert run(["train-transfer", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "s")],
               capsys)[0] == 0
    assert (tmp_path / "s" / "model.ck").read_bytes() == (workspace / "student" / "model.ck").read_bytes()


def test_float64_mode(workspace, capsys, tmp_path):
    code, _, err = run(["--precision", "float64", "eval", "--ckpt", str(workspace / "teacher" / "model.ck"),
                        "--data", str(workspace / "data"), "--out", str(tmp_path / "e")], capsys)
    assert code == 0 and json.loads(err.splitlines()[0])["precision"] == "float64"


def test_report_tables(workspace, capsys, tmp_path):
    code, out, _ = run(["report", "--runs", str(workspace / "runs"), "--out", str(tmp_path)], capsys)
    assert code == 0
    t3 = (tmp_path / "baselines.md").read_text()
    assert "| B1 | — |" in t3 and "| B0 |" in t3
    with open(tmp_path / "taps.csv") as fh:
        rows = {r[0]: r[1:] for r in csv.reader(fh)}
    assert rows["row"] == ["ripple"]
    assert rows["pool_1"] == ["—"] and rows["pool_5"][0] != "—"
    assert (tmp_path / "distance.md").exists()


def test_build_tables_layout():
    runs = [{"tags": ["B0"], "transform": t, "acc": a, "miou": m, "run": "x"}
            for t, a, m in [("cubism", 5.18, 3.78), ("photocopy", 54.73, 46.07), ("ripple", 31.76, 24.28)]]
    runs.append({"tags": ["H1"], "transform": "none", "acc": 79.92, "miou": 69.22, "run": "h"})
    tables = build_tables(runs)
    assert tables["baselines"]["columns"] == ["photocopy", "ripple", "cubism"]
    assert tables["baselines"]["cells"]["B0"]["photocopy"] == "54.73-46.07"
    assert tables["distance"]["cells"]["distance"] == {"photocopy": "32.48", "ripple": "62.59", "cubism": "94.03"}
    assert tables["taps"]["cells"]["W_dec"]["ripple"] == "—"


def test_invert_command(workspace, capsys, tmp_path):
    from reptransfer.netpbm import read_ppm
    image = workspace / "data" / "test" / "00000_x1.ppm"
    code, _, _ = run(["invert", "--ckpt", str(workspace / "teacher" / "model.ck"), "--image", str(image),
                      "--out", str(tmp_path / "inv"), "--iters", "3", "--style", ""], capsys)
    assert code == 0
    assert read_ppm(tmp_path / "inv" / "image.ppm").shape == (3, 16, 16)
    assert (tmp_path / "inv" / "loss.csv").read_text().startswith("iter,loss")


def test_snapshot_precision_is_honoured(workspace, capsys, tmp_path):
    argv = ["--precision", "float64", "train-sup", "--data", str(workspace / "data"), "--out", str(tmp_path / "a"),
            "--iters", "2", "--batch", "3"]
    assert run(argv, capsys)[0] == 0
    code, _, err = run(["train-sup", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")],
                       capsys)
    assert code == 0 and json.loads(err.splitlines()[0])["precision"] == "float64"
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
