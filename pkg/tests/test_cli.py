import csv
import json

import pytest

from okdad.cli import main

TINY = """
seed = 4
num_classes = 3
frame_height = 24
frame_width = 24
min_clip_len = 20
max_clip_len = 30
gap_len_min = 10
gap_len_max = 15
num_clips = 24
num_sequences = 5
actions_per_sequence = 2
test_fraction = 0.25
val_fraction = 0.2
crop_height = 8
crop_width = 8
feature_dim = 8
block_widths = 4, 8
stem_width = 4
class_hidden = 8
actionness_hidden = 8
teacher_batch_size = 4
teacher_epochs = 1
student_batch_size = 4
student_epochs = 1
okdad_batch_size = 2
okdad_epochs = 1
okdad_window_blocks = 4
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    c = str(cfg)
    assert main(["synth", "--config", c, "--kind", "clips", "--out", str(root / "clips")]) == 0
    assert main(["synth", "--config", c, "--kind", "sequences", "--out", str(root / "seqs")]) == 0
    assert main(["train", "teacher", "--config", c, "--data", str(root / "clips"), "--out", str(root / "teacher")]) == 0
    return root, c


def test_unknown_key_exits_nonzero_naming_it(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 1\nlearnign_rate = 0.1\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    err = capsys.readouterr().err
    assert "learnign_rate" in err and "line" not in err.split("learnign_rate")[0][-3:]
    assert ":2:" in err


def test_usage_errors(tmp_path, monkeypatch):
    monkeypatch.delenv("OKDAD_DATA_ROOT", raising=False)
    assert main(["train", "teacher", "--out", str(tmp_path / "r")]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--out", str(tmp_path / "e")]) == 1
    assert main(["frobnicate"]) == 1


def test_runtime_failure_exit_code(work, tmp_path):
    root, c = work
    broken = tmp_path / "broken.npz"
    broken.write_bytes(b"garbage")
    assert main(["eval", "--config", c, "--checkpoint", str(broken), "--data", str(root / "clips"),
                 "--out", str(tmp_path / "e")]) == 2


def test_teacher_run_directory(work):
    root, _ = work
    run = root / "teacher"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seeds"]["master"] == 4
    assert manifest["dataset_hash"] and (run / "checkpoints" / "teacher.npz").is_file()
    header = (run / "log.csv").read_text().splitlines()[0]
    assert "wall" not in header and "loss" in header


def test_student_eval_and_report(work):
    root, c = work
    clips = str(root / "clips")
    assert main(["train", "student", "--config", c, "--data", clips, "--teacher", str(root / "teacher"),
                 "--out", str(root / "student")]) == 0
    assert main(["eval", "--config", c, "--checkpoint", str(root / "student" / "checkpoints" / "student.npz"),
                 "--data", clips, "--out", str(root / "ev_student")]) == 0
    rows = list(csv.reader(open(root / "ev_student" / "accuracy.csv")))
    assert len(rows) == 2 and len(rows[0]) == 10 and len(rows[1]) == 10
    assert all(0.0 <= float(v) <= 1.0 for v in rows[1])
    assert main(["eval", "--config", c, "--protocol", "fidelity", "--teacher", str(root / "teacher"),
                 "--checkpoint", str(root / "student" / "checkpoints" / "student.npz"), "--data", clips,
                 "--out", str(root / "ev_fid")]) == 0
    assert main(["eval", "--config", c, "--checkpoint", str(root / "teacher" / "checkpoints" / "teacher.npz"),
                 "--data", clips, "--out", str(root / "ev_teacher")]) == 0
    assert main(["report", str(root / "ev_teacher"), str(root / "ev_student"), "--out", str(root / "merged")]) == 0
    merged = list(csv.reader(open(root / "merged" / "accuracy.csv")))
    assert [r[0] for r in merged[1:]] == ["ev_teacher", "ev_student"] and len(merged[0]) == 11


def test_detection_pipeline(work):
    root, c = work
    seqs = str(root / "seqs")
    assert main(["train", "okdad", "--config", c, "--data", seqs, "--teacher", str(root / "teacher"),
                 "--out", str(root / "okdad")]) == 0
    out = root / "ev_det"
    assert main(["eval", "--config", c, "--protocol", "detection", "--checkpoint",
                 str(root / "okdad" / "checkpoints" / "okdad.npz"), "--data", seqs, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["map_a@0.5"] <= 1.0
    assert (out / "segments.jsonl").exists() and any((out / "events").iterdir())


def test_wrong_dataset_kind(work, tmp_path):
    root, c = work
    assert main(["train", "teacher", "--config", c, "--data", str(root / "seqs"), "--out", str(tmp_path / "x")]) == 1


def test_rerun_and_replay_are_bit_identical(work, tmp_path):
    root, c = work
    assert main(["train", "teacher", "--config", c, "--data", str(root / "clips"), "--out", str(tmp_path / "again")]) == 0
    assert main(["replay", str(root / "teacher"), "--out", str(tmp_path / "replayed")]) == 0
    ref = (root / "teacher" / "log.csv").read_bytes()
    assert (tmp_path / "again" / "log.csv").read_bytes() == ref
    assert (tmp_path / "replayed" / "log.csv").read_bytes() == ref
    ck = (root / "teacher" / "checkpoints" / "teacher.npz").read_bytes()
    assert (tmp_path / "replayed" / "checkpoints" / "teacher.npz").read_bytes() == ck
