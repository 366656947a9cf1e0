import numpy as np
import pytest
import torch

from okdad import KeypointCropper, OfflineTeacher, OKDADDetector, OnlineStudent
from okdad.checkpoint import CheckpointError, load_checkpoint, read_checkpoint_manifest, save_checkpoint
from okdad.synthvid import GeneratorConfig, make_clip_dataset, make_sequence_dataset

GEN = GeneratorConfig(num_classes=3, min_clip_len=20, max_clip_len=30, gap_len_range=(10, 15))
NET = dict(feature_dim=8, block_widths=(4, 8), stem_width=4, out_height=8, out_width=8)


@pytest.fixture(scope="module")
def fitted():
    items, _ = make_clip_dataset(GEN, 12, seed=1)
    X = KeypointCropper(out_height=8, out_width=8).transform(items)
    y = np.array([c.label for c in items])
    teacher = OfflineTeacher(epochs=1, batch_size=4, **NET).fit(X, y)
    student = OnlineStudent(teacher, epochs=1, batch_size=4, class_hidden=6, **NET).fit(X, y)
    seqs, _ = make_sequence_dataset(GEN, 2, 2, seed=2)
    S = KeypointCropper(out_height=8, out_width=8).transform(seqs)
    det = OKDADDetector(teacher, epochs=1, batch_size=2, window_blocks=4, class_hidden=6, actionness_hidden=5, **NET)
    det.fit(S, [s.intervals for s in seqs])
    return X, S, {"teacher": teacher, "student": student, "okdad": det}


@pytest.mark.parametrize("kind", ["teacher", "student", "okdad"])
def test_round_trip_is_exact(fitted, kind, tmp_path):
    X, S, models = fitted
    est = models[kind]
    path = tmp_path / f"{kind}.npz"
    manifest = save_checkpoint(est, path, {"note": 1.0})
    back, read = load_checkpoint(path)
    assert read == manifest and read["kind"] == kind and read["metrics"] == {"note": 1.0}
    a, b = est.model_.state_dict(), back.model_.state_dict()
    assert set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)
    if kind == "okdad":
        assert back.predict(S) == est.predict(S)
    else:
        assert np.array_equal(back.predict(X, ratio=0.5), est.predict(X, ratio=0.5))


def test_shape_mismatch_is_refused(fitted, tmp_path):
    _, _, models = fitted
    path = tmp_path / "t.npz"
    save_checkpoint(models["teacher"], path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    key = next(k for k in arrays if k.endswith("classifier.weight"))
    arrays[key] = np.zeros((arrays[key].shape[0] + 1, arrays[key].shape[1]), np.float32)
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="classifier.weight"):
        load_checkpoint(path)


def test_missing_array_and_garbage(fitted, tmp_path):
    _, _, models = fitted
    path = tmp_path / "t.npz"
    save_checkpoint(models["teacher"], path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if not k.endswith("classifier.bias")}
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="missing array"):
        load_checkpoint(path)
    (tmp_path / "junk.npz").write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        read_checkpoint_manifest(tmp_path / "junk.npz")


def test_unfitted_estimator_is_rejected(tmp_path):
    with pytest.raises(ValueError, match="fitted"):
        save_checkpoint(OfflineTeacher(**NET), tmp_path / "x.npz")
