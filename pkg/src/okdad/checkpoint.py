"""Checkpoints: one ``.npz`` archive, one named array per parameter plus a JSON manifest.

The manifest (stored as the ``__manifest__`` entry) records the estimator
kind and parameters, the backbone layout, every array shape, the training
step and a metric snapshot. Loading rebuilds the network and refuses any
shape disagreement.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .estimators import OfflineTeacher, OKDADDetector, OnlineStudent
from .nets import BackboneConfig, OnlineNet, TeacherNet

FORMAT_NAME = "okdad-checkpoint"
FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"
_KINDS = {"teacher": OfflineTeacher, "student": OnlineStudent, "okdad": OKDADDetector}


class CheckpointError(ValueError):
    """The archive is unreadable or does not match the network it describes."""


def _kind(est) -> str:
    for name, cls in _KINDS.items():
        if type(est) is cls:
            return name
    raise TypeError(f"cannot checkpoint {type(est).__name__}")


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def save_checkpoint(est, path, metrics: dict | None = None) -> dict:
    """Write a fitted estimator to ``path``; returns the manifest."""
    net = getattr(est, "model_", None)
    if net is None:
        raise ValueError("estimator is not fitted")
    kind = _kind(est)
    state = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    params = {k: _jsonable(v) for k, v in est.get_params(deep=False).items() if k != "teacher"}
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "params": params,
        "num_classes": int(est.n_classes_),
        "backbone": net.backbone.config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "dtypes": {k: str(v.dtype) for k, v in state.items()},
        "step": int(getattr(est, "n_steps_", 0)),
        "best_score": getattr(est, "best_score_", None),
        "metrics": metrics or {},
    }
    if kind == "student":
        manifest["t_on"] = int(est.t_on_)
    if kind != "teacher":
        manifest["distilled"] = est.teacher is not None
    arrays = {f"param/{k}": v for k, v in state.items()}
    arrays[MANIFEST_KEY] = np.asarray(json.dumps(manifest, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return manifest


def read_checkpoint_manifest(path) -> dict:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            return json.loads(str(data[MANIFEST_KEY]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def _network(kind, manifest):
    p = manifest["params"]
    cfg = BackboneConfig(**{**manifest["backbone"], "block_widths": tuple(manifest["backbone"]["block_widths"])})
    C = manifest["num_classes"]
    if kind == "teacher":
        return TeacherNet(cfg, C, p["t_off"])
    return OnlineNet(cfg, C, p["delta"], p["class_hidden"],
                     p["actionness_hidden"] if kind == "okdad" else None, p.get("gate_mode", "soft"))


def load_checkpoint(path):
    """Rebuild the fitted estimator stored at ``path`` (evaluation mode)."""
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    if manifest.get("format") != FORMAT_NAME or manifest.get("kind") not in _KINDS:
        raise CheckpointError(f"{path} is not an {FORMAT_NAME} archive")
    kind = manifest["kind"]
    net = _network(kind, manifest)
    expected = {k: tuple(v.shape) for k, v in net.state_dict().items()}
    with np.load(path, allow_pickle=False) as data:
        stored = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    problems = []
    for k in sorted(set(expected) | set(stored)):
        if k not in stored:
            problems.append(f"missing array {k}")
        elif k not in expected:
            problems.append(f"unexpected array {k}")
        elif tuple(stored[k].shape) != expected[k]:
            problems.append(f"{k}: stored shape {tuple(stored[k].shape)} != expected {expected[k]}")
    if problems:
        raise CheckpointError(f"checkpoint {path} does not match its network: " + "; ".join(problems))
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in stored.items()})
    net.eval()
    params = dict(manifest["params"])
    for key in ("feature_dim", "blocks_per_stage", "stem_width"):
        params[key] = manifest["backbone"][key]
    params["block_widths"] = tuple(manifest["backbone"]["block_widths"])
    params["out_height"] = manifest["backbone"]["height"]
    params["out_width"] = manifest["backbone"]["width"]
    est = _KINDS[kind](**params)
    est.model_ = net
    est.n_classes_ = manifest["num_classes"]
    est.classes_ = np.arange(est.n_classes_)
    est.n_steps_ = manifest["step"]
    est.best_score_ = manifest["best_score"]
    if kind == "student":
        est.t_on_ = manifest["t_on"]
    if kind != "teacher":
        est.backbone_config_ = manifest["backbone"]
    return est, manifest
