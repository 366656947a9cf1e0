"""Run directories: resolved config, checkpoints, caches, training log and manifest.

Layout::

    <run>/config.txt      resolved flat config (re-readable)
    <run>/manifest.json   command, config, seeds, dataset hash, versions, wall-clock, artifacts
    <run>/log.csv         one row per optimizer step (deterministic)
    <run>/timing.csv      wall time per step (varies between runs)
    <run>/checkpoints/    model archives
    <run>/cache/          teacher feature caches
"""
from __future__ import annotations

import csv
import json
import os
import platform
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from .config import dump_config

RUN_FORMAT = "okdad-run"
LOG_COLUMNS = (
    "stage", "epoch", "step", "loss", "cross_entropy", "similarity", "dissimilarity", "ratio", "lr",
    "val_accuracy", "val_map_a",
)


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunDir:
    """A run directory being written by one command."""

    def __init__(self, root, command: list[str], config: dict, seeds: dict | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "checkpoints").mkdir(exist_ok=True)
        (self.root / "cache").mkdir(exist_ok=True)
        self._t0 = time.perf_counter()
        _atomic_write(self.root / "config.txt", dump_config(config))
        self.manifest = {
            "format": RUN_FORMAT,
            "command": list(command),
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()},
            "seeds": {"master": int(config["seed"]), **(seeds or {})},
            "dataset_hash": None,
            "workers": int(config.get("workers", 1)),
            "code_version": code_version(),
            "environment": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "torch": torch.__version__,
                "torch_threads": torch.get_num_threads(),
            },
            "started": _now(),
            "finished": None,
            "wall_seconds": None,
            "status": "running",
            "artifacts": {},
        }
        self.save()

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def add_artifact(self, name: str, path):
        self.manifest["artifacts"][name] = os.path.relpath(Path(path), self.root)
        self.save()

    def save(self):
        _atomic_write(self.root / "manifest.json", json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "ok", **extra):
        self.manifest.update(extra)
        self.manifest["status"] = status
        self.manifest["finished"] = _now()
        self.manifest["wall_seconds"] = round(time.perf_counter() - self._t0, 3)
        self.save()


def write_log(history, path, timing_path=None):
    """Write training rows to ``log.csv``; wall times go to ``timing_path``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])
    if timing_path is not None:
        with open(timing_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "wall_time"])
            for row in history:
                w.writerow([row.get("step"), f"{row.get('wall_time', 0.0):.4f}"])


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing run manifest: {path}")
    return json.loads(path.read_text())
