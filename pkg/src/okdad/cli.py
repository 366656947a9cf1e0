"""Command-line entry point: ``okdad {synth,train,cache,eval,report,replay}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
``OKDAD_DATA_ROOT`` supplies default dataset locations (``<root>/clips`` for
recognition, ``<root>/sequences`` for detection).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as cfgmod
from . import metrics, runs, runtime, synthvid, trainer
from .estimators import OfflineTeacher, OKDADDetector, OnlineStudent
from .rng import derive_seed
from .sampling import crop_clip

logger = logging.getLogger("okdad")

DATA_ROOT_ENV = "OKDAD_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or missing inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _data_dir(arg, kind):
    if arg is not None:
        path = Path(arg)
    elif os.environ.get(DATA_ROOT_ENV):
        path = Path(os.environ[DATA_ROOT_ENV]) / kind
    else:
        raise UsageError(f"--data is required (or set {DATA_ROOT_ENV})")
    if not (path / synthvid.MANIFEST_NAME).is_file():
        raise UsageError(f"no dataset at {path} (missing {synthvid.MANIFEST_NAME})")
    return path


def _checkpoint_path(arg, stage):
    path = Path(arg)
    if path.is_dir():
        path = path / "checkpoints" / f"{stage}.npz"
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _load_config(args):
    overrides = {"seed": getattr(args, "seed", None)}
    if getattr(args, "threshold", None) is not None:
        overrides["actionness_threshold"] = args.threshold
    return cfgmod.load_config(args.config, overrides)


def _cropped(items, cfg):
    shape = (cfg["crop_height"], cfg["crop_width"])
    return [crop_clip(it.frames, it.keypoints, cfg["crop_margin"], shape) for it in items]


def _load_split(directory, split, cfg, kind):
    items, manifest = synthvid.load_dataset(directory, split)
    if manifest["kind"] != kind:
        raise UsageError(f"{directory} holds {manifest['kind']}, this command needs {kind}")
    return items, _cropped(items, cfg), manifest


def _labels(items):
    return np.asarray([it.label for it in items], np.int64)


def _intervals(items):
    return [list(it.intervals) for it in items]


# --------------------------------------------------------------------------
# synth


def cmd_synth(args):
    cfg = _load_config(args)
    kind = args.kind
    out = Path(args.out) if args.out else None
    if out is None:
        if not os.environ.get(DATA_ROOT_ENV):
            raise UsageError(f"--out is required (or set {DATA_ROOT_ENV})")
        out = Path(os.environ[DATA_ROOT_ENV]) / kind
    gen = synthvid.GeneratorConfig(**cfgmod.generator_kwargs(cfg))
    if kind == "clips":
        items, seeds = synthvid.make_clip_dataset(gen, cfg["num_clips"], cfg["seed"])
    else:
        items, seeds = synthvid.make_sequence_dataset(gen, cfg["num_sequences"], cfg["actions_per_sequence"], cfg["seed"])
    splits = synthvid.make_splits(len(items), cfg["seed"], cfg["test_fraction"], cfg["val_fraction"])
    manifest = synthvid.write_dataset(items, out, gen, seeds, splits, cfg["seed"])
    print(f"wrote {len(items)} {kind} to {out} (dataset hash {manifest['dataset_hash'][:12]})")
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def _open_run(args, cfg, extra_seeds):
    if not args.out:
        raise UsageError("--out is required")
    return runs.RunDir(args.out, ["okdad"] + sys.argv[1:] if args.argv is None else args.argv, cfg, extra_seeds)


def _finish_training(run, est, stage, metrics_snapshot):
    path = run.path("checkpoints", f"{stage}.npz")
    ckpt.save_checkpoint(est, path, metrics_snapshot)
    run.add_artifact("checkpoint", path)
    runs.write_log(est.history_, run.path("log.csv"), run.path("timing.csv"))
    run.add_artifact("log", run.path("log.csv"))
    run.finish("ok", best_score=est.best_score_, steps=est.n_steps_)
    print(f"{stage}: best validation score {est.best_score_:.4f}; checkpoint {path}")


def _train_teacher(args, cfg):
    data = _data_dir(args.data, "clips")
    tr, Xtr, manifest = _load_split(data, "train", cfg, "clips")
    va, Xva, _ = _load_split(data, "val", cfg, "clips")
    run = _open_run(args, cfg, {"teacher_init": derive_seed(cfg["seed"], "teacher-init")})
    run.manifest["dataset_hash"] = manifest["dataset_hash"]
    est = OfflineTeacher(**cfgmod.teacher_kwargs(cfg))
    est.fit(Xtr, _labels(tr), eval_set=(Xva, _labels(va)) if va else None)
    _finish_training(run, est, "teacher", {"val_accuracy": est.best_score_})


def _teacher_from(args, required):
    if args.teacher is None:
        if required:
            raise UsageError("--teacher is required for this configuration")
        return None
    return ckpt.load_checkpoint(_checkpoint_path(args.teacher, "teacher"))[0]


def _train_student(args, cfg):
    distill = cfg["student_init"] == "teacher"
    if not distill and cfg["eta"] > 0:
        raise cfgmod.ConfigError([(0, "eta", "must be 0 when student_init = random (no teacher to distill)")])
    data = _data_dir(args.data, "clips")
    tr, Xtr, manifest = _load_split(data, "train", cfg, "clips")
    va, Xva, _ = _load_split(data, "val", cfg, "clips")
    teacher = _teacher_from(args, distill)
    if not distill:
        teacher = None
    run = _open_run(args, cfg, {"student_init": derive_seed(cfg["seed"], "OnlineStudent", "init")})
    run.manifest["dataset_hash"] = manifest["dataset_hash"]
    ytr = _labels(tr)
    cache = None
    if teacher is not None and cfg["eta"] > 0:
        fp = trainer.fingerprint_clips(Xtr, ytr)
        if args.cache:
            cache = trainer.TeacherFeatureCache.load(args.cache)
            cache.check(fp, cfg["s"], cfg["delta"])
        else:
            cache = teacher.build_cache(Xtr, ytr, cfg["s"], cfg["delta"], fp)
            cache.save(run.path("cache", "teacher_cache.npz"))
            run.add_artifact("cache", run.path("cache", "teacher_cache.npz"))
    est = OnlineStudent(teacher, **cfgmod.student_kwargs(cfg))
    est.fit(Xtr, ytr, eval_set=(Xva, _labels(va)) if va else None, cache=cache)
    _finish_training(run, est, "student", {"val_accuracy": est.best_score_})


def _train_okdad(args, cfg):
    distill = cfg["student_init"] == "teacher"
    data = _data_dir(args.data, "sequences")
    tr, Xtr, manifest = _load_split(data, "train", cfg, "sequences")
    va, Xva, _ = _load_split(data, "val", cfg, "sequences")
    teacher = _teacher_from(args, distill) if distill else None
    if teacher is None and cfg["eta"] > 0:
        raise cfgmod.ConfigError([(0, "eta", "must be 0 without a teacher")])
    run = _open_run(args, cfg, {"okdad_init": derive_seed(cfg["seed"], "OKDADDetector", "init")})
    run.manifest["dataset_hash"] = manifest["dataset_hash"]
    est = OKDADDetector(teacher, **cfgmod.okdad_kwargs(cfg))
    est.fit(Xtr, _intervals(tr), eval_set=(Xva, _intervals(va)) if va else None)
    _finish_training(run, est, "okdad", {"val_map_a": est.best_score_})


def cmd_train(args):
    cfg = _load_config(args)
    {"teacher": _train_teacher, "student": _train_student, "okdad": _train_okdad}[args.stage](args, cfg)
    return EXIT_OK


# --------------------------------------------------------------------------
# cache


def cmd_cache(args):
    cfg = _load_config(args)
    data = _data_dir(args.data, "clips")
    tr, Xtr, _ = _load_split(data, args.split, cfg, "clips")
    teacher = _teacher_from(args, True)
    y = _labels(tr)
    cache = teacher.build_cache(Xtr, y, cfg["s"], cfg["delta"], trainer.fingerprint_clips(Xtr, y))
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.suffix != ".npz":
        out = out / "teacher_cache.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    cache.save(out)
    print(f"cached teacher features for {len(Xtr)} clips in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def _ratio_columns(values: dict) -> dict:
    return {f"{r:.1f}": v for r, v in values.items()}


def _eval_ratios(est, kind, X, y, report):
    acc = metrics.accuracy_at_ratios(est, X, y)
    report.add("accuracy", None, _ratio_columns(acc))
    report.summary["mean_accuracy"] = float(np.mean(list(acc.values())))
    if kind in ("teacher", "student"):
        intra, inter = {}, {}
        for r in metrics.DEFAULT_RATIOS:
            intra[r], inter[r] = metrics.intra_inter_similarity(est.transform(X, ratio=r), y)
        report.add("similarity", "intra", _ratio_columns(intra))
        report.add("similarity", "inter", _ratio_columns(inter))


def _eval_fidelity(est, teacher, X, report):
    sim, mse = {}, {}
    for r in metrics.DEFAULT_RATIOS:
        sim[r], mse[r] = metrics.teacher_student_fidelity(teacher.transform(X, ratio=r), est.transform(X, ratio=r))
    report.add("fidelity", "similarity", _ratio_columns(sim))
    report.add("fidelity", "mse", _ratio_columns(mse))
    report.summary["mean_similarity"] = float(np.mean(list(sim.values())))
    report.summary["mean_mse"] = float(np.mean(list(mse.values())))


def _eval_detection(est, X, items, cfg, threshold, report, out):
    chunk = est._chunk()
    outputs = est.decision_function(X)
    proposals = [runtime.propose_segments(o, threshold) for o in outputs]
    gts = [trainer.ground_truth_blocks(trainer.block_targets(len(f), it.intervals, chunk)) for f, it in zip(X, items)]
    row = {str(th): metrics.map_a_dataset(proposals, gts, th) for th in metrics.DEFAULT_THETAS}
    report.add("map_a", None, row)
    report.summary["map_a@0.5"] = row["0.5"]
    report.summary["threshold"] = threshold
    (out / "events").mkdir(exist_ok=True)
    with open(out / "segments.jsonl", "w") as fh:
        for k, segs in enumerate(proposals):
            for s in segs:
                fh.write(json.dumps({"sequence": k, "start_block": s.start_block, "end_block": s.end_block,
                                     "label": s.label, "confidence": round(s.confidence, 6)}) + "\n")
    for k, outs in enumerate(outputs):
        runtime.write_event_log(outs, out / "events" / f"sequence_{k:04d}.csv")


def cmd_eval(args):
    cfg = _load_config(args)
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    est, manifest = ckpt.load_checkpoint(path)
    kind = manifest["kind"]
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = runs.RunDir(out, args.argv or ["okdad"] + sys.argv[1:], cfg)
    run.manifest["checkpoint"] = {"path": str(path), "kind": kind, "sha256": _sha256(path)}
    report = metrics.EvalReport(summary={"protocol": args.protocol, "kind": kind})
    if args.protocol == "detection":
        if kind != "okdad":
            raise UsageError("the detection protocol needs an okdad checkpoint")
        data = _data_dir(args.data, "sequences")
        items, X, dmf = _load_split(data, args.split, cfg, "sequences")
        th = args.threshold if args.threshold is not None else cfg["actionness_threshold"]
        _eval_detection(est, X, items, cfg, th, report, out)
    else:
        if kind == "okdad":
            raise UsageError(f"the {args.protocol} protocol needs a teacher or student checkpoint")
        data = _data_dir(args.data, "clips")
        items, X, dmf = _load_split(data, args.split, cfg, "clips")
        y = _labels(items)
        if args.protocol == "ratios":
            _eval_ratios(est, kind, X, y, report)
        else:
            if kind != "student":
                raise UsageError("the fidelity protocol needs a student checkpoint")
            teacher = _teacher_from(args, True)
            _eval_fidelity(est, teacher, X, report)
    run.manifest["dataset_hash"] = dmf["dataset_hash"]
    paths = report.write(out)
    for p in paths:
        run.add_artifact(p.stem, p)
    run.finish("ok")
    print(f"{args.protocol} report written to {out}")
    return EXIT_OK


def _sha256(path):
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# report


def cmd_report(args):
    if not args.out:
        raise UsageError("--out is required")
    merged: dict[str, dict[str, dict]] = {}
    for d in args.runs:
        path = Path(d) / "summary.json"
        if not path.is_file():
            raise UsageError(f"no evaluation summary in {d}")
        summary = json.loads(path.read_text())
        name = Path(d).resolve().name
        for table, rows in summary["tables"].items():
            for row, vals in rows.items():
                label = name if row in (None, "None", "null") else f"{name}:{row}"
                merged.setdefault(table, {})[label] = vals
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for table, rows in merged.items():
        cols = []
        for vals in rows.values():
            cols += [c for c in vals if c not in cols]
        with open(out / f"{table}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run"] + cols)
            for label, vals in rows.items():
                w.writerow([label] + [metrics._fmt(vals.get(c)) for c in cols])
    (out / "summary.json").write_text(json.dumps({"runs": [str(d) for d in args.runs], "tables": merged},
                                                 indent=2, sort_keys=True) + "\n")
    print(f"merged {len(args.runs)} runs into {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# replay


def cmd_replay(args):
    """Re-execute the command recorded in a run manifest into a new directory."""
    manifest = runs.read_manifest(args.run)
    argv = list(manifest["command"])[1:]
    if "--out" in argv:
        argv[argv.index("--out") + 1] = args.out
    else:
        argv += ["--out", args.out]
    return main(argv)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="okdad", description="Teacher/student distillation for online action detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
        if data:
            sp.add_argument("--data", help=f"dataset directory (default: ${DATA_ROOT_ENV}/<kind>)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--kind", choices=("clips", "sequences"), default="clips")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a teacher, a student or the detector")
    sp.add_argument("stage", choices=("teacher", "student", "okdad"))
    common(sp)
    sp.add_argument("--teacher", help="teacher run directory or checkpoint")
    sp.add_argument("--cache", help="prebuilt teacher feature cache (.npz)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("cache", help="precompute teacher features for student training")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher run directory or checkpoint")
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_cache)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--protocol", choices=("ratios", "detection", "fidelity"), default="ratios")
    sp.add_argument("--teacher", help="teacher checkpoint (fidelity protocol)")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--threshold", type=float, help="actionness threshold (default from config)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="merge evaluation reports into comparison tables")
    sp.add_argument("runs", nargs="+", help="evaluation output directories")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    sp.add_argument("run", help="run or evaluation directory")
    sp.add_argument("--out", required=True, help="new output directory")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = ["okdad"] + argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"okdad: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"okdad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (synthvid.DatasetError, ckpt.CheckpointError, trainer.CacheMismatch, trainer.TrainingDiverged,
            OSError, RuntimeError, ValueError, AssertionError) as exc:
        print(f"okdad: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
