"""Flat ``key = value`` run configuration with a typed schema.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every hyperparameter has a named key and a default. Parsing collects all
problems (unknown keys, bad values, malformed lines, duplicates) and reports
them together with their line numbers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Malformed configuration; ``problems`` holds ``(line, key, message)`` triples."""

    def __init__(self, problems, source="<config>"):
        self.problems = list(problems)
        self.source = source
        lines = [f"{source}:{ln}: {key}: {msg}" if ln else f"{source}: {key}: {msg}" for ln, key, msg in self.problems]
        super().__init__("invalid configuration\n  " + "\n  ".join(lines))


@dataclass(frozen=True)
class Key:
    type: str  # int | float | bool | str | ints
    default: object
    help: str
    choices: tuple = ()
    min: float | None = None
    max: float | None = None


SCHEMA: dict[str, Key] = {
    "seed": Key("int", 0, "master seed; every random stream is derived from it"),
    # synthetic data
    "num_classes": Key("int", 10, "number of action classes", min=2),
    "frame_height": Key("int", 48, "raw frame height", min=16),
    "frame_width": Key("int", 48, "raw frame width", min=16),
    "min_clip_len": Key("int", 36, "shortest clip in frames", min=1),
    "max_clip_len": Key("int", 60, "longest clip in frames", min=1),
    "gap_len_min": Key("int", 30, "shortest idle gap in long sequences", min=0),
    "gap_len_max": Key("int", 45, "longest idle gap in long sequences", min=0),
    "actors_per_clip": Key("int", 1, "actors per clip", choices=(1, 2)),
    "intensity_noise_std": Key("float", 0.05, "background noise level", min=0.0),
    "num_clips": Key("int", 2000, "clips in a segmented dataset", min=1),
    "num_sequences": Key("int", 60, "sequences in a detection dataset", min=1),
    "actions_per_sequence": Key("int", 5, "actions per long sequence", min=1),
    "test_fraction": Key("float", 0.2, "held-out test share", min=0.0, max=0.9),
    "val_fraction": Key("float", 0.05, "share of the training split used for validation", min=0.0, max=0.9),
    # preprocessing
    "T_off": Key("int", 15, "frames fed to the offline teacher", min=1),
    "r_min": Key("float", 0.025, "smallest training observation ratio", min=1e-9, max=1.0),
    "crop_margin": Key("float", 0.1, "keypoint box margin per side", min=0.0),
    "crop_height": Key("int", 16, "frame height after cropping", min=1),
    "crop_width": Key("int", 16, "frame width after cropping", min=1),
    "s": Key("int", 3, "online frame stride", min=1),
    "delta": Key("int", 5, "frames per online block", min=1),
    # networks
    "feature_dim": Key("int", 64, "feature vector length D", min=8),
    "block_widths": Key("ints", (8, 16, 32, 64), "channels per backbone stage"),
    "blocks_per_stage": Key("int", 1, "residual blocks per stage", min=1),
    "stem_width": Key("int", 8, "channels of the stem convolution", min=1),
    "class_hidden": Key("int", 256, "classification LSTM width", min=1),
    "actionness_hidden": Key("int", 128, "actionness LSTM width", min=1),
    "gate_mode": Key("str", "soft", "memory gating rule", choices=("soft", "hard")),
    # losses
    "alpha": Key("float", 1.0, "intraclass similarity weight", min=0.0),
    "beta": Key("float", 0.5, "interclass dissimilarity weight", min=0.0),
    "gamma": Key("float", 2.0 / 3.0, "observation ratio exponent", min=1e-12),
    "eta": Key("float", 1.0, "distillation weight", min=0.0),
    "log_clamp_eps": Key("float", 1e-7, "lower clamp of log arguments", min=1e-300, max=0.4999),
    # training
    "teacher_batch_size": Key("int", 16, "teacher batch size", min=2),
    "teacher_learning_rate": Key("float", 1e-3, "teacher Adam step size", min=1e-12),
    "teacher_lr_schedule": Key("str", "cosine", "teacher step size schedule", choices=("constant", "cosine")),
    "teacher_epochs": Key("int", 24, "teacher epochs", min=1),
    "student_batch_size": Key("int", 32, "student batch size", min=1),
    "student_learning_rate": Key("float", 1e-3, "student Adam step size", min=1e-12),
    "student_epochs": Key("int", 10, "student epochs", min=1),
    "student_init": Key("str", "teacher", "student backbone source", choices=("teacher", "random")),
    "freeze_backbone": Key("bool", False, "keep backbone weights fixed"),
    "okdad_batch_size": Key("int", 16, "detector batch size (windows)", min=1),
    "okdad_learning_rate": Key("float", 1e-3, "detector Adam step size", min=1e-12),
    "okdad_epochs": Key("int", 20, "detector epochs", min=1),
    "okdad_window_blocks": Key("int", 40, "blocks per training window", min=1),
    "windows_per_sequence": Key("int", 4, "windows drawn per sequence per epoch", min=1),
    "gating_source": Key("str", "label", "gating signal while training", choices=("label", "predicted")),
    "actionness_threshold": Key("float", 0.75, "positive actionness threshold", min=0.0, max=1.0),
    "workers": Key("int", 1, "data workers (recorded in the run manifest)", min=1),
}


def _parse_value(spec: Key, raw: str):
    raw = raw.strip()
    if spec.type == "int":
        value = int(raw)
    elif spec.type == "float":
        value = float(raw)
        if value != value:
            raise ValueError("NaN is not allowed")
    elif spec.type == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            value = True
        elif low in ("false", "no", "0", "off"):
            value = False
        else:
            raise ValueError(f"expected a boolean, got {raw!r}")
    elif spec.type == "ints":
        value = tuple(int(p) for p in raw.replace(",", " ").split())
        if not value or min(value) < 1:
            raise ValueError("expected a list of positive integers")
    else:
        value = raw.strip("\"'")
    return check_value(spec, value)


def check_value(spec: Key, value):
    if spec.choices and value not in spec.choices:
        raise ValueError(f"must be one of {', '.join(map(str, spec.choices))}")
    if spec.min is not None and value < spec.min:
        raise ValueError(f"must be >= {spec.min}")
    if spec.max is not None and value > spec.max:
        raise ValueError(f"must be <= {spec.max}")
    return value


def _cross_checks(values: dict, lines: dict) -> list:
    problems = []
    if values["min_clip_len"] > values["max_clip_len"]:
        problems.append((lines.get("min_clip_len", 0), "min_clip_len", "must not exceed max_clip_len"))
    if values["gap_len_min"] > values["gap_len_max"]:
        problems.append((lines.get("gap_len_min", 0), "gap_len_min", "must not exceed gap_len_max"))
    if values["s"] * values["delta"] != values["T_off"]:
        problems.append((lines.get("delta", 0), "delta", "s * delta must equal T_off"))
    return problems


def defaults() -> dict:
    return {k: spec.default for k, spec in SCHEMA.items()}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse config text into a fully resolved dict (defaults filled in)."""
    values = defaults()
    problems, seen = [], {}
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            problems.append((ln, body, "expected 'key = value'"))
            continue
        key, raw = (p.strip() for p in body.split("=", 1))
        if key not in SCHEMA:
            problems.append((ln, key, "unknown key"))
            continue
        if key in seen:
            problems.append((ln, key, f"duplicate key (first set on line {seen[key]})"))
            continue
        seen[key] = ln
        try:
            values[key] = _parse_value(SCHEMA[key], raw)
        except ValueError as exc:
            problems.append((ln, key, str(exc)))
    if not problems:
        problems = _cross_checks(values, seen)
    if problems:
        raise ConfigError(problems, source)
    return values


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read ``path`` (or use defaults) and apply ``overrides`` such as ``--seed``."""
    if path is None:
        values, source = defaults(), "<defaults>"
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError([(0, str(path), f"cannot read: {exc.strerror}")], str(path)) from None
        source = str(path)
        values = parse_config(text, source)
    problems = []
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        try:
            values[key] = check_value(SCHEMA[key], value)
        except ValueError as exc:
            problems.append((0, key, str(exc)))
    problems = problems or _cross_checks(values, {})
    if problems:
        raise ConfigError(problems, source)
    return values


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(values: dict) -> str:
    """Resolved config as text that :func:`parse_config` reads back unchanged."""
    width = max(map(len, SCHEMA))
    out = []
    for key, spec in SCHEMA.items():
        out.append(f"{key.ljust(width)} = {format_value(values[key])}  # {spec.help}")
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ mapping to estimators


def generator_kwargs(cfg: dict) -> dict:
    return dict(
        num_classes=cfg["num_classes"], frame_height=cfg["frame_height"], frame_width=cfg["frame_width"],
        min_clip_len=cfg["min_clip_len"], max_clip_len=cfg["max_clip_len"],
        gap_len_range=(cfg["gap_len_min"], cfg["gap_len_max"]), actors_per_clip=cfg["actors_per_clip"],
        intensity_noise_std=cfg["intensity_noise_std"], seed=cfg["seed"],
    )


def _backbone_kwargs(cfg: dict) -> dict:
    return dict(
        feature_dim=cfg["feature_dim"], block_widths=cfg["block_widths"], blocks_per_stage=cfg["blocks_per_stage"],
        stem_width=cfg["stem_width"], out_height=cfg["crop_height"], out_width=cfg["crop_width"],
    )


def teacher_kwargs(cfg: dict) -> dict:
    return dict(
        num_classes=cfg["num_classes"], alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"],
        log_clamp_eps=cfg["log_clamp_eps"], t_off=cfg["T_off"], r_min=cfg["r_min"],
        batch_size=cfg["teacher_batch_size"], learning_rate=cfg["teacher_learning_rate"],
        lr_schedule=cfg["teacher_lr_schedule"], epochs=cfg["teacher_epochs"], seed=cfg["seed"], **_backbone_kwargs(cfg),
    )


def student_kwargs(cfg: dict) -> dict:
    return dict(
        num_classes=cfg["num_classes"], eta=cfg["eta"], log_clamp_eps=cfg["log_clamp_eps"], s=cfg["s"],
        delta=cfg["delta"], class_hidden=cfg["class_hidden"], freeze_backbone=cfg["freeze_backbone"],
        batch_size=cfg["student_batch_size"], learning_rate=cfg["student_learning_rate"],
        epochs=cfg["student_epochs"], seed=cfg["seed"], **_backbone_kwargs(cfg),
    )


def okdad_kwargs(cfg: dict) -> dict:
    return dict(
        num_classes=cfg["num_classes"], eta=cfg["eta"], log_clamp_eps=cfg["log_clamp_eps"], s=cfg["s"],
        delta=cfg["delta"], class_hidden=cfg["class_hidden"], actionness_hidden=cfg["actionness_hidden"],
        gating_source=cfg["gating_source"], gate_mode=cfg["gate_mode"], threshold=cfg["actionness_threshold"],
        window_blocks=cfg["okdad_window_blocks"], windows_per_sequence=cfg["windows_per_sequence"],
        freeze_backbone=cfg["freeze_backbone"], batch_size=cfg["okdad_batch_size"],
        learning_rate=cfg["okdad_learning_rate"], epochs=cfg["okdad_epochs"], seed=cfg["seed"],
        **_backbone_kwargs(cfg),
    )
