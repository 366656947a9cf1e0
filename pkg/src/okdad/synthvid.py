"""Deterministic synthetic grayscale action videos.

Each class is a parametric motion of a five-joint stick figure (head, two
hands, two feet) drawn as a bright blurred skeleton on a dark noisy
background. Classes 0/1 and 2/3 are exact time reversals of each other, so a
model that ignores frame order cannot separate them.

Frames are quantized to 8-bit gray levels at generation time; the on-disk
format stores them as ``uint8`` and the round trip is therefore lossless.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng

JOINTS_PER_ACTOR = 5
MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "okdad-synthvid"
FORMAT_VERSION = 1

# Rest pose angles (radians from straight down, positive = away from body).
_ARM_REST = 0.3
_LEG_REST = 0.25


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 10
    frame_height: int = 48
    frame_width: int = 48
    min_clip_len: int = 36
    max_clip_len: int = 60
    gap_len_range: tuple[int, int] = (30, 45)
    actors_per_clip: int = 1
    intensity_noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        errors = []
        if not 2 <= self.num_classes <= len(_CLASS_MOTIONS):
            errors.append(f"num_classes must be in [2, {len(_CLASS_MOTIONS)}], got {self.num_classes}")
        if self.min_clip_len < 1:
            errors.append("min_clip_len must be >= 1")
        if self.min_clip_len > self.max_clip_len:
            errors.append("min_clip_len must be <= max_clip_len")
        if self.frame_height < 16 or self.frame_width < 16:
            errors.append("frame dimensions must be >= 16")
        if self.actors_per_clip not in (1, 2):
            errors.append("actors_per_clip must be 1 or 2")
        lo, hi = self.gap_len_range
        if lo < 0 or lo > hi:
            errors.append("gap_len_range must satisfy 0 <= lo <= hi")
        if self.intensity_noise_std < 0:
            errors.append("intensity_noise_std must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))
        object.__setattr__(self, "gap_len_range", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gap_len_range"] = list(self.gap_len_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "gap_len_range" in d:
            d["gap_len_range"] = tuple(d["gap_len_range"])
        return cls(**d)

    @property
    def joints(self) -> int:
        return JOINTS_PER_ACTOR * self.actors_per_clip


@dataclass
class LabeledClip:
    """A segmented action clip.

    ``frames`` is ``[N, H, W]`` float32 in [0, 1]; ``keypoints`` is
    ``[N, J, 2]`` holding (row, col) pixel coordinates.
    """

    frames: np.ndarray
    keypoints: np.ndarray
    label: int

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class ActionInterval:
    start_frame: int
    end_frame: int
    label: int

    def __post_init__(self):
        if self.start_frame >= self.end_frame:
            raise ValueError(f"empty interval [{self.start_frame}, {self.end_frame})")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


@dataclass
class LongSequence:
    """An untrimmed stream. Keypoints of frames with no visible actor are NaN."""

    frames: np.ndarray
    keypoints: np.ndarray
    intervals: list[ActionInterval] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


# --------------------------------------------------------------------------
# motion templates


def _ramp(p):
    return 0.5 - 0.5 * np.cos(np.pi * p)


def _pose(p, arm_l=None, arm_r=None, leg_l=None, leg_r=None, crouch=None):
    n = len(p)
    rest_a = np.full(n, _ARM_REST)
    rest_l = np.full(n, _LEG_REST)
    return {
        "arm_l": rest_a if arm_l is None else arm_l,
        "arm_r": rest_a if arm_r is None else arm_r,
        "leg_l": rest_l if leg_l is None else leg_l,
        "leg_r": rest_l if leg_r is None else leg_r,
        "crouch": np.zeros(n) if crouch is None else crouch,
    }


def _raise(p):
    return _ARM_REST + (math.pi - 0.35 - _ARM_REST) * _ramp(p)


_CLASS_MOTIONS = [
    lambda p, a: _pose(p, arm_r=_raise(p)),
    lambda p, a: _pose(p, arm_r=_raise(1.0 - p)),
    lambda p, a: _pose(p, arm_l=_raise(p)),
    lambda p, a: _pose(p, arm_l=_raise(1.0 - p)),
    lambda p, a: _pose(
        p,
        arm_l=1.9 + 0.6 * a * np.sin(4 * np.pi * p),
        arm_r=1.9 - 0.6 * a * np.sin(4 * np.pi * p),
    ),
    lambda p, a: _pose(p, leg_r=_LEG_REST + 1.3 * a * np.sin(np.pi * p)),
    lambda p, a: _pose(
        p,
        leg_l=_LEG_REST + 0.5 * a * np.sin(4 * np.pi * p),
        leg_r=_LEG_REST - 0.5 * a * np.sin(4 * np.pi * p),
    ),
    lambda p, a: _pose(
        p,
        leg_l=_LEG_REST + 0.7 * a * np.sin(np.pi * p),
        leg_r=_LEG_REST + 0.7 * a * np.sin(np.pi * p),
        crouch=0.45 * a * np.sin(np.pi * p),
    ),
    lambda p, a: _pose(
        p,
        arm_l=_ARM_REST - 0.9 * a * np.abs(np.sin(3 * np.pi * p)),
        arm_r=_ARM_REST - 0.9 * a * np.abs(np.sin(3 * np.pi * p)),
    ),
    lambda p, a: _pose(
        p,
        arm_l=_ARM_REST + 2.3 * a * np.sin(np.pi * p) ** 2,
        arm_r=_ARM_REST + 2.3 * a * np.sin(np.pi * p) ** 2,
        leg_l=_LEG_REST + 0.45 * a * np.sin(np.pi * p) ** 2,
        leg_r=_LEG_REST + 0.45 * a * np.sin(np.pi * p) ** 2,
    ),
]

NUM_MOTION_TEMPLATES = len(_CLASS_MOTIONS)


_DEFAULT_BODY = {"arm": 0.9, "leg": 1.0, "head": 0.45, "lean": 0.0}


def _skeleton(pose, center, scale, body=None):
    """Return joint positions ``[n, 5, 2]`` and segment endpoints ``[n, 6, 2, 2]``.

    ``body`` sets limb proportions (relative to ``scale``) and a torso lean
    in radians.
    """
    body = _DEFAULT_BODY if body is None else body
    cr, cc = center
    n = len(pose["arm_l"])
    L = scale
    crouch = pose["crouch"]
    hip = np.stack([np.full(n, cr + 0.4 * L) + crouch * L, np.full(n, cc)], axis=-1)
    lean = np.array([-math.cos(body["lean"]), math.sin(body["lean"])])
    neck = hip + L * lean
    head = neck + body["head"] * L * lean

    def limb(origin, angle, length, side):
        # side=-1 draws toward smaller column indices (actor's right in image)
        return origin + np.reshape(length, (-1, 1)) * np.stack([np.cos(angle), side * np.sin(angle)], axis=-1)

    hand_l = limb(neck, pose["arm_l"] - body["lean"], body["arm"] * L, +1)
    hand_r = limb(neck, pose["arm_r"] + body["lean"], body["arm"] * L, -1)
    leg_len = body["leg"] * L * (1.0 - 0.5 * crouch)
    foot_l = limb(hip, pose["leg_l"], leg_len, +1)
    foot_r = limb(hip, pose["leg_r"], leg_len, -1)
    joints = np.stack([head, hand_l, hand_r, foot_l, foot_r], axis=1)
    segments = np.stack(
        [
            np.stack([neck, hip], 1),
            np.stack([neck, head], 1),
            np.stack([neck, hand_l], 1),
            np.stack([neck, hand_r], 1),
            np.stack([hip, foot_l], 1),
            np.stack([hip, foot_r], 1),
        ],
        axis=1,
    )
    return joints, segments


def _render(segments, shape, width=1.1):
    """Rasterize blurred line segments; ``segments`` is ``[n, S, 2, 2]``."""
    H, W = shape
    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    a = segments[:, :, 0, :, None, None]  # [n,S,2,1,1]
    ab = segments[:, :, 1, :, None, None] - a
    denom = np.maximum(ab[:, :, 0] ** 2 + ab[:, :, 1] ** 2, 1e-9)
    dr0 = rows - a[:, :, 0]
    dc0 = cols - a[:, :, 1]
    t = np.clip((dr0 * ab[:, :, 0] + dc0 * ab[:, :, 1]) / denom, 0.0, 1.0)
    d2 = (dr0 - t * ab[:, :, 0]) ** 2 + (dc0 - t * ab[:, :, 1]) ** 2
    return np.exp(-d2.min(axis=1) / (2 * width**2))


def _clutter(rng, shape, amplitude, cells=6):
    """Static smooth background texture: a coarse random grid, bilinearly upsampled."""
    H, W = shape
    grid = rng.uniform(-1.0, 1.0, size=(cells, cells))
    rows = np.linspace(0, cells - 1, H)
    cols = np.linspace(0, cells - 1, W)
    tmp = np.stack([np.interp(rows, np.arange(cells), grid[:, j]) for j in range(cells)], axis=1)
    return amplitude * np.stack([np.interp(cols, np.arange(cells), r) for r in tmp])


def _finish(canvas, rng, noise_std, background=0.06, gain=0.9, clutter=0.0):
    img = background + clutter + gain * canvas + rng.normal(0.0, noise_std, size=canvas.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.float32) / np.float32(255.0)


def _actor_track(config, class_id, n, rng, slot=0, slots=1):
    H, W = config.frame_height, config.frame_width
    scale = min(H, W) * rng.uniform(0.22, 0.28) / (1.0 if slots == 1 else 1.4)
    amp = rng.uniform(0.5, 1.5)
    col_lo = W * (slot + 0.35) / slots
    col_hi = W * (slot + 0.65) / slots
    center = (H * rng.uniform(0.45, 0.55), rng.uniform(col_lo, col_hi))
    drift = rng.uniform(-0.06, 0.06, size=2) * scale
    # per-actor style: pace (time warp and start/end phase), proportions, lean, fidgeting
    u = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    p0, p1 = rng.uniform(0.0, 0.1), rng.uniform(0.9, 1.0)
    phase = p0 + (p1 - p0) * u ** rng.uniform(0.7, 1.4)
    body = {
        "arm": 0.9 * rng.uniform(0.85, 1.1),
        "leg": rng.uniform(0.85, 1.1),
        "head": 0.45 * rng.uniform(0.8, 1.2),
        "lean": rng.uniform(-0.3, 0.3),
    }
    pose = _CLASS_MOTIONS[class_id](phase, amp)
    jitter = {}
    for k, v in pose.items():
        if k == "crouch":
            jitter[k] = v
            continue
        sway = rng.uniform(0.0, 0.45) * np.sin(2 * np.pi * (rng.uniform(0.5, 2.0) * u + rng.uniform()))
        jitter[k] = v + sway + rng.normal(0.0, 0.06, size=n)
    joints, segs = _skeleton(jitter, center, scale, body)
    offset = drift[None, :] * (phase[:, None] - 0.5)
    return joints + offset[:, None, :], segs + offset[:, None, None, :], center, scale


def _clip_keypoints(kp, H, W):
    kp = kp.copy()
    kp[..., 0] = np.clip(kp[..., 0], 0.0, H - 1.0)
    kp[..., 1] = np.clip(kp[..., 1], 0.0, W - 1.0)
    return kp.astype(np.float32)


def _scene(config, rng):
    """Lighting and static background shared by every frame of one recording."""
    H, W = config.frame_height, config.frame_width
    return {
        "noise_std": config.intensity_noise_std * rng.uniform(0.5, 1.5),
        "background": rng.uniform(0.06, 0.14),
        "gain": rng.uniform(0.45, 0.95),
        "clutter": _clutter(rng, (H, W), rng.uniform(0.05, 0.25)),
    }


def gen_clip(config: GeneratorConfig, class_id: int, seed: int, length: int | None = None, scene=None) -> LabeledClip:
    """Generate one labeled clip; a pure function of ``(config, class_id, seed, scene)``.

    ``scene`` (lighting and background) is drawn from the seed when omitted.
    """
    if not 0 <= class_id < config.num_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {config.num_classes})")
    rng = make_rng(seed, "clip", class_id)
    n = int(length) if length is not None else int(rng.integers(config.min_clip_len, config.max_clip_len + 1))
    H, W = config.frame_height, config.frame_width
    joints, segs = [], []
    for slot in range(config.actors_per_clip):
        j, s, _, _ = _actor_track(config, class_id, n, rng, slot, config.actors_per_clip)
        joints.append(j)
        segs.append(s)
    canvas = _render(np.concatenate(segs, axis=1), (H, W), width=rng.uniform(0.8, 1.8))
    own = _scene(config, rng)
    frames = _finish(canvas, rng, **(own if scene is None else scene))
    keypoints = _clip_keypoints(np.concatenate(joints, axis=1), H, W)
    return LabeledClip(frames=frames, keypoints=keypoints, label=int(class_id))


def _idle(config, n, rng, scene):
    """Idle gap: either an empty scene or a stationary actor in rest pose."""
    H, W = config.frame_height, config.frame_width
    J = config.joints
    if n == 0:
        return np.zeros((0, H, W), np.float32), np.zeros((0, J, 2), np.float32)
    if rng.random() < 0.5:
        frames = _finish(np.zeros((n, H, W)), rng, **scene)
        return frames, np.full((n, J, 2), np.nan, np.float32)
    joints, segs = [], []
    for slot in range(config.actors_per_clip):
        # a rest pose is the p=0 frame of class 0 with the arm held down
        scale = min(H, W) * rng.uniform(0.22, 0.28) / (1.0 if config.actors_per_clip == 1 else 1.4)
        col = W * (slot + rng.uniform(0.35, 0.65)) / config.actors_per_clip
        pose = _pose(np.zeros(n))
        pose = {k: v + (rng.normal(0.0, 0.01, size=n) if k != "crouch" else 0.0) for k, v in pose.items()}
        j, s = _skeleton(pose, (H * rng.uniform(0.45, 0.55), col), scale)
        joints.append(j)
        segs.append(s)
    canvas = _render(np.concatenate(segs, axis=1), (H, W))
    frames = _finish(canvas, rng, **scene)
    return frames, _clip_keypoints(np.concatenate(joints, axis=1), H, W)


def gen_sequence(config: GeneratorConfig, num_actions: int, seed: int) -> LongSequence:
    """Concatenate ``num_actions`` clips separated by idle gaps.

    Gaps are placed before the first action, between actions and after the
    last one, each with a length drawn from ``gap_len_range``.
    """
    if num_actions < 1:
        raise ValueError("num_actions must be >= 1")
    rng = make_rng(seed, "sequence")
    scene = _scene(config, rng)
    lo, hi = config.gap_len_range
    frames, kps, intervals = [], [], []
    cursor = 0
    for k in range(num_actions + 1):
        gap = int(rng.integers(lo, hi + 1))
        f, kp = _idle(config, gap, rng, scene)
        frames.append(f)
        kps.append(kp)
        cursor += gap
        if k == num_actions:
            break
        label = int(rng.integers(config.num_classes))
        clip = gen_clip(config, label, int(rng.integers(2**31)), scene=scene)
        frames.append(clip.frames)
        kps.append(clip.keypoints)
        intervals.append(ActionInterval(cursor, cursor + len(clip), label))
        cursor += len(clip)
    seq = LongSequence(np.concatenate(frames), np.concatenate(kps), intervals)
    assert cursor == len(seq.frames)
    return seq


# --------------------------------------------------------------------------
# datasets on disk


class DatasetError(Exception):
    """Raised when a dataset directory is missing or corrupt."""


def make_clip_dataset(config: GeneratorConfig, num_clips: int, seed: int | None = None) -> tuple[list[LabeledClip], list[int]]:
    """Class-balanced clips plus the per-item seeds used to generate them."""
    seed = config.seed if seed is None else seed
    rng = make_rng(seed, "clip-dataset")
    seeds = [int(s) for s in rng.integers(0, 2**31, size=num_clips)]
    clips = [gen_clip(config, i % config.num_classes, s) for i, s in enumerate(seeds)]
    return clips, seeds


def make_sequence_dataset(
    config: GeneratorConfig, num_sequences: int, num_actions: int, seed: int | None = None
) -> tuple[list[LongSequence], list[int]]:
    seed = config.seed if seed is None else seed
    rng = make_rng(seed, "sequence-dataset")
    seeds = [int(s) for s in rng.integers(0, 2**31, size=num_sequences)]
    return [gen_sequence(config, num_actions, s) for s in seeds], seeds


def make_splits(n: int, seed: int, test_fraction: float = 0.2, val_fraction_of_train: float = 0.05) -> dict[str, list[int]]:
    """Shuffle indices into train/val/test; validation is carved out of train."""
    order = make_rng(seed, "splits").permutation(n)
    n_test = int(round(n * test_fraction))
    test = sorted(int(i) for i in order[:n_test])
    train = [int(i) for i in order[n_test:]]
    n_val = int(round(len(train) * val_fraction_of_train)) if len(train) > 1 else 0
    val = sorted(train[:n_val])
    train = sorted(train[n_val:])
    return {"train": train, "val": val, "test": test}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(items, directory, config: GeneratorConfig | None = None, seeds=None, splits=None, seed: int = 0) -> dict:
    """Write items (all clips or all sequences) plus ``manifest.json``.

    Returns the manifest. Splits default to an 80/20 train/test partition
    with 5% of train held out for validation.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = list(items)
    if not items:
        raise ValueError("cannot write an empty dataset")
    kind = "clips" if isinstance(items[0], LabeledClip) else "sequences"
    splits = splits if splits is not None else make_splits(len(items), seed)
    entries = []
    for i, item in enumerate(items):
        name = f"item_{i:05d}.npz"
        path = directory / name
        frames = np.round(np.asarray(item.frames, np.float64) * 255.0).astype(np.uint8)
        payload = {"frames": frames, "keypoints": np.asarray(item.keypoints, np.float32)}
        entry = {"file": name, "num_frames": int(len(item.frames))}
        if kind == "clips":
            payload["label"] = np.asarray(item.label, np.int64)
            entry["label"] = int(item.label)
        else:
            payload["intervals"] = np.asarray(
                [[iv.start_frame, iv.end_frame, iv.label] for iv in item.intervals], np.int64
            ).reshape(-1, 3)
            entry["num_actions"] = len(item.intervals)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
        entry["sha256"] = _sha256(path)
        if seeds is not None:
            entry["seed"] = int(seeds[i])
        entries.append(entry)
    total = len(items)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config.to_dict() if config is not None else None,
        "seed": int(seed),
        "items": entries,
        "splits": splits,
        "split_fractions": {k: len(v) / total for k, v in splits.items()},
    }
    manifest["dataset_hash"] = dataset_hash(manifest)
    tmp = directory / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(directory / MANIFEST_NAME)
    return manifest


def dataset_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "dataset_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"missing dataset manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt dataset manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME or "items" not in manifest:
        raise DatasetError(f"{path} is not an {FORMAT_NAME} manifest")
    return manifest


def load_dataset(directory, split: str | None = None):
    """Load items (optionally one split). Returns ``(items, manifest)``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    indices = range(len(manifest["items"])) if split is None else manifest["splits"][split]
    items = []
    for i in indices:
        entry = manifest["items"][i]
        path = directory / entry["file"]
        if path.is_file() and "sha256" in entry and _sha256(path) != entry["sha256"]:
            raise DatasetError(f"checksum mismatch for dataset item {path}")
        try:
            with np.load(path) as data:
                frames = data["frames"].astype(np.float32) / np.float32(255.0)
                kp = data["keypoints"].astype(np.float32)
                if manifest["kind"] == "clips":
                    items.append(LabeledClip(frames, kp, int(data["label"])))
                else:
                    ivs = [ActionInterval(int(a), int(b), int(c)) for a, b, c in data["intervals"]]
                    items.append(LongSequence(frames, kp, ivs))
        except (OSError, KeyError, ValueError) as exc:
            raise DatasetError(f"cannot read dataset item {path}: {exc}") from exc
    return items, manifest
