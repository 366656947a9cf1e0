"""Training machinery shared by the estimators.

Covers observation-ratio sampling, teacher-feature caching, detection block
labels, window sampling and the freeze/divergence guards.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .sampling import OnlineChunkConfig, block_frame_span, num_blocks, sample_offline


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


class CacheMismatch(ValueError):
    """A teacher cache was built for a different dataset or chunking."""


def sample_training_ratio(rng: np.random.Generator, r_min: float) -> float:
    """Draw ``u ~ U[r_min, 2]`` and clip it to 1, favouring full sequences."""
    if not 0 < r_min <= 1:
        raise ValueError("r_min must be in (0, 1]")
    return float(min(rng.uniform(r_min, 2.0), 1.0))


def fingerprint_clips(clips, labels=None) -> str:
    """Content hash of preprocessed clips (and labels) used to pair caches with data."""
    h = hashlib.sha256()
    for i, c in enumerate(clips):
        a = np.ascontiguousarray(c, dtype=np.float32)
        h.update(np.asarray(a.shape, np.int64).tobytes())
        h.update(a.tobytes())
        if labels is not None:
            h.update(np.int64(labels[i]).tobytes())
    return h.hexdigest()


def check_finite(loss: torch.Tensor, step: int, terms: dict | None = None):
    if not torch.isfinite(loss):
        detail = ""
        if terms:
            detail = ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
        raise TrainingDiverged(f"loss is {float(loss)} at step {step}" + (f" ({detail})" if detail else ""))


class FreezeGuard:
    """Byte snapshot of parameters that must not change during training."""

    def __init__(self, params: dict[str, torch.nn.Parameter]):
        self.params = params
        self.snapshot = {k: p.detach().numpy().tobytes() for k, p in params.items()}

    def verify(self):
        changed = [k for k, p in self.params.items() if p.detach().numpy().tobytes() != self.snapshot[k]]
        if changed:
            raise AssertionError(f"frozen parameters were updated: {', '.join(changed)}")


# --------------------------------------------------------------------------
# teacher cache


@dataclass
class TeacherFeatureCache:
    """Per clip, the teacher's normalized feature and error at each block horizon.

    ``x_p[i]`` is ``[T_on_i, D]`` and ``epsilon[i]`` is ``[T_on_i]``; entry
    ``t`` (0-based) uses the first ``min((t+1)*s*delta, N)`` frames.
    """

    x_p: list[np.ndarray]
    epsilon: list[np.ndarray]
    s: int
    delta: int
    dataset_hash: str
    meta: dict = field(default_factory=dict)

    def check(self, dataset_hash: str, s: int, delta: int):
        if (s, delta) != (self.s, self.delta):
            raise CacheMismatch(f"cache built for s={self.s}, delta={self.delta}; requested s={s}, delta={delta}")
        if dataset_hash != self.dataset_hash:
            raise CacheMismatch("teacher cache was built for a different dataset (hash mismatch)")

    def padded(self, indices, T: int):
        D = self.x_p[0].shape[1]
        xp = np.zeros((len(indices), T, D), np.float32)
        eps = np.ones((len(indices), T), np.float32)
        for row, i in enumerate(indices):
            n = min(len(self.x_p[i]), T)
            xp[row, :n] = self.x_p[i][:n]
            eps[row, :n] = self.epsilon[i][:n]
        return torch.from_numpy(xp), torch.from_numpy(eps)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"lengths": np.asarray([len(x) for x in self.x_p], np.int64)}
        arrays["x_p"] = np.concatenate(self.x_p) if self.x_p else np.zeros((0, 0), np.float32)
        arrays["epsilon"] = np.concatenate(self.epsilon) if self.epsilon else np.zeros(0, np.float32)
        arrays["meta"] = np.frombuffer(
            json.dumps({"s": self.s, "delta": self.delta, "dataset_hash": self.dataset_hash, **self.meta}).encode(), np.uint8
        )
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            bounds = np.concatenate([[0], np.cumsum(data["lengths"])])
            xp, eps = data["x_p"], data["epsilon"]
            x_p = [xp[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
            epsilon = [eps[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        s, delta, h = meta.pop("s"), meta.pop("delta"), meta.pop("dataset_hash")
        return cls(x_p, epsilon, s, delta, h, meta)


def horizons_for_clip(n_frames: int, chunk: OnlineChunkConfig) -> np.ndarray:
    """Frames observed by the teacher for each block of a clip: ``min(t*s*delta, N)``."""
    t = np.arange(1, num_blocks(n_frames, chunk.s, chunk.delta) + 1)
    return np.minimum(t * chunk.frames_per_block, n_frames)


@torch.no_grad()
def teacher_features(teacher_net, clips, horizons, t_off: int, batch: int = 64):
    """Deterministic teacher ``(x_p, probs)`` for ``clips[k][:horizons[k]]``."""
    teacher_net.eval()
    xs, ps = [], []
    for a in range(0, len(clips), batch):
        stack = np.stack([sample_offline(c, n, t_off) for c, n in zip(clips[a : a + batch], horizons[a : a + batch])])
        x_p, logits = teacher_net(torch.from_numpy(stack))
        xs.append(x_p.numpy())
        ps.append(torch.softmax(logits, -1).numpy())
    if not xs:
        return np.zeros((0, 0), np.float32), np.zeros((0, 0), np.float32)
    return np.concatenate(xs), np.concatenate(ps)


def build_teacher_cache(teacher_net, clips, labels, chunk: OnlineChunkConfig, t_off: int,
                        dataset_hash: str | None = None) -> TeacherFeatureCache:
    flat_clips, flat_n, owner = [], [], []
    for i, c in enumerate(clips):
        for n in horizons_for_clip(len(c), chunk):
            flat_clips.append(c)
            flat_n.append(int(n))
            owner.append(i)
    x_p, probs = teacher_features(teacher_net, flat_clips, flat_n, t_off)
    owner = np.asarray(owner)
    xs, eps = [], []
    for i in range(len(clips)):
        rows = np.flatnonzero(owner == i)
        xs.append(x_p[rows].astype(np.float32))
        eps.append((1.0 - probs[rows, int(labels[i])]).astype(np.float32))
    h = dataset_hash if dataset_hash is not None else fingerprint_clips(clips, labels)
    return TeacherFeatureCache(xs, eps, chunk.s, chunk.delta, h)


# --------------------------------------------------------------------------
# detection targets


@dataclass
class BlockTargets:
    """Per-block supervision for one long sequence.

    ``actionness`` is 1 when at least half of the block's original frames
    fall inside ground-truth intervals. ``action_id`` indexes the interval
    covering most of the block (-1 for non-action blocks).
    """

    actionness: np.ndarray
    action_id: np.ndarray
    class_label: np.ndarray
    horizon: np.ndarray
    x_p: np.ndarray | None = None
    epsilon: np.ndarray | None = None


def block_targets(n_frames: int, intervals, chunk: OnlineChunkConfig) -> BlockTargets:
    T = num_blocks(n_frames, chunk.s, chunk.delta)
    act = np.zeros(T, np.int64)
    aid = np.full(T, -1, np.int64)
    lab = np.full(T, -1, np.int64)
    hor = np.zeros(T, np.int64)
    for t in range(T):
        a, b = block_frame_span(t, chunk)
        b = min(b, n_frames)
        cover = [max(0, min(b, iv.end_frame) - max(a, iv.start_frame)) for iv in intervals]
        if not cover:
            continue
        if 2 * sum(cover) >= (b - a):
            k = int(np.argmax(cover))
            iv = intervals[k]
            act[t], aid[t], lab[t] = 1, k, iv.label
            hor[t] = min(max(b - iv.start_frame, 1), iv.length)
    return BlockTargets(act, aid, lab, hor)


def ground_truth_blocks(targets: BlockTargets):
    """Block-level ground-truth segments: maximal runs sharing an action id."""
    from .runtime import Segment

    segs = []
    t, T = 0, len(targets.action_id)
    while t < T:
        k = targets.action_id[t]
        if k < 0:
            t += 1
            continue
        u = t
        while u < T and targets.action_id[u] == k:
            u += 1
        segs.append(Segment(t, u, int(targets.class_label[t]), 1.0))
        t = u
    return segs


def attach_teacher_targets(teacher_net, sequences, targets: list[BlockTargets], intervals, t_off: int):
    """Fill ``x_p``/``epsilon`` of each ``BlockTargets`` from the teacher (in place)."""
    flat_clips, flat_n, where = [], [], []
    for si, (frames, tg, ivs) in enumerate(zip(sequences, targets, intervals)):
        for t in np.flatnonzero(tg.action_id >= 0):
            iv = ivs[tg.action_id[t]]
            flat_clips.append(frames[iv.start_frame : iv.end_frame])
            flat_n.append(int(tg.horizon[t]))
            where.append((si, int(t)))
    x_p, probs = teacher_features(teacher_net, flat_clips, flat_n, t_off)
    D = teacher_net.norm.num_features
    for tg in targets:
        tg.x_p = np.zeros((len(tg.actionness), D), np.float32)
        tg.epsilon = np.ones(len(tg.actionness), np.float32)
    for row, (si, t) in enumerate(where):
        tg = targets[si]
        tg.x_p[t] = x_p[row]
        tg.epsilon[t] = 1.0 - probs[row, tg.class_label[t]]
    return targets


def sample_window(rng: np.random.Generator, targets: BlockTargets, window: int) -> int:
    """Start block of a training window mixing action and non-action blocks."""
    T = len(targets.actionness)
    if T <= window:
        return 0
    starts = np.arange(T - window + 1)
    csum = np.concatenate([[0], np.cumsum(targets.actionness)])
    n_act = csum[starts + window] - csum[starts]
    mixed = starts[(n_act > 0) & (n_act < window)]
    pool = mixed if len(mixed) else starts
    return int(pool[rng.integers(len(pool))])
