"""Keypoint cropping and the offline/online frame sampling schemes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin


@dataclass(frozen=True)
class OfflineSampleConfig:
    t_off: int = 15
    r_min: float = 0.025
    crop_margin: float = 0.1
    out_height: int = 16
    out_width: int = 16

    def __post_init__(self):
        if self.t_off < 1:
            raise ValueError("t_off must be >= 1")
        if not 0 < self.r_min <= 1:
            raise ValueError("r_min must be in (0, 1]")


@dataclass(frozen=True)
class OnlineChunkConfig:
    s: int = 3
    delta: int = 5

    def __post_init__(self):
        if self.s < 1 or self.delta < 1:
            raise ValueError("stride s and block size delta must be >= 1")

    @property
    def frames_per_block(self) -> int:
        """Original (pre-stride) frames spanned by one block."""
        return self.s * self.delta

    def check_pairs_with(self, t_off: int) -> None:
        if self.s * self.delta != t_off:
            raise ValueError(f"s*delta = {self.s * self.delta} must equal t_off = {t_off}")


# --------------------------------------------------------------------------
# cropping


def crop_box(keypoints_t, frame_shape, margin: float = 0.1):
    """Bounding box ``(r0, r1, c0, c1)`` (inclusive, float) around valid joints.

    Returns ``None`` when no joint lies inside the frame.
    """
    H, W = frame_shape
    kp = np.asarray(keypoints_t, dtype=np.float64).reshape(-1, 2)
    ok = np.isfinite(kp).all(axis=1)
    ok &= (kp[:, 0] >= 0) & (kp[:, 0] <= H - 1) & (kp[:, 1] >= 0) & (kp[:, 1] <= W - 1)
    if not ok.any():
        return None
    kp = kp[ok]
    r0, c0 = kp.min(axis=0)
    r1, c1 = kp.max(axis=0)
    dr, dc = margin * (r1 - r0), margin * (c1 - c0)
    return (
        max(r0 - dr, 0.0),
        min(r1 + dr, H - 1.0),
        max(c0 - dc, 0.0),
        min(c1 + dc, W - 1.0),
    )


def resize(image, out_shape):
    """Bilinear (antialiased) resize of a 2D array."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    if tuple(t.shape[-2:]) == tuple(out_shape):
        return t[0, 0].numpy().copy()
    out = F.interpolate(t, size=tuple(out_shape), mode="bilinear", align_corners=False, antialias=True)
    return out[0, 0].numpy()


def crop_frame(frame, keypoints_t, margin: float = 0.1, out_shape=(16, 16)):
    """Crop ``frame`` to the joint bounding box and resize.

    Returns ``(image, fell_back)``; ``fell_back`` is True when no joint was
    usable and the whole frame was resized instead.
    """
    frame = np.asarray(frame)
    box = crop_box(keypoints_t, frame.shape, margin)
    if box is None:
        return resize(frame, out_shape), True
    r0, r1, c0, c1 = box
    patch = frame[int(math.floor(r0)) : int(math.ceil(r1)) + 1, int(math.floor(c0)) : int(math.ceil(c1)) + 1]
    return resize(patch, out_shape), False


def crop_clip(frames, keypoints, margin: float = 0.1, out_shape=(16, 16)):
    """Crop every frame independently; returns ``[N, h, w]`` float32."""
    out = np.empty((len(frames), *out_shape), np.float32)
    for i, (f, kp) in enumerate(zip(frames, keypoints)):
        out[i], _ = crop_frame(f, kp, margin, out_shape)
    return out


class KeypointCropper(TransformerMixin, BaseEstimator):
    """Stateless transformer turning clips/sequences into cropped frame stacks.

    ``transform`` accepts a list of objects with ``frames`` and ``keypoints``
    and returns a list of ``[N, out_height, out_width]`` arrays.
    """

    def __init__(self, margin=0.1, out_height=16, out_width=16):
        self.margin = margin
        self.out_height = out_height
        self.out_width = out_width

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        shape = (self.out_height, self.out_width)
        return [crop_clip(item.frames, item.keypoints, self.margin, shape) for item in X]


# --------------------------------------------------------------------------
# temporal sampling


def truncate_ratio(n_frames: int, r: float) -> int:
    """Number of observed frames ``max(1, floor(r * N))``."""
    if not r > 0:
        raise ValueError(f"observation ratio must be > 0, got {r}")
    if r > 1:
        raise ValueError(f"observation ratio must be <= 1, got {r}")
    if n_frames < 1:
        raise ValueError("sequence must have at least one frame")
    # tolerance absorbs decimal ratios such as 0.29 * 100 = 28.999999999999996
    return max(1, int(math.floor(r * n_frames + 1e-9)))


def subwindow_bounds(n_partial: int, t_off: int) -> np.ndarray:
    """``t_off + 1`` boundaries splitting ``n_partial`` frames into near-equal parts."""
    return (np.arange(t_off + 1) * n_partial) // t_off


def offline_indices(n_partial: int, t_off: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Frame indices picked by offline sampling; ``-1`` marks a black frame.

    ``rng=None`` selects the deterministic mode (centre frame of each
    subwindow).
    """
    if n_partial < 1:
        raise ValueError("n_partial must be >= 1")
    if n_partial < t_off:
        return np.concatenate([np.arange(n_partial), np.full(t_off - n_partial, -1)])
    b = subwindow_bounds(n_partial, t_off)
    lo, hi = b[:-1], b[1:]
    if rng is None:
        return lo + (hi - lo - 1) // 2
    return lo + np.floor(rng.random(t_off) * (hi - lo)).astype(np.int64)


def sample_offline(frames, n_partial: int, t_off: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Normalized ``[t_off, H, W]`` stack from the first ``n_partial`` frames."""
    frames = np.asarray(frames)
    idx = offline_indices(min(n_partial, len(frames)), t_off, rng)
    out = np.zeros((t_off, *frames.shape[1:]), dtype=frames.dtype)
    real = idx >= 0
    out[real] = frames[idx[real]]
    return out


def num_blocks(n_frames: int, s: int, delta: int) -> int:
    """``T_on`` for a sequence of ``n_frames`` original frames (stride first)."""
    return -(-(-(-n_frames // s)) // delta)


def chunk_online(frames, config: OnlineChunkConfig) -> np.ndarray:
    """Stride by ``s`` then group into ``[T_on, delta, H, W]`` blocks.

    The last block is padded with black frames.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("cannot chunk an empty sequence")
    strided = frames[:: config.s]
    t_on = -(-len(strided) // config.delta)
    out = np.zeros((t_on * config.delta, *frames.shape[1:]), dtype=frames.dtype)
    out[: len(strided)] = strided
    return out.reshape(t_on, config.delta, *frames.shape[1:])


def block_frame_span(t: int, config: OnlineChunkConfig) -> tuple[int, int]:
    """Original-frame half-open span ``[start, end)`` covered by 0-based block ``t``."""
    return t * config.frames_per_block, (t + 1) * config.frames_per_block
