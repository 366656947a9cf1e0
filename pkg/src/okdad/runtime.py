"""Streaming inference: one block in, one actionness/class output out."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import sigmoid_weights
from .nets import OnlineNet, RecurrentState
from .sampling import OnlineChunkConfig, chunk_online, truncate_ratio


@dataclass
class BlockOutput:
    t: int
    y_a: float | None
    class_dist: np.ndarray

    @property
    def top1(self) -> int:
        return int(np.argmax(self.class_dist))


@dataclass(frozen=True)
class Segment:
    """Half-open block interval ``[start_block, end_block)`` with a class label."""

    start_block: int
    end_block: int
    label: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.start_block >= self.end_block:
            raise ValueError(f"empty segment [{self.start_block}, {self.end_block})")

    @property
    def length(self) -> int:
        return self.end_block - self.start_block


@dataclass
class StreamState:
    """Recurrent states of both LSTMs and the number of blocks consumed."""

    actionness: RecurrentState | None
    classification: RecurrentState
    t: int = 0

    def nbytes(self) -> int:
        states = [self.classification] + ([self.actionness] if self.actionness is not None else [])
        return sum(s.h.element_size() * s.h.numel() + s.c.element_size() * s.c.numel() for s in states)


def _net(model) -> OnlineNet:
    net = getattr(model, "model_", model)
    if not isinstance(net, OnlineNet):
        raise TypeError("expected a fitted online student/detector or an OnlineNet")
    return net


def stream_init(model) -> StreamState:
    net = _net(model)
    dtype = next(net.parameters()).dtype
    act, cls = net.init_states(1, dtype)
    return StreamState(act, cls, 0)


@torch.no_grad()
def stream_step(model, state: StreamState, block) -> tuple[StreamState, BlockOutput]:
    """Consume one ``[delta, H, W]`` block; uses nothing beyond this block."""
    net = _net(model)
    net.eval()
    cfg = net.backbone.config
    x = torch.as_tensor(np.asarray(block), dtype=next(net.parameters()).dtype)
    if x.shape != (net.backbone.frames, cfg.height, cfg.width):
        raise ValueError(f"block must have shape ({net.backbone.frames}, {cfg.height}, {cfg.width}), got {tuple(x.shape)}")
    feature = net.backbone(x[None])
    act, cls, _, logits, act_logit = net.recurrent_step(state.actionness, state.classification, feature)
    y_a = float(torch.sigmoid(act_logit)[0]) if act_logit is not None else None
    dist = torch.softmax(logits, -1)[0].numpy().astype(np.float64)
    return StreamState(act, cls, state.t + 1), BlockOutput(state.t, y_a, dist)


def run_stream(model, blocks) -> list[BlockOutput]:
    state = stream_init(model)
    outputs = []
    for block in blocks:
        state, out = stream_step(model, state, block)
        outputs.append(out)
    return outputs


@torch.no_grad()
def batched_outputs(model, blocks) -> list[BlockOutput]:
    """Whole-sequence evaluation of the same model (backbone batched over blocks)."""
    net = _net(model)
    net.eval()
    x = torch.as_tensor(np.asarray(blocks), dtype=next(net.parameters()).dtype)[None]
    res = net.forward_sequence(x)
    dists = torch.softmax(res["logits"][0], -1).numpy().astype(np.float64)
    ya = torch.sigmoid(res["act_logits"][0]).numpy() if res["act_logits"] is not None else None
    return [BlockOutput(t, None if ya is None else float(ya[t]), dists[t]) for t in range(len(dists))]


def _segment_from_run(outputs) -> tuple[int, float]:
    w = sigmoid_weights(len(outputs))
    dist = sum(wi * o.class_dist for wi, o in zip(w, outputs))
    label = int(np.argmax(dist))
    mean_ya = float(np.mean([o.y_a for o in outputs]))
    return label, mean_ya * float(dist[label])


def propose_segments(outputs, threshold: float = 0.75) -> list[Segment]:
    """Maximal runs of blocks with ``y_a > threshold``, labelled by sigmoid-weighted vote."""
    segments = []
    run: list[BlockOutput] = []
    for o in list(outputs) + [None]:
        if o is not None and o.y_a is not None and o.y_a > threshold:
            run.append(o)
            continue
        if run:
            label, conf = _segment_from_run(run)
            segments.append(Segment(run[0].t, run[-1].t + 1, label, conf))
            run = []
    return segments


@dataclass
class DetectorStream:
    """A stream plus the accumulator of the currently open segment.

    The accumulator holds the outputs of the open segment only, so memory is
    bounded by the longest action rather than by the stream length.
    """

    model: object
    threshold: float = 0.75
    state: StreamState | None = None
    open_outputs: list = field(default_factory=list)

    def __post_init__(self):
        if self.state is None:
            self.state = stream_init(self.model)

    def push(self, block) -> tuple[BlockOutput, list[Segment]]:
        self.state, out = stream_step(self.model, self.state, block)
        closed = []
        if out.y_a is not None and out.y_a > self.threshold:
            self.open_outputs.append(out)
        elif self.open_outputs:
            closed = self.flush()
        return out, closed

    def flush(self) -> list[Segment]:
        if not self.open_outputs:
            return []
        seg = propose_segments(self.open_outputs, self.threshold)
        self.open_outputs = []
        return seg


def predict_at_ratio(frames, model, r: float, chunk: OnlineChunkConfig | None = None) -> tuple[int, np.ndarray]:
    """Class predicted after observing ``truncate_ratio(N, r)`` frames.

    Streams the blocks of the truncated clip and returns the argmax of the
    sigmoid-weighted sum of per-block distributions, together with that sum.
    """
    net = _net(model)
    if chunk is None:
        chunk = OnlineChunkConfig(getattr(model, "s", 3), net.backbone.frames)
    frames = np.asarray(frames)
    n = truncate_ratio(len(frames), r)
    outputs = run_stream(net, chunk_online(frames[:n], chunk))
    w = sigmoid_weights(len(outputs))
    dist = sum(wi * o.class_dist for wi, o in zip(w, outputs))
    return int(np.argmax(dist)), dist


def write_event_log(outputs, path):
    """CSV with one record per block: ``t, y_a, top1_class, top1_prob``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y_a", "top1_class", "top1_prob"])
        for o in outputs:
            y = "" if o.y_a is None else f"{o.y_a:.6f}"
            w.writerow([o.t, y, o.top1, f"{o.class_dist[o.top1]:.6f}"])


def write_segments(segments, path):
    """Line-delimited JSON records ``start_block, end_block, label, confidence``."""
    with open(path, "w") as fh:
        for s in segments:
            fh.write(json.dumps({"start_block": s.start_block, "end_block": s.end_block,
                                 "label": s.label, "confidence": round(s.confidence, 6)}) + "\n")
