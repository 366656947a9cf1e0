"""Network pieces: (2+1)D residual backbone, feature head, LSTMs and gating."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn


@dataclass(frozen=True)
class BackboneConfig:
    """Layout of the factored spatiotemporal backbone.

    The 18-layer network corresponds to ``block_widths=(64, 128, 256, 512)``,
    ``blocks_per_stage=2``, ``stem_width=64``, ``feature_dim=512``.
    """

    feature_dim: int = 64
    block_widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    stem_width: int = 8
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if not self.block_widths or min(self.block_widths) < 1:
            raise ValueError("block_widths must be a non-empty list of positive ints")
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))

    def to_dict(self):
        d = asdict(self)
        d["block_widths"] = list(self.block_widths)
        return d


def _mid_channels(c_in, c_out, kt=3, k=3):
    # parameter-matched intermediate width of a factored convolution
    return max(1, (kt * k * k * c_in * c_out) // (k * k * c_in + kt * c_out))


class SpatioTemporalConv(nn.Module):
    """A ``kt x k x k`` convolution factored into spatial then temporal parts."""

    def __init__(self, c_in, c_out, spatial_stride=1, k=3, kt=3):
        super().__init__()
        mid = _mid_channels(c_in, c_out, kt, k)
        self.spatial = nn.Conv3d(c_in, mid, (1, k, k), (1, spatial_stride, spatial_stride), (0, k // 2, k // 2))
        self.temporal = nn.Conv3d(mid, c_out, (kt, 1, 1), 1, (kt // 2, 0, 0))

    def forward(self, x: Tensor) -> Tensor:
        return self.temporal(torch.relu(self.spatial(x)))


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, spatial_stride=1):
        super().__init__()
        self.conv1 = SpatioTemporalConv(c_in, c_out, spatial_stride)
        self.norm1 = nn.GroupNorm(1, c_out)
        self.conv2 = SpatioTemporalConv(c_out, c_out)
        self.norm2 = nn.GroupNorm(1, c_out)
        if c_in != c_out or spatial_stride != 1:
            self.skip = nn.Conv3d(c_in, c_out, 1, (1, spatial_stride, spatial_stride), bias=False)
        else:
            self.skip = None

    def forward(self, x: Tensor) -> Tensor:
        y = torch.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return torch.relu(y + (x if self.skip is None else self.skip(x)))


class Backbone(nn.Module):
    """Maps a ``[B, T, H, W]`` gray frame stack to a ``[B, D]`` feature vector."""

    def __init__(self, config: BackboneConfig, frames: int | None = None):
        super().__init__()
        self.config = config
        self.frames = frames
        w = config.block_widths
        self.stem = SpatioTemporalConv(1, config.stem_width)
        self.stem_norm = nn.GroupNorm(1, config.stem_width)
        layers = []
        c = config.stem_width
        for i, width in enumerate(w):
            for j in range(config.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(ResidualBlock(c, width, stride))
                c = width
        self.stages = nn.Sequential(*layers)
        self.project = nn.Linear(c, config.feature_dim) if c != config.feature_dim else None

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"expected [B, T, H, W] frames, got shape {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != (self.config.height, self.config.width):
            raise ValueError(f"expected {self.config.height}x{self.config.width} frames, got {tuple(x.shape[-2:])}")
        if self.frames is not None and x.shape[2] != self.frames:
            raise ValueError(f"expected {self.frames} frames per stack, got {x.shape[2]}")
        y = torch.relu(self.stem_norm(self.stem(x)))
        y = self.stages(y).mean(dim=(2, 3, 4))
        return y if self.project is None else self.project(y)


def normalize_features(norm: nn.BatchNorm1d, raw: Tensor) -> Tensor:
    """Batch-normalize ``[B, D]`` features; training mode needs ``B >= 2``."""
    if norm.training and raw.shape[0] < 2:
        raise ValueError("batch normalization in training mode needs a batch of at least 2")
    return norm(raw)


def classify(classifier: nn.Linear, x: Tensor) -> Tensor:
    return torch.softmax(classifier(x), dim=-1)


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, width: int, dtype=torch.float32) -> "RecurrentState":
        return cls(torch.zeros(batch, width, dtype=dtype), torch.zeros(batch, width, dtype=dtype))

    def detach(self) -> "RecurrentState":
        return RecurrentState(self.h.detach(), self.c.detach())


def make_lstm_cell(input_size: int, hidden: int) -> nn.LSTMCell:
    cell = nn.LSTMCell(input_size, hidden)
    with torch.no_grad():
        # gate order is (input, forget, cell, output)
        cell.bias_ih[hidden : 2 * hidden].fill_(1.0)
        cell.bias_hh[hidden : 2 * hidden].zero_()
    return cell


def lstm_step(cell: nn.LSTMCell, state: RecurrentState, x: Tensor) -> RecurrentState:
    if state.h.shape[-1] != cell.hidden_size or state.c.shape[-1] != cell.hidden_size:
        raise ValueError(f"state width {state.h.shape[-1]} does not match LSTM hidden size {cell.hidden_size}")
    if x.shape[-1] != cell.input_size:
        raise ValueError(f"input width {x.shape[-1]} does not match LSTM input size {cell.input_size}")
    h, c = cell(x, (state.h, state.c))
    return RecurrentState(h, c)


def gate_memory(state: RecurrentState, y_a) -> RecurrentState:
    """Scale hidden and cell vectors by the actionness probability."""
    y = torch.as_tensor(y_a, dtype=state.h.dtype)
    if y.dim() == 1:
        y = y[:, None]
    return RecurrentState(y * state.h, y * state.c)


class ClassificationHead(nn.Module):
    """Classification LSTM followed by the reconstruction layer."""

    def __init__(self, feature_dim: int, hidden: int):
        super().__init__()
        self.cell = make_lstm_cell(feature_dim, hidden)
        self.reconstruct = nn.Linear(hidden, feature_dim)

    @property
    def hidden(self) -> int:
        return self.cell.hidden_size

    def step(self, state: RecurrentState, x: Tensor) -> tuple[RecurrentState, Tensor]:
        state = lstm_step(self.cell, state, x)
        return state, state.h


class ActionnessHead(nn.Module):
    def __init__(self, feature_dim: int, hidden: int):
        super().__init__()
        self.cell = make_lstm_cell(feature_dim, hidden)
        self.out = nn.Linear(hidden, 1)

    @property
    def hidden(self) -> int:
        return self.cell.hidden_size

    def step(self, state: RecurrentState, x: Tensor) -> tuple[RecurrentState, Tensor]:
        """Returns the new state and the actionness logit (apply sigmoid for y_a)."""
        state = lstm_step(self.cell, state, x)
        return state, self.out(state.h).squeeze(-1)


class TeacherNet(nn.Module):
    """Backbone -> batch norm -> classifier."""

    def __init__(self, backbone_config: BackboneConfig, num_classes: int, t_off: int):
        super().__init__()
        self.backbone = Backbone(backbone_config, frames=t_off)
        self.norm = nn.BatchNorm1d(backbone_config.feature_dim)
        self.classifier = nn.Linear(backbone_config.feature_dim, num_classes)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns ``(x_p, logits)``."""
        x_p = normalize_features(self.norm, self.backbone(x))
        return x_p, self.classifier(x_p)


class OnlineNet(nn.Module):
    """Student network; with ``actionness_hidden`` it is the detector.

    ``gate_mode`` is ``"soft"`` (scale by y_a) or ``"hard"`` (keep the state
    only when y_a exceeds ``hard_threshold``).
    """

    def __init__(
        self,
        backbone_config: BackboneConfig,
        num_classes: int,
        delta: int,
        class_hidden: int = 256,
        actionness_hidden: int | None = None,
        gate_mode: str = "soft",
        hard_threshold: float = 0.5,
    ):
        super().__init__()
        if gate_mode not in ("soft", "hard"):
            raise ValueError("gate_mode must be 'soft' or 'hard'")
        self.backbone = Backbone(backbone_config, frames=delta)
        self.classification = ClassificationHead(backbone_config.feature_dim, class_hidden)
        self.classifier = nn.Linear(backbone_config.feature_dim, num_classes)
        self.actionness = ActionnessHead(backbone_config.feature_dim, actionness_hidden) if actionness_hidden else None
        self.gate_mode = gate_mode
        self.hard_threshold = hard_threshold

    @property
    def has_actionness(self) -> bool:
        return self.actionness is not None

    def init_states(self, batch: int = 1, dtype=torch.float32):
        cls_state = RecurrentState.zeros(batch, self.classification.hidden, dtype)
        act_state = RecurrentState.zeros(batch, self.actionness.hidden, dtype) if self.actionness else None
        return act_state, cls_state

    def gate_value(self, y_a: Tensor) -> Tensor:
        if self.gate_mode == "hard":
            return (y_a > self.hard_threshold).to(y_a.dtype)
        return y_a

    def recurrent_step(self, act_state, cls_state, feature: Tensor, gate: Tensor | None = None):
        """One time step on precomputed backbone features ``[B, D]``.

        ``gate`` overrides the predicted actionness as the gating signal
        (teacher forcing during training).
        """
        act_logit = None
        if self.actionness is not None:
            act_state, act_logit = self.actionness.step(act_state, feature)
            g = self.gate_value(torch.sigmoid(act_logit)) if gate is None else gate
            cls_state = gate_memory(cls_state, g)
        elif gate is not None:
            cls_state = gate_memory(cls_state, gate)
        cls_state, h = self.classification.step(cls_state, feature)
        x_c = self.classification.reconstruct(h)
        return act_state, cls_state, x_c, self.classifier(x_c), act_logit

    def forward_sequence(self, blocks: Tensor, valid: Tensor | None = None, gate: Tensor | None = None) -> dict:
        """Run ``[B, T, delta, H, W]`` blocks; padded blocks (``valid`` False) skip the backbone.

        Returns ``x_c [B,T,D]``, ``logits [B,T,C]`` and ``act_logits [B,T]``
        (or None without an actionness head).
        """
        B, T = blocks.shape[:2]
        dtype = blocks.dtype
        if valid is None:
            valid = torch.ones(B, T, dtype=torch.bool)
        feats = torch.zeros(B, T, self.backbone.config.feature_dim, dtype=dtype)
        if valid.any():
            feats[valid] = self.backbone(blocks[valid])
        act_state, cls_state = self.init_states(B, dtype)
        xs, logits, acts = [], [], []
        for t in range(T):
            g = None if gate is None else gate[:, t]
            act_state, cls_state, x_c, lg, al = self.recurrent_step(act_state, cls_state, feats[:, t], g)
            xs.append(x_c)
            logits.append(lg)
            acts.append(al)
        return {
            "x_c": torch.stack(xs, 1),
            "logits": torch.stack(logits, 1),
            "act_logits": torch.stack(acts, 1) if self.actionness is not None else None,
        }
