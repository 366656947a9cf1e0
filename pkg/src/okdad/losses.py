"""Teacher, student and detector losses with sigmoid temporal weighting.

All losses take class *logits* (cross-entropy is computed with
``log_softmax``) and are differentiable with respect to features and logits.
Logarithm arguments are clamped to ``[log_clamp_eps, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass(frozen=True)
class TeacherLossConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 2.0 / 3.0
    log_clamp_eps: float = 1e-7

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not 0 < self.log_clamp_eps < 0.5:
            raise ValueError("log_clamp_eps must be in (0, 0.5)")


@dataclass(frozen=True)
class StudentLossConfig:
    eta: float = 1.0
    log_clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0 < self.log_clamp_eps < 0.5:
            raise ValueError("log_clamp_eps must be in (0, 0.5)")


def cosine_sim(u, v):
    """Cosine of the angle between two non-zero vectors (last axis)."""
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return (u * v).sum(-1) / (nu * nv)


def _unit(x: Tensor) -> Tensor:
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True).clamp_min(1e-12)


def _neg_log(x: Tensor, eps: float) -> Tensor:
    return -torch.log(x.clamp(eps, 1.0))


def _check_labels(labels: Tensor, num_classes: int):
    if labels.numel() and (int(labels.max()) >= num_classes or int(labels.min()) < 0):
        raise ValueError(f"labels must lie in [0, {num_classes})")


def teacher_loss(x_p: Tensor, logits: Tensor, labels, r: float, config: TeacherLossConfig = TeacherLossConfig()):
    """Ratio-scaled cross-entropy plus pairwise cosine (dis)similarity terms.

    Returns ``(loss, terms)`` where ``terms`` holds the unscaled
    ``cross_entropy``, ``similarity`` and ``dissimilarity`` parts and the
    ``scale`` ``r ** gamma``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if x_p.shape[0] < 1:
        raise ValueError("batch must not be empty")
    if not 0 < r <= 1:
        raise ValueError("observation ratio must be in (0, 1]")
    _check_labels(labels, logits.shape[-1])
    ce = F.cross_entropy(logits, labels)
    unit = _unit(x_p)
    half = (unit @ unit.T + 1.0) / 2.0
    B = x_p.shape[0]
    upper = torch.triu(torch.ones(B, B, dtype=torch.bool), diagonal=1)
    same = (labels[:, None] == labels[None, :]) & upper
    diff = (labels[:, None] != labels[None, :]) & upper
    zero = x_p.new_zeros(())
    n_same, n_diff = int(same.sum()), int(diff.sum())
    sim = _neg_log(half[same], config.log_clamp_eps).sum() / n_same if n_same else zero
    dis = _neg_log(1.0 - half[diff], config.log_clamp_eps).sum() / n_diff if n_diff else zero
    scale = float(r) ** config.gamma
    loss = scale * (ce + config.alpha * sim + config.beta * dis)
    return loss, {"cross_entropy": ce, "similarity": sim, "dissimilarity": dis, "scale": scale}


def sigmoid_weights(T: int) -> np.ndarray:
    """Per-step weights sampled from a sigmoid over [-2, 2]; they sum to 1."""
    T = int(T)
    if T <= 0:
        raise ValueError("T must be >= 1")
    if T == 1:
        return np.ones(1)
    t = np.arange(T, dtype=np.float64)
    z = 4.0 * t / (T - 1) - 2.0
    return (2.0 / T) / (1.0 + np.exp(-z))


def sigmoid_weight_matrix(t_valid, T: int, dtype=torch.float64) -> Tensor:
    """``[B, T]`` weights, row ``i`` holding ``sigmoid_weights(t_valid[i])`` then zeros."""
    t_valid = [int(v) for v in t_valid]
    w = np.zeros((len(t_valid), T))
    for i, n in enumerate(t_valid):
        if n > T:
            raise ValueError(f"T_valid={n} exceeds the {T} available steps")
        w[i, :n] = sigmoid_weights(n)
    return torch.as_tensor(w, dtype=dtype)


def teacher_error(distribution, label: int):
    """One minus the teacher's probability of the correct class."""
    return 1.0 - distribution[..., label]


def student_loss(logits: Tensor, labels, x_c: Tensor, x_p: Tensor, epsilon, t_valid: int,
                 config: StudentLossConfig = StudentLossConfig()) -> Tensor:
    """Sigmoid-weighted cross-entropy plus teacher-guided cosine distillation.

    ``logits`` is ``[T, C]``; ``labels`` a class index or ``[T]`` indices;
    ``x_c``/``x_p`` are ``[T, D]`` and ``epsilon`` is ``[T]``. Steps from
    ``t_valid`` on are ignored.
    """
    T = logits.shape[0]
    if t_valid < 1 or t_valid > T or t_valid > x_c.shape[0] or t_valid > x_p.shape[0] or t_valid > len(epsilon):
        raise ValueError(f"T_valid={t_valid} out of range for {T} steps")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(t_valid)
    labels = labels[:t_valid]
    _check_labels(labels, logits.shape[-1])
    w = torch.as_tensor(sigmoid_weights(t_valid), dtype=logits.dtype)
    ce = F.cross_entropy(logits[:t_valid], labels, reduction="none")
    loss = (w * ce).sum()
    if config.eta:
        eps = torch.as_tensor(epsilon, dtype=x_c.dtype)[:t_valid].detach()
        cos = (_unit(x_c[:t_valid]) * _unit(x_p[:t_valid].detach())).sum(-1)
        distill = (1.0 - eps) * _neg_log((cos + 1.0) / 2.0, config.log_clamp_eps)
        loss = loss + config.eta * (w * distill).sum()
    return loss


def student_loss_batch(logits: Tensor, labels, x_c: Tensor, x_p: Tensor, epsilon: Tensor, t_valid,
                       config: StudentLossConfig = StudentLossConfig()) -> Tensor:
    """Batch mean of :func:`student_loss`; tensors are ``[B, T, ...]``."""
    B, T, C = logits.shape
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() == 1:
        labels = labels[:, None].expand(B, T)
    _check_labels(labels, C)
    w = sigmoid_weight_matrix(t_valid, T, logits.dtype)
    ce = F.cross_entropy(logits.reshape(B * T, C), labels.reshape(-1), reduction="none").reshape(B, T)
    per_step = ce
    if config.eta:
        cos = (_unit(x_c) * _unit(x_p.detach())).sum(-1)
        distill = (1.0 - epsilon.detach().to(x_c.dtype)) * _neg_log((cos + 1.0) / 2.0, config.log_clamp_eps)
        per_step = ce + config.eta * distill
    return (w * per_step).sum() / B


def binary_cross_entropy(probs: Tensor, targets: Tensor, eps: float = 1e-7) -> Tensor:
    """Elementwise BCE on probabilities clamped to ``[eps, 1 - eps]``."""
    p = probs.clamp(eps, 1.0 - eps)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))


@dataclass
class ActionTargets:
    """Student-loss inputs for one action inside a detection window."""

    logits: Tensor
    label: int
    x_c: Tensor
    x_p: Tensor
    epsilon: Tensor

    @property
    def t_valid(self) -> int:
        return self.logits.shape[0]


def okdad_loss(act_probs: Tensor, act_labels, actions, config: StudentLossConfig = StudentLossConfig()) -> Tensor:
    """Mean actionness BCE over the window plus one student loss per action."""
    T = act_probs.shape[0]
    if T < 1:
        raise ValueError("window must contain at least one block")
    labels = torch.as_tensor(act_labels)
    loss = binary_cross_entropy(act_probs, labels, config.log_clamp_eps).mean()
    for a in actions:
        loss = loss + student_loss(a.logits, a.label, a.x_c, a.x_p, a.epsilon, a.t_valid, config)
    return loss

