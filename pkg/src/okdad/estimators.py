"""Scikit-learn style estimators for the teacher, the online student and the detector.

All three take *cropped* frame stacks (see :class:`okdad.sampling.KeypointCropper`)
as ``X``; ``fit`` returns ``self`` and the fitted network lives in ``model_``.
"""
from __future__ import annotations

import copy
import math
import logging
import time

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import trainer
from .metrics import map_a_dataset
from .losses import (
    ActionTargets,
    StudentLossConfig,
    TeacherLossConfig,
    okdad_loss,
    sigmoid_weight_matrix,
    student_loss_batch,
    teacher_loss,
)
from .nets import BackboneConfig, OnlineNet, TeacherNet
from .rng import derive_seed, make_rng
from .runtime import Segment, batched_outputs, propose_segments
from .sampling import OnlineChunkConfig, chunk_online, sample_offline, truncate_ratio
from .validation import check_clips, check_labels, check_ratio

logger = logging.getLogger(__name__)

_INFER_BATCH = 64


def _backbone_config(est) -> BackboneConfig:
    return BackboneConfig(
        feature_dim=est.feature_dim,
        block_widths=tuple(est.block_widths),
        blocks_per_stage=est.blocks_per_stage,
        stem_width=est.stem_width,
        height=est.out_height,
        width=est.out_width,
    )


def _seed_torch(seed, *keys):
    torch.manual_seed(derive_seed(seed, *keys))


def _log_row(history, start, **row):
    row["wall_time"] = time.perf_counter() - start
    history.append(row)
    logger.debug("%s", row)


class OfflineTeacher(ClassifierMixin, BaseEstimator):
    """Offline early-prediction teacher trained at random observation ratios.

    ``alpha`` and ``beta`` weight the intraclass and interclass cosine
    terms, ``gamma`` is the ratio exponent. Setting ``alpha=beta=0`` gives
    the no-penalty teacher. ``lr_schedule="cosine"`` (the default) anneals
    the step size to zero over the run; ``"constant"`` keeps it fixed.
    """

    def __init__(
        self,
        *,
        num_classes=None,
        alpha=1.0,
        beta=0.5,
        gamma=2.0 / 3.0,
        log_clamp_eps=1e-7,
        t_off=15,
        r_min=0.025,
        feature_dim=64,
        block_widths=(8, 16, 32, 64),
        blocks_per_stage=1,
        stem_width=8,
        out_height=16,
        out_width=16,
        batch_size=16,
        learning_rate=1e-3,
        lr_schedule="cosine",
        epochs=10,
        seed=0,
    ):
        self.num_classes = num_classes
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.log_clamp_eps = log_clamp_eps
        self.t_off = t_off
        self.r_min = r_min
        self.feature_dim = feature_dim
        self.block_widths = block_widths
        self.blocks_per_stage = blocks_per_stage
        self.stem_width = stem_width
        self.out_height = out_height
        self.out_width = out_width
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.epochs = epochs
        self.seed = seed

    def _build(self, num_classes):
        _seed_torch(self.seed, "teacher-init")
        self.model_ = TeacherNet(_backbone_config(self), num_classes, self.t_off)
        self.classes_ = np.arange(num_classes)
        self.n_classes_ = num_classes
        return self.model_

    def fit(self, X, y=None, eval_set=None):
        if self.batch_size < 2:
            raise ValueError("teacher batch_size must be >= 2 (batch normalization)")
        clips = check_clips(X, (self.out_height, self.out_width))
        y = check_labels(y, X if y is None else clips, self.num_classes)
        C = self.num_classes or int(y.max()) + 1
        net = self._build(C)
        loss_cfg = TeacherLossConfig(self.alpha, self.beta, self.gamma, self.log_clamp_eps)
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        per_epoch = sum(1 for a in range(0, len(clips), self.batch_size) if len(clips) - a >= 2)
        total = max(1, per_epoch * self.epochs)
        if eval_set is not None:
            val_clips = check_clips(eval_set[0], (self.out_height, self.out_width), "eval_set X")
            val_y = check_labels(eval_set[1], val_clips, C, "eval_set y")
        self.history_ = []
        t0 = time.perf_counter()
        self.best_score_ = -1.0
        best_state = None
        step = 0
        for epoch in range(self.epochs):
            rng = make_rng(self.seed, "teacher-epoch", epoch)
            order = rng.permutation(len(clips))
            net.train()
            for a in range(0, len(order), self.batch_size):
                idx = order[a : a + self.batch_size]
                if len(idx) < 2:
                    continue
                r = trainer.sample_training_ratio(rng, self.r_min)
                stack = np.stack(
                    [sample_offline(clips[i], truncate_ratio(len(clips[i]), r), self.t_off, rng) for i in idx]
                )
                x_p, logits = net(torch.from_numpy(stack))
                loss, terms = teacher_loss(x_p, logits, torch.from_numpy(y[idx]), r, loss_cfg)
                trainer.check_finite(loss, step, terms)
                lr = self.learning_rate
                if self.lr_schedule == "cosine":
                    lr *= 0.5 * (1.0 + math.cos(math.pi * step / total))
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.zero_grad()
                loss.backward()
                opt.step()
                _log_row(
                    self.history_, t0, stage="teacher", epoch=epoch, step=step, loss=loss.item(), ratio=r,
                    cross_entropy=terms["cross_entropy"].item(), similarity=terms["similarity"].item(),
                    dissimilarity=terms["dissimilarity"].item(), lr=lr,
                )
                step += 1
            if eval_set is not None:
                score = float(np.mean(self.predict(val_clips) == val_y))
                self.history_[-1]["val_accuracy"] = score
                if score >= self.best_score_:
                    self.best_score_ = score
                    best_state = copy.deepcopy(net.state_dict())
        if best_state is not None:
            net.load_state_dict(best_state)
        self.n_steps_ = step
        net.eval()
        return self

    # ------------------------------------------------------------------ inference

    @torch.no_grad()
    def _forward(self, X, ratio):
        check_is_fitted(self, "model_")
        clips = check_clips(X, (self.out_height, self.out_width))
        ratio = check_ratio(ratio)
        self.model_.eval()
        xs, ps = [], []
        for a in range(0, len(clips), _INFER_BATCH):
            part = clips[a : a + _INFER_BATCH]
            stack = np.stack([sample_offline(c, truncate_ratio(len(c), ratio), self.t_off) for c in part])
            x_p, logits = self.model_(torch.from_numpy(stack))
            xs.append(x_p.numpy())
            ps.append(torch.softmax(logits, -1).numpy())
        return np.concatenate(xs), np.concatenate(ps)

    def predict_proba(self, X, ratio=1.0):
        return self._forward(X, ratio)[1]

    def predict(self, X, ratio=1.0):
        return np.argmax(self.predict_proba(X, ratio), axis=1)

    def transform(self, X, ratio=1.0):
        """Normalized teacher features ``x_p`` (deterministic sampling)."""
        return self._forward(X, ratio)[0]

    def build_cache(self, X, y=None, s=3, delta=5, dataset_hash=None) -> trainer.TeacherFeatureCache:
        check_is_fitted(self, "model_")
        clips = check_clips(X, (self.out_height, self.out_width))
        y = check_labels(y, X if y is None else clips, self.n_classes_)
        return trainer.build_teacher_cache(self.model_, clips, y, OnlineChunkConfig(s, delta), self.t_off, dataset_hash)


class _OnlineBase(BaseEstimator):
    """Shared construction for the student and the detector."""

    _actionness = False

    def _chunk(self):
        return OnlineChunkConfig(self.s, self.delta)

    def _build(self, num_classes):
        cfg = _backbone_config(self)
        if self.teacher is not None:
            check_is_fitted(self.teacher, "model_")
            cfg = self.teacher.model_.backbone.config
            num_classes = self.teacher.n_classes_
            self._chunk().check_pairs_with(self.teacher.t_off)
        _seed_torch(self.seed, type(self).__name__, "init")
        net = OnlineNet(
            cfg, num_classes, self.delta, self.class_hidden,
            self.actionness_hidden if self._actionness else None,
            getattr(self, "gate_mode", "soft"),
        )
        if self.teacher is not None:
            net.backbone.load_state_dict(self.teacher.model_.backbone.state_dict())
            net.classifier.load_state_dict(self.teacher.model_.classifier.state_dict())
            net.classifier.requires_grad_(False)
        if self.freeze_backbone:
            net.backbone.requires_grad_(False)
        self.model_ = net
        self.classes_ = np.arange(num_classes)
        self.n_classes_ = num_classes
        # these attributes let the estimator be rebuilt from a checkpoint
        self.backbone_config_ = cfg.to_dict()
        return net

    def _frozen(self):
        return {k: p for k, p in self.model_.named_parameters() if not p.requires_grad}

    def _optimizer(self):
        params = [p for p in self.model_.parameters() if p.requires_grad]
        return torch.optim.Adam(params, lr=self.learning_rate)

    def _loss_config(self):
        return StudentLossConfig(self.eta, self.log_clamp_eps)


class OnlineStudent(ClassifierMixin, _OnlineBase):
    """Online early-prediction student distilled from an :class:`OfflineTeacher`.

    With ``teacher=None`` the backbone is randomly initialized (the generic
    extractor baseline); combine with ``freeze_backbone=True`` and ``eta=0``.
    """

    def __init__(
        self,
        teacher=None,
        *,
        num_classes=None,
        eta=1.0,
        log_clamp_eps=1e-7,
        s=3,
        delta=5,
        class_hidden=256,
        freeze_backbone=False,
        feature_dim=64,
        block_widths=(8, 16, 32, 64),
        blocks_per_stage=1,
        stem_width=8,
        out_height=16,
        out_width=16,
        batch_size=32,
        learning_rate=1e-3,
        epochs=10,
        seed=0,
    ):
        self.teacher = teacher
        self.num_classes = num_classes
        self.eta = eta
        self.log_clamp_eps = log_clamp_eps
        self.s = s
        self.delta = delta
        self.class_hidden = class_hidden
        self.freeze_backbone = freeze_backbone
        self.feature_dim = feature_dim
        self.block_widths = block_widths
        self.blocks_per_stage = blocks_per_stage
        self.stem_width = stem_width
        self.out_height = out_height
        self.out_width = out_width
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y=None, eval_set=None, cache=None):
        clips = check_clips(X, (self.out_height, self.out_width))
        y = check_labels(y, X if y is None else clips, self.num_classes)
        if self.eta and self.teacher is None:
            raise ValueError("eta > 0 needs a teacher to distill from")
        net = self._build(self.num_classes or int(y.max()) + 1)
        chunk = self._chunk()
        if self.eta:
            data_hash = trainer.fingerprint_clips(clips, y)
            if cache is None:
                cache = self.teacher.build_cache(clips, y, self.s, self.delta, data_hash)
            cache.check(data_hash, self.s, self.delta)
        blocks = [chunk_online(c, chunk) for c in clips]
        t_valid = np.asarray([len(b) for b in blocks])
        self.t_on_ = int(t_valid.max())
        padded = np.zeros((len(clips), self.t_on_, self.delta, self.out_height, self.out_width), np.float32)
        for i, b in enumerate(blocks):
            padded[i, : len(b)] = b
        padded = torch.from_numpy(padded)
        valid = torch.arange(self.t_on_)[None, :] < torch.from_numpy(t_valid)[:, None]
        if eval_set is not None:
            val_clips = check_clips(eval_set[0], (self.out_height, self.out_width), "eval_set X")
            val_y = check_labels(eval_set[1], val_clips, self.n_classes_, "eval_set y")
        guard = trainer.FreezeGuard(self._frozen())
        opt = self._optimizer()
        loss_cfg = self._loss_config()
        self.history_ = []
        t0 = time.perf_counter()
        self.best_score_ = -1.0
        best_state = None
        step = 0
        D = net.backbone.config.feature_dim
        for epoch in range(self.epochs):
            rng = make_rng(self.seed, "student-epoch", epoch)
            order = rng.permutation(len(clips))
            net.train()
            for a in range(0, len(order), self.batch_size):
                idx = order[a : a + self.batch_size]
                out = net.forward_sequence(padded[idx], valid[idx])
                if self.eta:
                    x_p, eps = cache.padded(idx, self.t_on_)
                else:
                    x_p, eps = torch.zeros(len(idx), self.t_on_, D), torch.ones(len(idx), self.t_on_)
                loss = student_loss_batch(out["logits"], torch.from_numpy(y[idx]), out["x_c"], x_p, eps,
                                          t_valid[idx], loss_cfg)
                trainer.check_finite(loss, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                _log_row(self.history_, t0, stage="student", epoch=epoch, step=step, loss=loss.item(),
                         lr=self.learning_rate)
                step += 1
            guard.verify()
            if eval_set is not None:
                score = float(np.mean(self.predict(val_clips) == val_y))
                self.history_[-1]["val_accuracy"] = score
                if score >= self.best_score_:
                    self.best_score_ = score
                    best_state = copy.deepcopy(net.state_dict())
        if best_state is not None:
            net.load_state_dict(best_state)
        guard.verify()
        self.n_steps_ = step
        net.eval()
        return self

    @torch.no_grad()
    def _run(self, X, ratio):
        """Per clip: weighted class distribution and final reconstruction ``x_c``."""
        check_is_fitted(self, "model_")
        clips = check_clips(X, (self.out_height, self.out_width))
        ratio = check_ratio(ratio)
        chunk = self._chunk()
        self.model_.eval()
        dists, feats = [], []
        for a in range(0, len(clips), _INFER_BATCH):
            blocks = [chunk_online(c[: truncate_ratio(len(c), ratio)], chunk) for c in clips[a : a + _INFER_BATCH]]
            tv = np.asarray([len(b) for b in blocks])
            T = int(tv.max())
            x = np.zeros((len(blocks), T, self.delta, self.out_height, self.out_width), np.float32)
            for i, b in enumerate(blocks):
                x[i, : len(b)] = b
            valid = torch.arange(T)[None, :] < torch.from_numpy(tv)[:, None]
            out = self.model_.forward_sequence(torch.from_numpy(x), valid)
            w = sigmoid_weight_matrix(tv, T, torch.float64)
            probs = torch.softmax(out["logits"].double(), -1)
            dists.append((w[..., None] * probs).sum(1).numpy())
            feats.append(out["x_c"][torch.arange(len(blocks)), torch.from_numpy(tv - 1)].numpy())
        return np.concatenate(dists), np.concatenate(feats)

    def predict_proba(self, X, ratio=1.0):
        """Sigmoid-weighted average of per-block distributions over the observed blocks."""
        return self._run(X, ratio)[0]

    def predict(self, X, ratio=1.0):
        return np.argmax(self.predict_proba(X, ratio), axis=1)

    def transform(self, X, ratio=1.0):
        """Reconstruction vector ``x_c`` at the last observed block."""
        return self._run(X, ratio)[1]


class OKDADDetector(_OnlineBase):
    """Online detector: student plus an actionness LSTM gating the classifier memory.

    ``fit`` takes cropped long sequences ``X`` and, as ``y``, one list of
    :class:`~okdad.synthvid.ActionInterval` per sequence. ``gating_source``
    selects ground-truth (``"label"``) or predicted (``"predicted"``)
    actionness to gate the classification LSTM while training; inference
    always uses predictions.
    """

    _actionness = True

    def __init__(
        self,
        teacher=None,
        *,
        num_classes=None,
        eta=1.0,
        log_clamp_eps=1e-7,
        s=3,
        delta=5,
        class_hidden=256,
        actionness_hidden=128,
        gating_source="label",
        gate_mode="soft",
        threshold=0.75,
        window_blocks=40,
        windows_per_sequence=1,
        freeze_backbone=False,
        feature_dim=64,
        block_widths=(8, 16, 32, 64),
        blocks_per_stage=1,
        stem_width=8,
        out_height=16,
        out_width=16,
        batch_size=32,
        learning_rate=1e-3,
        epochs=10,
        seed=0,
    ):
        self.teacher = teacher
        self.num_classes = num_classes
        self.eta = eta
        self.log_clamp_eps = log_clamp_eps
        self.s = s
        self.delta = delta
        self.class_hidden = class_hidden
        self.actionness_hidden = actionness_hidden
        self.gating_source = gating_source
        self.gate_mode = gate_mode
        self.threshold = threshold
        self.window_blocks = window_blocks
        self.windows_per_sequence = windows_per_sequence
        self.freeze_backbone = freeze_backbone
        self.feature_dim = feature_dim
        self.block_widths = block_widths
        self.blocks_per_stage = blocks_per_stage
        self.stem_width = stem_width
        self.out_height = out_height
        self.out_width = out_width
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def targets(self, X, y):
        """Block-level supervision for each sequence (teacher features attached when available)."""
        seqs = check_clips(X, (self.out_height, self.out_width))
        if y is None or len(y) != len(seqs):
            raise ValueError("y must hold one interval list per sequence")
        chunk = self._chunk()
        tg = [trainer.block_targets(len(f), ivs, chunk) for f, ivs in zip(seqs, y)]
        if self.teacher is not None:
            trainer.attach_teacher_targets(self.teacher.model_, seqs, tg, y, self.teacher.t_off)
        return seqs, tg

    def fit(self, X, y, eval_set=None, targets=None):
        if self.gating_source not in ("label", "predicted"):
            raise ValueError("gating_source must be 'label' or 'predicted'")
        if self.eta and self.teacher is None:
            raise ValueError("eta > 0 needs a teacher to distill from")
        labels = [iv.label for ivs in y for iv in ivs]
        net = self._build(self.num_classes or (max(labels) + 1 if labels else 2))
        if targets is None:
            seqs, targets = self.targets(X, y)
        else:
            seqs = check_clips(X, (self.out_height, self.out_width))
        chunk = self._chunk()
        blocks = [chunk_online(f, chunk) for f in seqs]
        W = self.window_blocks
        D = net.backbone.config.feature_dim
        if eval_set is not None:
            val_seqs = check_clips(eval_set[0], (self.out_height, self.out_width), "eval_set X")
            val_gts = [trainer.ground_truth_blocks(trainer.block_targets(len(f), ivs, chunk))
                       for f, ivs in zip(val_seqs, eval_set[1])]
        guard = trainer.FreezeGuard(self._frozen())
        opt = self._optimizer()
        loss_cfg = self._loss_config()
        self.history_ = []
        t0 = time.perf_counter()
        self.best_score_ = -1.0
        best_state = None
        step = 0
        for epoch in range(self.epochs):
            rng = make_rng(self.seed, "okdad-epoch", epoch)
            items = np.repeat(np.arange(len(seqs)), self.windows_per_sequence)
            items = items[rng.permutation(len(items))]
            net.train()
            for a in range(0, len(items), self.batch_size):
                batch = items[a : a + self.batch_size]
                x = torch.zeros(len(batch), W, self.delta, self.out_height, self.out_width)
                valid = torch.zeros(len(batch), W, dtype=torch.bool)
                windows = []
                for row, si in enumerate(batch):
                    tg = targets[si]
                    start = trainer.sample_window(rng, tg, W)
                    stop = min(start + W, len(tg.actionness))
                    n = stop - start
                    x[row, :n] = torch.from_numpy(blocks[si][start:stop])
                    valid[row, :n] = True
                    windows.append((tg, start, n))
                act = torch.zeros(len(batch), W)
                for row, (tg, start, n) in enumerate(windows):
                    act[row, :n] = torch.from_numpy(tg.actionness[start : start + n]).float()
                gate = act if self.gating_source == "label" else None
                out = net.forward_sequence(x, valid, gate)
                probs = torch.sigmoid(out["act_logits"])
                losses = []
                for row, (tg, start, n) in enumerate(windows):
                    actions = []
                    aid = tg.action_id[start : start + n]
                    for k in np.unique(aid[aid >= 0]):
                        ts = np.flatnonzero(aid == k)
                        g = ts + start
                        tt = torch.from_numpy(ts)
                        x_p = torch.from_numpy(tg.x_p[g]) if tg.x_p is not None else torch.zeros(len(ts), D)
                        eps = torch.from_numpy(tg.epsilon[g]) if tg.epsilon is not None else torch.ones(len(ts))
                        actions.append(ActionTargets(out["logits"][row, tt], int(tg.class_label[start + ts[0]]),
                                                     out["x_c"][row, tt], x_p, eps))
                    losses.append(okdad_loss(probs[row, :n], act[row, :n], actions, loss_cfg))
                loss = torch.stack(losses).mean()
                trainer.check_finite(loss, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                _log_row(self.history_, t0, stage="okdad", epoch=epoch, step=step, loss=loss.item(),
                         lr=self.learning_rate)
                step += 1
            guard.verify()
            if eval_set is not None:
                score = map_a_dataset(self.predict(val_seqs), val_gts, 0.5)
                self.history_[-1]["val_map_a"] = score
                if score >= self.best_score_:
                    self.best_score_ = score
                    best_state = copy.deepcopy(net.state_dict())
        if best_state is not None:
            net.load_state_dict(best_state)
        guard.verify()
        self.n_steps_ = step
        net.eval()
        return self

    def decision_function(self, X):
        """Per sequence, the list of per-block :class:`~okdad.runtime.BlockOutput`."""
        check_is_fitted(self, "model_")
        seqs = check_clips(X, (self.out_height, self.out_width))
        chunk = self._chunk()
        return [batched_outputs(self.model_, chunk_online(f, chunk)) for f in seqs]

    def predict(self, X, threshold=None) -> list[list[Segment]]:
        th = self.threshold if threshold is None else threshold
        return [propose_segments(outs, th) for outs in self.decision_function(X)]

