"""Evaluation protocols: accuracy per observation ratio, feature similarity, tIoU and mAP_a."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_RATIOS = tuple(round(0.1 * k, 1) for k in range(1, 11))
DEFAULT_THETAS = (0.1, 0.3, 0.5, 0.7)
UNDEFINED = "NA"


def accuracy_at_ratios(model, X, y, ratios=DEFAULT_RATIOS) -> dict[float, float]:
    """Fraction of clips ``model.predict(X, ratio=r)`` gets right, for each ratio."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    return {float(r): float(np.mean(model.predict(X, ratio=r) == y)) for r in ratios}


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if (n == 0).any():
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return x / n


def intra_inter_similarity(features, labels) -> tuple[float | None, float | None]:
    """Mean cosine over same-label pairs and over different-label pairs (``i < j``).

    An entry is ``None`` when the batch has no pair of that kind.
    """
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValueError("need at least two feature vectors")
    u = _unit_rows(features)
    cos = u @ u.T
    iu = np.triu_indices(len(labels), k=1)
    same = labels[iu[0]] == labels[iu[1]]
    vals = cos[iu]
    intra = float(vals[same].mean()) if same.any() else None
    inter = float(vals[~same].mean()) if (~same).any() else None
    return intra, inter


def teacher_student_fidelity(x_p, x_c) -> tuple[float, float]:
    """Average cosine similarity and mean squared error between paired vectors."""
    x_p = np.asarray(x_p, dtype=np.float64)
    x_c = np.asarray(x_c, dtype=np.float64)
    if x_p.shape != x_c.shape:
        raise ValueError(f"shape mismatch: {x_p.shape} vs {x_c.shape}")
    cos = (_unit_rows(x_p) * _unit_rows(x_c)).sum(1)
    mse = ((x_p - x_c) ** 2).mean(1)
    return float(cos.mean()), float(mse.mean())


def tiou(a, b) -> float:
    """Temporal IoU of two half-open block intervals."""
    inter = max(0, min(a.end_block, b.end_block) - max(a.start_block, b.start_block))
    union = (a.end_block - a.start_block) + (b.end_block - b.start_block) - inter
    return inter / union if union > 0 else 0.0


def _check_theta(theta):
    if not 0 < theta <= 1:
        raise ValueError(f"tIoU threshold must be in (0, 1], got {theta}")


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def match_detections(proposals, ground_truth, theta):
    """Greedy matching of ``(seq, Segment)`` proposals of one class.

    Proposals are visited by decreasing confidence (stable on ties). Each is
    assigned the ground truth of the same sequence with the highest tIoU
    (lowest index on ties) and is a hit when that tIoU reaches ``theta`` and
    the ground truth is still unmatched; otherwise it is a false positive, so
    duplicated proposals never claim extra ground truths. Returns the
    true-positive flags in visiting order.
    """
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i][1].confidence)
    used = set()
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        seq, p = proposals[i]
        best, best_j = -1.0, None
        for j, (gseq, g) in enumerate(ground_truth):
            if gseq != seq:
                continue
            ov = tiou(p, g)
            if ov > best:
                best, best_j = ov, j
        if best_j is not None and best >= theta and best_j not in used:
            used.add(best_j)
            tp[rank] = 1.0
    return tp


def map_a_dataset(proposals, ground_truth, theta) -> float:
    """mAP over classes present in the ground truth, across several sequences.

    ``proposals`` and ``ground_truth`` are lists (one per sequence) of
    :class:`~okdad.runtime.Segment`.
    """
    _check_theta(theta)
    props = [(k, s) for k, segs in enumerate(proposals) for s in segs]
    gts = [(k, s) for k, segs in enumerate(ground_truth) for s in segs]
    classes = sorted({g.label for _, g in gts})
    if not classes:
        raise ValueError("ground truth holds no segments")
    aps = []
    for c in classes:
        pc = [p for p in props if p[1].label == c]
        gc = [g for g in gts if g[1].label == c]
        aps.append(interpolated_ap(match_detections(pc, gc, theta), len(gc)))
    return float(np.mean(aps))


def map_a(proposals, ground_truth, theta) -> float:
    """mAP_a for a single sequence."""
    return map_a_dataset([list(proposals)], [list(ground_truth)], theta)


# --------------------------------------------------------------------------
# reports


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return UNDEFINED
    return f"{v:.6f}"


@dataclass
class EvalReport:
    """Tables keyed by name; each table maps a row label to ``{column: value}``.

    A table whose only row label is ``None`` is written without a label column.
    """

    tables: dict[str, dict[str, dict]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def add(self, table: str, row: str | None, values: dict):
        self.tables.setdefault(table, {})[row] = dict(values)

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, rows in self.tables.items():
            path = directory / f"{name}.csv"
            cols = list(next(iter(rows.values())).keys())
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                if list(rows) == [None]:
                    # unlabelled single-row table: the header is exactly the columns
                    w.writerow([str(c) for c in cols])
                    w.writerow([_fmt(v) for v in next(iter(rows.values())).values()])
                else:
                    w.writerow(["row"] + [str(c) for c in cols])
                    for label, vals in rows.items():
                        w.writerow([label] + [_fmt(vals.get(c)) for c in cols])
            paths.append(path)
        summary = directory / "summary.json"
        body = {"tables": {n: {r: {str(c): v for c, v in vals.items()} for r, vals in rows.items()}
                           for n, rows in self.tables.items()}, **self.summary}
        summary.write_text(json.dumps(body, indent=2, sort_keys=True, default=str))
        paths.append(summary)
        return paths
