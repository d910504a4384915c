"""Dense-prediction metrics and multi-task transfer gains."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ArityError, InputError, LabelError, ParameterError, ParseError, ShapeError

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"
DIRECTIONS = (HIGHER_BETTER, LOWER_BETTER)

METRIC_DIRECTIONS = {
    "miou": HIGHER_BETTER,
    "maxf": HIGHER_BETTER,
    "edge_f": HIGHER_BETTER,
    "odsf": HIGHER_BETTER,
    "rmse": LOWER_BETTER,
    "merr": LOWER_BETTER,
    "absrel": LOWER_BETTER,
}


@dataclass(frozen=True)
class TaskMetric:
    name: str
    value: float
    direction: str | None = None

    def __post_init__(self):
        direction = self.direction or METRIC_DIRECTIONS.get(self.name.lower())
        if direction not in DIRECTIONS:
            raise ParameterError(f"unknown direction for metric {self.name!r}: {direction!r}")
        known = METRIC_DIRECTIONS.get(self.name.lower())
        if known is not None and known != direction:
            raise ParameterError(f"metric {self.name!r} is {known}, not {direction}")
        object.__setattr__(self, "direction", direction)


@dataclass(frozen=True)
class TransferReport:
    tasks: tuple
    deltas: tuple
    delta_mtl: float


def delta_tau(mt, st):
    """Percent transfer gain of ``mt`` over ``st``; positive means ``mt`` is better."""
    if mt.direction != st.direction or mt.name != st.name:
        raise ParameterError(f"cannot compare {mt.name}/{mt.direction} with {st.name}/{st.direction}")
    if st.value == 0:
        raise ZeroDivisionError(f"single-task value of {st.name!r} is zero")
    if mt.direction == HIGHER_BETTER:
        return (mt.value - st.value) / st.value * 100.0
    return (st.value - mt.value) / st.value * 100.0


def delta_mtl(deltas):
    deltas = list(deltas)
    if not deltas:
        raise ArityError("delta_mtl needs at least one task delta")
    return sum(deltas) / len(deltas)


def transfer_table(rows):
    """``rows`` of ``(task, direction, st_value, mt_value)`` to a TransferReport."""
    tasks, deltas = [], []
    for task, direction, st, mt in rows:
        try:
            d = delta_tau(TaskMetric(task, mt, direction), TaskMetric(task, st, direction))
        except ZeroDivisionError as exc:
            raise ZeroDivisionError(f"task {task!r}: single-task value is zero") from exc
        tasks.append(task)
        deltas.append(d)
    return TransferReport(tuple(tasks), tuple(deltas), delta_mtl(deltas))


def parse_transfer_csv(text):
    """Parse ``task,direction,st_value,mt_value`` rows (header required)."""
    reader = csv.reader(io.StringIO(text))
    rows = []
    header_seen = False
    for lineno, rec in enumerate(reader, start=1):
        if not rec or all(not f.strip() for f in rec):
            continue
        rec = [f.strip() for f in rec]
        if not header_seen:
            if rec != ["task", "direction", "st_value", "mt_value"]:
                raise ParseError(f"expected header task,direction,st_value,mt_value, got {','.join(rec)}", lineno)
            header_seen = True
            continue
        if len(rec) != 4:
            raise ParseError(f"expected 4 fields, got {len(rec)}", lineno)
        task, direction, st, mt = rec
        if direction not in DIRECTIONS:
            raise ParseError(f"direction must be one of {DIRECTIONS}, got {direction!r}", lineno)
        try:
            rows.append((task, direction, float(st), float(mt)))
        except ValueError as exc:
            raise ParseError(f"non-numeric value: {exc}", lineno) from exc
    if not header_seen:
        raise ParseError("empty input", 1)
    return rows


def format_transfer(report):
    lines = ["task,delta"] + [f"{t},{d:.2f}" for t, d in zip(report.tasks, report.deltas)]
    lines.append(f"delta_mtl,{report.delta_mtl:.2f}")
    return "\n".join(lines) + "\n"


def _array(a):
    return np.asarray(a.data if hasattr(a, "data") else a)


def miou(pred_labels, gt_labels, num_classes):
    """Mean IoU over classes present in either map."""
    pred, gt = _array(pred_labels).astype(np.int64), _array(gt_labels).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for name, lab in (("prediction", pred), ("ground truth", gt)):
        if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
            raise LabelError(f"{name} label outside [0, {num_classes})")
    conf = np.bincount(gt.ravel() * num_classes + pred.ravel(), minlength=num_classes**2)
    conf = conf.reshape(num_classes, num_classes)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / union[present]))


def rmse(pred, gt):
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
    return float(np.sqrt(np.mean((p - g) ** 2)))


def _unit(n, name):
    n = np.asarray(n, dtype=np.float64)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InputError(f"zero-length vector in {name} normals")
    return n / norm


def mean_angular_error(pred_normals, gt_normals):
    """Mean angle between normal maps (``... x 3``), in degrees."""
    p, g = _unit(_array(pred_normals), "predicted"), _unit(_array(gt_normals), "ground-truth")
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
    cos = np.clip(np.sum(p * g, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


THRESHOLDS = np.round(np.arange(1, 100) * 0.01, 2)


def edge_f_best(edge_prob, gt_edges, tolerance_radius=1):
    """Best F-measure over thresholds 0.01..0.99 with a Chebyshev pixel tolerance.

    Single-image stand-in for dataset-scale boundary F; ties resolve to the
    lowest threshold.
    """
    prob = np.asarray(_array(edge_prob), dtype=np.float64)
    gt = np.asarray(_array(gt_edges)).astype(bool)
    if prob.shape != gt.shape:
        raise ShapeError(f"shape mismatch {prob.shape} vs {gt.shape}")
    if np.any(~np.isfinite(prob)) or prob.min() < 0 or prob.max() > 1:
        raise InputError("edge probabilities must lie in [0, 1]")
    size = 2 * int(tolerance_radius) + 1
    gt_zone = ndimage.maximum_filter(gt, size=size, mode="constant", cval=False)
    n_gt = int(gt.sum())
    best_f, best_t = 0.0, float(THRESHOLDS[0])
    for thr in THRESHOLDS:
        pred = prob >= thr
        n_pred = int(pred.sum())
        if n_pred == 0 or n_gt == 0:
            continue
        pred_zone = ndimage.maximum_filter(pred, size=size, mode="constant", cval=False)
        precision = np.count_nonzero(pred & gt_zone) / n_pred
        recall = np.count_nonzero(gt & pred_zone) / n_gt
        f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        if f > best_f:
            best_f, best_t = f, float(thr)
    return best_f, best_t
