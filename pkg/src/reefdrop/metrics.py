"""Classification and deployment metrics, reported as percentages."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from ._io import atomic_open
from .classify import GridClassification
from .core import FrameLabel, PatchClass
from .decision import FrameDecision, Rule, Ratio, scores_for
from .errors import AlignmentError, DecisionError, ValidationError
from .learn import MlpModel

PATCH_CLASS_NAMES = tuple(c.name.lower() for c in PatchClass)
FRAME_CLASS_NAMES = tuple(c.name.lower() for c in FrameLabel)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``counts[t, p]`` = number of samples with true class t predicted as p."""

    counts: np.ndarray
    labels: tuple

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] != len(self.labels):
            raise ValidationError("confusion matrix must be C x C with C labels")
        if np.any(c < 0):
            raise ValidationError("negative confusion count")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, truths, n_classes: int, labels: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape or preds.ndim != 1:
        raise ValidationError(f"length mismatch: {preds.shape} predictions vs {truths.shape} truths")
    for name, arr in (("prediction", preds), ("truth", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValidationError(f"{name} index outside [0, {n_classes})")
    if labels is None:
        labels = PATCH_CLASS_NAMES if n_classes == 3 else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(_kernels.confusion_tally(preds, truths, n_classes), tuple(labels))


def _ratio(num, den):
    # undefined ratios are reported as 0
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def macro_f1(per_class_f1) -> float:
    return float(np.mean(np.asarray(per_class_f1, dtype=np.float64)))


@dataclass(frozen=True)
class MetricsReport:
    labels: tuple
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    macro_f1: float
    accuracy: float

    def as_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "support": list(self.support),
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
        }

    def to_text(self) -> str:
        width = max(len(s) for s in (*self.labels, "class"))
        lines = [f"{'class':<{width}}  precision   recall       f1  support"]
        for i, name in enumerate(self.labels):
            lines.append(
                f"{name:<{width}}  {self.precision[i]:9.2f} {self.recall[i]:8.2f} "
                f"{self.f1[i]:8.2f} {self.support[i]:8d}"
            )
        lines.append(f"macro F1  {self.macro_f1:.2f}")
        lines.append(f"accuracy  {self.accuracy:.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for i, name in enumerate(self.labels):
            w.writerow([name, f"{self.precision[i]:.2f}", f"{self.recall[i]:.2f}", f"{self.f1[i]:.2f}", self.support[i]])
        w.writerow(["macro", "", "", f"{self.macro_f1:.2f}", sum(self.support)])
        w.writerow(["accuracy", "", "", f"{self.accuracy:.2f}", sum(self.support)])
        return buf.getvalue()


def report(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision/recall/F1, macro F1 and accuracy (all in percent)."""
    c = cm.counts.astype(np.float64)
    if cm.total == 0:
        raise ValidationError("empty confusion matrix")
    tp = np.diag(c)
    precision = _ratio(tp, c.sum(axis=0))
    recall = _ratio(tp, c.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsReport(
        labels=cm.labels,
        precision=tuple(float(v) for v in 100 * precision),
        recall=tuple(float(v) for v in 100 * recall),
        f1=tuple(float(v) for v in 100 * f1),
        support=tuple(int(v) for v in c.sum(axis=1)),
        macro_f1=macro_f1(100 * f1),
        accuracy=float(100 * tp.sum() / c.sum()),
    )


# --------------------------------------------------------------------------
# frame-level deployment metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeployMetrics:
    deploy_precision: float
    deploy_recall: float
    accuracy: float
    f1: float  # macro over {No-Deploy, Deploy}


def _truth_vector(decisions: Sequence[FrameDecision], truths) -> np.ndarray:
    """Align truths to decisions.

    ``truths`` is a ``{frame_id: label}`` map, a list of ``(frame_id, label)``
    pairs, or a plain label list aligned by position.
    """
    if isinstance(truths, dict):
        missing = [d.frame_id for d in decisions if d.frame_id not in truths]
        if missing:
            raise AlignmentError(f"no ground truth for frames {missing}")
        if len(truths) != len(decisions):
            extra = sorted(set(truths) - {d.frame_id for d in decisions})
            raise AlignmentError(f"ground truth for undecided frames {extra}")
        labels = [truths[d.frame_id] for d in decisions]
    else:
        labels = list(truths)
        if len(labels) != len(decisions):
            raise AlignmentError(f"{len(decisions)} decisions vs {len(labels)} truths")
        if labels and isinstance(labels[0], tuple):
            for d, (fid, _) in zip(decisions, labels):
                if fid != d.frame_id:
                    raise AlignmentError(f"frame_id mismatch: {d.frame_id!r} vs {fid!r}")
            labels = [lab for _, lab in labels]
    return np.array([int(FrameLabel(int(v))) for v in labels], dtype=np.int64)


def _binary_from_tally(tp, fp, fn, tn) -> DeployMetrics:
    tp, fp, fn, tn = (float(v) for v in (tp, fp, fn, tn))
    total = tp + fp + fn + tn
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1_pos = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    prec_n = tn / (tn + fn) if tn + fn else 0.0
    rec_n = tn / (tn + fp) if tn + fp else 0.0
    f1_neg = 2 * prec_n * rec_n / (prec_n + rec_n) if prec_n + rec_n else 0.0
    return DeployMetrics(100 * prec, 100 * rec, 100 * (tp + tn) / total if total else 0.0,
                         100 * (f1_pos + f1_neg) / 2)


def deploy_metrics(decisions: Sequence[FrameDecision], truths) -> DeployMetrics:
    """Binary metrics with Deploy as the positive class."""
    y = _truth_vector(decisions, truths)
    if y.size == 0:
        raise ValidationError("no decisions to score")
    pred = np.array([int(d.decision) for d in decisions], dtype=np.int64)
    cm = _kernels.confusion_tally(pred, y, 2)
    return _binary_from_tally(cm[1, 1], cm[0, 1], cm[1, 0], cm[0, 0])


@dataclass(frozen=True)
class Agreement:
    report: MetricsReport
    flags: tuple

    @property
    def accuracy(self) -> float:
        return self.report.accuracy


def agreement(engine: Sequence[FrameDecision], ecologist) -> Agreement:
    """Score engine decisions against ecologist labels, with per-frame agree flags."""
    y = _truth_vector(engine, ecologist)
    if y.size == 0:
        raise ValidationError("no frames to compare")
    pred = np.array([int(d.decision) for d in engine], dtype=np.int64)
    rep = report(confusion(pred, y, 2, FRAME_CLASS_NAMES))
    return Agreement(rep, tuple(bool(v) for v in pred == y))


# --------------------------------------------------------------------------
# alpha sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PrPoint:
    alpha: float
    deploy_precision: float
    deploy_recall: float
    overall_f1: float
    accuracy: float
    n_deploy: int


@dataclass(frozen=True)
class PrCurve:
    rule: str
    points: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "precision", "recall", "f1", "accuracy", "n_deploy"])
        for p in self.points:
            w.writerow([repr(p.alpha), repr(p.deploy_precision), repr(p.deploy_recall),
                        repr(p.overall_f1), repr(p.accuracy), p.n_deploy])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with atomic_open(path) as f:
            f.write(self.to_csv())


def pr_sweep(grids: Sequence[GridClassification], truths, rule, alphas,
             model: Optional[MlpModel] = None, ratio: Ratio = Ratio.VS_REST) -> PrCurve:
    """Re-decide every frame at each alpha and score the deploy metrics."""
    rule = Rule.parse(rule)
    if rule is Rule.WHOLE_IMAGE:
        raise DecisionError("whole_image decisions use a fixed threshold; nothing to sweep")
    if rule is Rule.AGGREGATION and model is None:
        raise DecisionError("spatial_patch_aggregation sweep needs an aggregation model")
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or np.any(alphas < 0) or np.any(alphas > 1):
        raise DecisionError("alphas must be a vector in [0, 1]")
    if np.any(np.diff(alphas) <= 0):
        raise DecisionError("alphas must be strictly increasing")
    grids = list(grids)
    placeholders = [FrameDecision(g.frame_id, FrameLabel.NO_DEPLOY, 0.0, 0.0, rule.value) for g in grids]
    y = _truth_vector(placeholders, truths)
    scores = scores_for(grids, rule, model, ratio)
    tally = _kernels.sweep_tally(scores, y.astype(bool), alphas)
    points = []
    for a, (tp, fp, fn, tn) in zip(alphas, tally):
        m = _binary_from_tally(tp, fp, fn, tn)
        points.append(PrPoint(float(a), m.deploy_precision, m.deploy_recall, m.f1, m.accuracy, int(tp + fp)))
    return PrCurve(rule.value, tuple(points))
