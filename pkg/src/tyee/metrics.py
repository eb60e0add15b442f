"""Evaluation metrics and aggregation conventions.

Classification metrics are functions of a confusion matrix; ranking metrics
(AUROC, AUPRC) take raw scores with exact tie handling; regression metrics
cover MAE, its 100/ln(1+MAE) rescaling, and channel-averaged Pearson
correlation. A report's aggregate is the arithmetic mean of its values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInput,
    LabelOutOfRange,
    LengthMismatch,
    NonPositiveMae,
    NoPositives,
    ShapeMismatch,
    SingleClass,
    UnknownComponent,
)

CLASSIFICATION_METRICS = (
    "accuracy",
    "balanced_accuracy",
    "f1_macro",
    "f1_weighted",
    "kappa",
    "auroc",
    "auprc",
)
REGRESSION_METRICS = ("mae", "scaled_mae", "mean_cc")
BINARY_ONLY_METRICS = ("auroc", "auprc")


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts; rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeMismatch(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")
        counts = counts.copy()
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int | None = None) -> "ConfusionMatrix":
        t = np.asarray(y_true, dtype=np.int64)
        p = np.asarray(y_pred, dtype=np.int64)
        if t.shape != p.shape:
            raise LengthMismatch(f"{t.shape} true labels vs {p.shape} predictions")
        if num_classes is None:
            num_classes = int(max(t.max(initial=-1), p.max(initial=-1))) + 1
        if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= num_classes or p.max() >= num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise EmptyInput("confusion matrix has no samples")


def accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of samples on the diagonal."""
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall over classes with support."""
    _require_nonempty(cm)
    support = cm.counts.sum(axis=1)
    mask = support > 0
    recall = np.diag(cm.counts)[mask] / support[mask]
    return float(recall.mean())


def f1(cm: ConfusionMatrix, averaging: str = "macro") -> float:
    """Per-class F1 combined by unweighted or support-weighted mean.

    0/0 cases inside a class resolve to 0; classes with zero support are
    excluded from both averagings.
    """
    if averaging not in ("macro", "weighted"):
        raise ValueError(f"averaging must be 'macro' or 'weighted', got {averaging!r}")
    _require_nonempty(cm)
    tp = np.diag(cm.counts).astype(np.float64)
    support = cm.counts.sum(axis=1).astype(np.float64)
    predicted = cm.counts.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        per_class = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    mask = support > 0
    if averaging == "macro":
        return float(per_class[mask].mean())
    return float((per_class[mask] * support[mask]).sum() / support[mask].sum())


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement.

    When expected agreement is 1 (a single class on both sides), returns
    1.0 for perfect observed agreement and 0.0 otherwise.
    """
    _require_nonempty(cm)
    total = cm.total
    p_o = np.trace(cm.counts) / total
    p_e = float((cm.counts.sum(axis=1) * cm.counts.sum(axis=0)).sum()) / (total * total)
    if abs(1.0 - p_e) < 1e-12:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def _binary_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise LengthMismatch(f"scores {s.shape} vs labels {y.shape}")
    if y.size == 0:
        raise EmptyInput("no samples")
    if not np.isin(y, (0, 1)).all():
        raise LabelOutOfRange("labels must be 0 or 1")
    return s, y


def auroc(scores, labels) -> float:
    """Tie-aware AUROC: wins plus half-credit ties over all pos-neg pairs."""
    s, y = _binary_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    ranks = np.empty(y.size, dtype=np.float64)
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with tie groups processed jointly (step interpolation)."""
    s, y = _binary_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i : j + 1].sum())
        fp += (j - i + 1) - int(y[i : j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def mae(pred, target) -> float:
    """Mean absolute error."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.size != t.size:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise EmptyInput("no samples")
    return float(np.abs(p - t).mean())


def scale_mae(m: float) -> float:
    """Rescale an MAE value as 100 / ln(1 + MAE); defined for m > 0 only."""
    if m <= 0:
        raise NonPositiveMae(f"scaled MAE undefined for {m}")
    return 100.0 / float(np.log1p(m))


def mean_cc(pred, target) -> float:
    """Per-channel Pearson correlation (population moments), channel-averaged."""
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} vs target {t.shape}")
    if p.shape[1] < 2:
        raise ShapeMismatch("need at least 2 time points per channel")
    pc = p - p.mean(axis=1, keepdims=True)
    tc = t - t.mean(axis=1, keepdims=True)
    cov = (pc * tc).mean(axis=1)
    denom = p.std(axis=1) * t.std(axis=1) + 1e-12
    return float((cov / denom).mean())


@dataclass(frozen=True)
class MetricReport:
    """Named metric values for one evaluation pass plus their mean."""

    values: dict[str, float]
    aggregate: float

    def as_dict(self) -> dict[str, float]:
        out = dict(self.values)
        out["aggregate"] = self.aggregate
        return out


def aggregate_report(values: dict[str, float]) -> MetricReport:
    """Bundle metric values with their arithmetic mean."""
    if not values:
        raise EmptyInput("no metric values to aggregate")
    ordered = dict(values)
    return MetricReport(values=ordered, aggregate=float(np.mean(list(ordered.values()))))


# --- name-based dispatch for configured metric lists ----------------------------


def compute_classification_metrics(
    names,
    y_true,
    y_pred,
    scores=None,
    num_classes: int | None = None,
) -> MetricReport:
    """Evaluate configured classification metrics over one prediction pass.

    ``scores`` (positive-class scores) are required only by auroc/auprc.
    """
    cm = ConfusionMatrix.from_labels(y_true, y_pred, num_classes)
    values = {}
    for name in names:
        if name == "accuracy":
            values[name] = accuracy(cm)
        elif name == "balanced_accuracy":
            values[name] = balanced_accuracy(cm)
        elif name == "f1_macro":
            values[name] = f1(cm, "macro")
        elif name == "f1_weighted":
            values[name] = f1(cm, "weighted")
        elif name == "kappa":
            values[name] = cohen_kappa(cm)
        elif name in ("auroc", "auprc"):
            if scores is None:
                raise UnknownComponent("task.metrics", name, "needs binary scores")
            values[name] = auroc(scores, y_true) if name == "auroc" else auprc(scores, y_true)
        else:
            raise UnknownComponent("task.metrics", name)
    return aggregate_report(values)


def compute_regression_metrics(names, pred, target) -> MetricReport:
    """Evaluate configured regression metrics over one prediction pass."""
    values = {}
    for name in names:
        if name == "mae":
            values[name] = mae(pred, target)
        elif name == "scaled_mae":
            values[name] = scale_mae(mae(pred, target))
        elif name == "mean_cc":
            p = np.asarray(pred, dtype=np.float64)
            t = np.asarray(target, dtype=np.float64)
            values[name] = mean_cc(p.T, t.T)
        else:
            raise UnknownComponent("task.metrics", name)
    return aggregate_report(values)
