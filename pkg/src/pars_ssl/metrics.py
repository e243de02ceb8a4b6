"""Classification metrics: Cohen's kappa, balanced accuracy, macro-F1, AUROC."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ConfusionMatrix:
    """K x K counts, rows = true class, columns = predicted class."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int | None = None) -> ConfusionMatrix:
        y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
        if n_classes is None:
            n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)


def _as_cm(cm) -> ConfusionMatrix:
    return cm if isinstance(cm, ConfusionMatrix) else ConfusionMatrix(cm)


def cohens_kappa(cm) -> float:
    c = _as_cm(cm).counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("kappa of an empty confusion matrix is undefined")
    p_o = np.trace(c) / total
    p_e = float(c.sum(1) @ c.sum(0)) / total**2
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def balanced_accuracy(cm) -> float:
    c = _as_cm(cm).counts.astype(np.float64)
    support = c.sum(1)
    present = support > 0
    if not present.any():
        raise ValueError("balanced accuracy needs at least one class with true examples")
    return float(np.mean(np.diag(c)[present] / support[present]))


def macro_f1(cm) -> float:
    c = _as_cm(cm).counts.astype(np.float64)
    if c.sum() <= 0:
        raise ValueError("F1 of an empty confusion matrix is undefined")
    tp = np.diag(c)
    pred, true = c.sum(0), c.sum(1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    # Average ranks handle ties exactly.
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty_like(scores)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_report(y_true, y_pred, n_classes: int, scores=None) -> dict[str, float]:
    """Kappa, balanced accuracy, macro-F1, plus AUROC when K = 2 and scores are given."""
    cm = ConfusionMatrix.from_labels(y_true, y_pred, n_classes)
    report = {
        "kappa": cohens_kappa(cm),
        "balanced_accuracy": balanced_accuracy(cm),
        "macro_f1": macro_f1(cm),
        "n": float(cm.total),
    }
    if n_classes == 2 and scores is not None:
        y = np.asarray(y_true)
        if 0 < y.sum() < y.size:
            report["auroc"] = auroc(scores, y)
    return report


def write_report(path, report: dict) -> None:
    """Flat ``key=value`` text, one entry per line, keys sorted."""
    lines = []
    for key in sorted(report):
        value = report[key]
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out
