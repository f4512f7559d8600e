"""Evaluation metrics for tool presence (multi-label) and phases (multi-class)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

N_TOOLS = 21
N_PHASES = 14
SCHEMA_VERSION = 1


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value, e.g. AUC with one label class."""


def _binary_sets(gold, scores, threshold):
    g = np.asarray(gold)
    s = np.asarray(scores, dtype=np.float64)
    if g.ndim == 1:
        g, s = g[None], s[None]
    if g.shape != s.shape:
        raise ValueError(f"ground truth shape {g.shape} != prediction shape {s.shape}")
    if g.shape[0] == 0:
        raise ValueError("no instances to evaluate")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary")
    return g.astype(bool), s >= threshold


def hamming_accuracy(gold, scores, threshold=0.5):
    """Mean fraction of label bits on which prediction and truth agree.

    ``scores`` may already be binary; they are thresholded at ``threshold``.
    """
    g, p = _binary_sets(gold, scores, threshold)
    return float(np.mean(g == p))


def subset_accuracy(gold, scores, threshold=0.5):
    """Fraction of instances whose full predicted label vector is exact."""
    g, p = _binary_sets(gold, scores, threshold)
    return float(np.mean(np.all(g == p, axis=1)))


def auc(scores, labels):
    """ROC AUC as the Mann-Whitney statistic, ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_auc(gold, scores):
    """Per-class AUC (``None`` where undefined) and their unweighted mean."""
    g = np.asarray(gold)
    s = np.asarray(scores, dtype=np.float64)
    if g.shape != s.shape or g.ndim != 2:
        raise ValueError("gold and scores must be matching (N, C) arrays")
    per_class = []
    for c in range(g.shape[1]):
        try:
            per_class.append(auc(s[:, c], g[:, c]))
        except UndefinedMetricError:
            per_class.append(None)
    valid = [a for a in per_class if a is not None]
    if not valid:
        raise UndefinedMetricError("no class has both positive and negative labels")
    return per_class, float(np.mean(valid))


def confusion_matrix(gold, pred, n_classes=N_PHASES):
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def phase_metrics(gold, pred, n_classes=N_PHASES):
    """Per-frame accuracy and per-class precision / recall / F1.

    Classes absent from both gold and predictions get ``None`` everywhere and
    are left out of the macro means. A class predicted but never present in
    gold scores F1 = 0 and counts towards macro F1. Macro precision and recall
    average over the classes present in gold.
    """
    gold = np.asarray(gold, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if gold.size == 0:
        raise ValueError("no frames to evaluate")
    if gold.shape != pred.shape:
        raise ValueError(f"{gold.size} gold labels but {pred.size} predictions")
    for name, a in (("gold", gold), ("predicted", pred)):
        if a.min() < 0 or a.max() >= n_classes:
            raise ValueError(f"{name} phase ids must lie in [0, {n_classes})")
    cm = confusion_matrix(gold, pred, n_classes)
    tp = np.diag(cm)
    n_gold = cm.sum(axis=1)
    n_pred = cm.sum(axis=0)
    precision, recall, f1 = [], [], []
    for c in range(n_classes):
        if n_gold[c] == 0 and n_pred[c] == 0:
            precision.append(None)
            recall.append(None)
            f1.append(None)
            continue
        p = tp[c] / n_pred[c] if n_pred[c] else 0.0
        r = tp[c] / n_gold[c] if n_gold[c] else None
        if r is None:
            f = 0.0
        else:
            f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precision.append(float(p))
        recall.append(None if r is None else float(r))
        f1.append(float(f))
    present = n_gold > 0
    return {
        "per_frame_accuracy": float(tp.sum() / gold.size),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro_precision": float(np.mean([precision[c] for c in range(n_classes) if present[c]])),
        "macro_recall": float(np.mean([recall[c] for c in range(n_classes) if present[c]])),
        "macro_f1": float(np.mean([v for v in f1 if v is not None])),
    }


def _at(values, i):
    return values[i] if i < len(values) else None


@dataclass
class MetricsReport:
    """Every reported quantity; fields that do not apply stay ``None``."""

    hamming_accuracy: float = None
    subset_accuracy: float = None
    auc_per_class: list = field(default_factory=lambda: [None] * N_TOOLS)
    mean_auc: float = None
    per_frame_accuracy: float = None
    precision: list = field(default_factory=lambda: [None] * N_PHASES)
    recall: list = field(default_factory=lambda: [None] * N_PHASES)
    f1: list = field(default_factory=lambda: [None] * N_PHASES)
    macro_precision: float = None
    macro_recall: float = None
    macro_f1: float = None
    n_instances: int = 0

    @classmethod
    def for_tools(cls, gold, scores, threshold=0.5):
        per_class, mean = mean_auc(gold, scores)
        return cls(
            hamming_accuracy=hamming_accuracy(gold, scores, threshold),
            subset_accuracy=subset_accuracy(gold, scores, threshold),
            auc_per_class=list(per_class),
            mean_auc=mean,
            n_instances=int(np.shape(gold)[0]),
        )

    @classmethod
    def for_phases(cls, gold, pred):
        m = phase_metrics(gold, pred)
        return cls(n_instances=int(np.size(gold)), **m)

    def to_flat(self):
        out = {"schema": SCHEMA_VERSION, "n_instances": self.n_instances}
        for key in ("hamming_accuracy", "subset_accuracy", "mean_auc"):
            out[key] = getattr(self, key)
        for c in range(N_TOOLS):
            out[f"auc_tool_{c:02d}"] = _at(self.auc_per_class, c)
        for key in ("per_frame_accuracy", "macro_precision", "macro_recall", "macro_f1"):
            out[key] = getattr(self, key)
        for key in ("precision", "recall", "f1"):
            values = getattr(self, key)
            for c in range(N_PHASES):
                out[f"{key}_phase_{c:02d}"] = _at(values, c)
        return out

    def to_json(self):
        return json.dumps(self.to_flat(), indent=2) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.to_flat().items():
            w.writerow([k, "" if v is None else repr(v)])
        return buf.getvalue()

    @classmethod
    def from_flat(cls, flat):
        if flat.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {flat.get('schema')!r}")
        return cls(
            hamming_accuracy=flat["hamming_accuracy"],
            subset_accuracy=flat["subset_accuracy"],
            auc_per_class=[flat[f"auc_tool_{c:02d}"] for c in range(N_TOOLS)],
            mean_auc=flat["mean_auc"],
            per_frame_accuracy=flat["per_frame_accuracy"],
            precision=[flat[f"precision_phase_{c:02d}"] for c in range(N_PHASES)],
            recall=[flat[f"recall_phase_{c:02d}"] for c in range(N_PHASES)],
            f1=[flat[f"f1_phase_{c:02d}"] for c in range(N_PHASES)],
            macro_precision=flat["macro_precision"],
            macro_recall=flat["macro_recall"],
            macro_f1=flat["macro_f1"],
            n_instances=flat["n_instances"],
        )
