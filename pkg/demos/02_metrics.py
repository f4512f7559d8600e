"""
Scoring tool detection and phase recognition
============================================

Tool presence is multi-label (21 independent yes/no answers per frame) while
the phase is a single label out of 14. Each has its own metrics.
"""

import numpy as np

from cataphase.metrics import MetricsReport, auc, hamming_accuracy, mean_auc, phase_metrics, subset_accuracy

###############################################################################
# Hamming and subset accuracy
# ---------------------------
#
# Hamming accuracy is the fraction of label bits a prediction gets right.
# Subset accuracy demands the whole vector. One wrong bit out of four costs a
# quarter under the first and everything under the second.

gold = np.array([[1, 0, 1, 0]])
pred = np.array([[1, 1, 1, 0]])
print("hamming", hamming_accuracy(gold, pred), "subset", subset_accuracy(gold, pred))

###############################################################################
# AUC counts ordered pairs
# ------------------------
#
# Positives scored 0.9 and 0.4, negatives 0.5 and 0.1. Three of the four
# positive/negative pairs are ordered correctly.

print("auc", auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]))

rng = np.random.default_rng(0)
truth = rng.integers(0, 2, size=(200, 21))
scores = np.clip(truth * 0.3 + rng.random((200, 21)) * 0.7, 0, 1)
per_class, mean = mean_auc(truth, scores)
print(f"mean AUC over 21 noisy detectors: {mean:.3f}")

###############################################################################
# Phase metrics
# -------------
#
# Per-frame accuracy plus per-class precision, recall and F1. Classes that
# never occur in either sequence are reported as ``None``.

m = phase_metrics([0, 0, 1, 1, 2], [0, 1, 1, 1, 2])
print("accuracy", m["per_frame_accuracy"], "F1", [round(v, 3) for v in m["f1"][:3]],
      "macro F1", round(m["macro_f1"], 4))

###############################################################################
# Reports serialize to flat JSON and a two-column CSV. Fields that do not apply
# to a phase report (the tool metrics) are left empty.

report = MetricsReport.for_phases([0, 0, 1, 1, 2], [0, 1, 1, 1, 2])
filled = [line for line in report.to_csv().splitlines() if not line.endswith(",")]
print("\n".join(filled[:8]))
