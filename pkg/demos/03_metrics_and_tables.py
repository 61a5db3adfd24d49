"""
Metrics from predictions, and from a published table
====================================================

First a report built from random predictions, then the reverse check: the
per-class precision/recall/F1/AUC of a results table, averaged without
weights, give back the headline figures quoted alongside it.
"""

import warnings

import numpy as np

from ctkidney.metrics import (
    UndefinedMetricWarning,
    f1_from,
    macro_average,
    report_from_predictions,
    round_half_up,
)

classes = ["Cyst", "Normal", "Stone", "Tumor"]
rng = np.random.default_rng(0)
y = rng.integers(0, 4, 60)
# a mediocre classifier: the true class gets a bump before normalising
logits = rng.normal(size=(60, 4))
logits[np.arange(60), y] += 1.5
probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)

with warnings.catch_warnings():
    warnings.simplefilter("ignore", UndefinedMetricWarning)
    report = report_from_predictions(y, probs, classes)
print(report.confusion)
print(report.render_table())
print("weighted (supplementary):", {k: round(v, 4) for k, v in report.weighted.items()})

# MobileNet-V2 rows, Tumor / Cyst / Normal / Stone: precision, recall, f1, auc
table = np.array([
    [0.87, 0.98, 0.92, 0.96],
    [0.96, 0.89, 0.92, 0.93],
    [0.79, 0.80, 0.80, 0.89],
    [0.87, 0.83, 0.85, 0.90],
])
print("macro:", [str(round_half_up(100 * macro_average(col))) for col in table.T])

# the F1 column agrees with 2PR/(P+R) only up to the rounding of P and R
print("f1 from P,R:", [str(round_half_up(f1_from(p, r))) for p, r in table[:, :2]])
