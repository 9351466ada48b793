"""
Confusion matrices, macro metrics and threshold sweeps
======================================================

A pair is called *similar* when its score is strictly below the threshold.
Precision, recall and F1 are averaged over the two classes.
"""

import numpy as np

from siamese_zsl.metrics import (ConfusionMatrix, format_table, metrics_from_confusion,
                                 parse_grid, threshold_sweep)

# rows are the true class: similar pairs first, then dissimilar ones
cm = ConfusionMatrix(tp=24, fn=18, fp=15, tn=27)
report = metrics_from_confusion(cm, threshold=0.5)
print(format_table([report], ["84 pairs"]))
print("per class:", report.per_class)

###############################################################################
# Sweeping thresholds sorts the scores once and counts with a binary search.
# Every row agrees with evaluating that threshold on its own.

rng = np.random.default_rng(0)
labels = np.repeat([0, 1], 500)
scores = np.concatenate([rng.beta(2, 5, 500), rng.beta(5, 2, 500)])
reports = threshold_sweep(labels, scores, parse_grid("0.1:0.9:0.1"))
print(format_table(reports))
