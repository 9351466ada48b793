"""Verification metrics: thresholded decisions, confusion matrices, sweeps.

Scores are distances-like: a pair is predicted *similar* when its score is
strictly below the threshold.  Precision, recall and F1 are macro averages
over the two classes (similar, dissimilar).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DataError, Pair, sample_pairs_from_pool
from .seeding import derive_rng

SIMILAR = "similar"
DISSIMILAR = "dissimilar"

REPORT_HEADER = ["threshold", "precision", "recall", "f1", "accuracy", "tp", "fn", "fp", "tn"]


def decide(score: float, threshold: float) -> str:
    return SIMILAR if score < threshold else DISSIMILAR


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are the true class, ``tp`` counts similar pairs predicted similar."""

    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fn + other.fn,
                               self.fp + other.fp, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    threshold: float
    precision: float
    recall: float
    f1: float
    accuracy: float
    per_class: dict
    confusion: ConfusionMatrix

    def row(self) -> list[str]:
        cm = self.confusion
        return [f"{self.threshold:.4f}", f"{self.precision:.6f}", f"{self.recall:.6f}",
                f"{self.f1:.6f}", f"{self.accuracy:.6f}",
                str(cm.tp), str(cm.fn), str(cm.fp), str(cm.tn)]


def _labels_scores(labels, scores):
    y = np.asarray([p.label if isinstance(p, Pair) else p for p in labels], dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape[0] != s.shape[0]:
        raise ValueError(f"{y.shape[0]} pairs but {s.shape[0]} scores")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 (similar) or 1 (dissimilar)")
    return y, s


def confusion(labels, scores, threshold: float) -> ConfusionMatrix:
    """``labels`` may be :class:`Pair` objects or raw 0/1 labels."""
    y, s = _labels_scores(labels, scores)
    pred_sim = s < threshold
    actual_sim = y == 0
    return ConfusionMatrix(
        tp=int(np.sum(actual_sim & pred_sim)),
        fn=int(np.sum(actual_sim & ~pred_sim)),
        fp=int(np.sum(~actual_sim & pred_sim)),
        tn=int(np.sum(~actual_sim & ~pred_sim)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return _ratio(2 * p * r, p + r)


def metrics_from_confusion(cm: ConfusionMatrix, threshold: float = float("nan")) -> MetricsReport:
    if cm.total <= 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    p_sim = _ratio(cm.tp, cm.tp + cm.fp)
    r_sim = _ratio(cm.tp, cm.tp + cm.fn)
    p_dis = _ratio(cm.tn, cm.tn + cm.fn)
    r_dis = _ratio(cm.tn, cm.tn + cm.fp)
    per_class = {
        SIMILAR: {"precision": p_sim, "recall": r_sim, "f1": _f1(p_sim, r_sim)},
        DISSIMILAR: {"precision": p_dis, "recall": r_dis, "f1": _f1(p_dis, r_dis)},
    }
    return MetricsReport(
        threshold=threshold,
        precision=(p_sim + p_dis) / 2,
        recall=(r_sim + r_dis) / 2,
        f1=(per_class[SIMILAR]["f1"] + per_class[DISSIMILAR]["f1"]) / 2,
        accuracy=(cm.tp + cm.tn) / cm.total,
        per_class=per_class,
        confusion=cm,
    )


def evaluate_scores(labels, scores, threshold: float) -> MetricsReport:
    return metrics_from_confusion(confusion(labels, scores, threshold), threshold)


def threshold_sweep(labels, scores, thresholds: Sequence[float]) -> list[MetricsReport]:
    """One report per threshold, ordered by threshold, from a single sort of the scores."""
    grid = sorted(float(t) for t in thresholds)
    if not grid:
        raise ValueError("threshold grid is empty")
    if grid[0] < 0:
        raise ValueError("thresholds must be nonnegative")
    y, s = _labels_scores(labels, scores)
    sim_scores = np.sort(s[y == 0])
    dis_scores = np.sort(s[y == 1])
    reports = []
    for t in grid:
        tp = int(np.searchsorted(sim_scores, t, side="left"))
        fp = int(np.searchsorted(dis_scores, t, side="left"))
        cm = ConfusionMatrix(tp, len(sim_scores) - tp, fp, len(dis_scores) - fp)
        reports.append(metrics_from_confusion(cm, t))
    return reports


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` inclusive grid, e.g. ``0.1:0.9:0.1`` -> 9 values."""
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise ValueError(f"grid must look like start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start or start < 0:
        raise ValueError(f"grid {text!r} must have step > 0 and 0 <= start <= stop")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def write_reports(reports: Sequence[MetricsReport], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow(r.row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_reports(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_table(reports: Sequence[MetricsReport], labels: Optional[Sequence[str]] = None) -> str:
    """Plain-text table: label, threshold, precision, recall, F1, accuracy."""
    labels = labels or [""] * len(reports)
    width = max([len(l) for l in labels] + [5])
    lines = [f"{'':{width}}  Threshold  Precision  Recall    F1  Accuracy"]
    for label, r in zip(labels, reports):
        lines.append(f"{label:{width}}  {r.threshold:9.2f}  {r.precision:9.2f}  {r.recall:6.2f}"
                     f"  {r.f1:4.2f}  {r.accuracy:8.2f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# per species-pair F1


@dataclass
class PairF1Matrix:
    rows: list[str]
    cols: list[str]
    values: np.ndarray        # len(rows) x len(cols)
    pair_counts: np.ndarray   # pairs evaluated per cell

    def write(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["species"] + self.cols)
        for name, vals in zip(self.rows, self.values):
            w.writerow([name] + [f"{v:.4f}" for v in vals])
        Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _cell_pairs(ids_r: list[str], ids_c: list[str], n: int,
                rng: np.random.Generator) -> list[Pair]:
    n_pos = n // 2
    cap_r = len(ids_r) * (len(ids_r) - 1) // 2
    cap_c = len(ids_c) * (len(ids_c) - 1) // 2
    n_pos = min(n_pos, cap_r + cap_c, len(ids_r) * len(ids_c))
    # positives split evenly where both species can supply them
    want_r = min(cap_r, (n_pos + 1) // 2)
    want_c = min(cap_c, n_pos - want_r)
    want_r = min(cap_r, n_pos - want_c)
    pos = []
    if want_r:
        pos += sample_pairs_from_pool({"r": ids_r}, want_r, 1.0, rng)
    if want_c:
        pos += sample_pairs_from_pool({"c": ids_c}, want_c, 1.0, rng)
    neg = sample_pairs_from_pool({"r": ids_r, "c": ids_c}, len(pos), 0.0, rng)
    return pos + neg


def pair_f1_matrix(scorer: Callable[[Sequence[Pair]], np.ndarray],
                   samples_by_species: dict[str, list[str]], rows: Sequence[str],
                   cols: Sequence[str], pairs_per_cell: int = 40, seed: int = 0,
                   threshold: float = 0.5) -> PairF1Matrix:
    """Macro F1 for each (row species, column species) verification task.

    Each cell gets a balanced set: same-species pairs drawn half from each
    species where possible, and an equal number of cross-species pairs.
    ``scorer`` maps a list of pairs to their similarity scores.
    """
    for sp in list(rows) + list(cols):
        if not samples_by_species.get(sp):
            raise DataError(f"species {sp!r} has no samples")
    values = np.zeros((len(rows), len(cols)))
    counts = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if r == c:
                raise DataError(f"cell ({r}, {c}) compares a species with itself")
            rng = derive_rng(seed, "pair-f1", r, c)
            pairs = _cell_pairs(sorted(samples_by_species[r]), sorted(samples_by_species[c]),
                                pairs_per_cell, rng)
            if not pairs:
                raise DataError(f"cell ({r}, {c}) has no positive pairs available")
            report = evaluate_scores(pairs, scorer(pairs), threshold)
            values[i, j] = report.f1
            counts[i, j] = len(pairs)
    return PairF1Matrix(list(rows), list(cols), values, counts)
