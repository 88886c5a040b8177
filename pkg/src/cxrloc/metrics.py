"""Exact rank-based classification metrics and the attention-localization
score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise MetricError("scores and labels must be equal-length 1-d arrays")
        if not np.isin(self.labels, (0, 1)).all():
            raise MetricError("labels must be 0 or 1")


def auroc(s: ScoredSet) -> float:
    """Probability that a random positive outranks a random negative, ties
    counted one half (equals the trapezoidal ROC area)."""
    pos = s.scores[s.labels == 1]
    neg = s.scores[s.labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    # tie-aware average ranks via sort
    all_scores = np.concatenate([pos, neg])
    order = np.argsort(all_scores, kind="stable")
    ranks = np.empty(len(all_scores))
    sorted_scores = all_scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum_pos = ranks[: len(pos)].sum()
    n_pos, n_neg = len(pos), len(neg)
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_curve(s: ScoredSet):
    """Precision/recall at every distinct threshold (descending scores, tied
    scores enter together) and the trapezoidal area over recall.

    Returns (points, area); points start at (recall=0, precision=1).
    """
    n_pos = int((s.labels == 1).sum())
    if n_pos == 0:
        raise MetricError("PR curve needs at least one positive")
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]

    points = [(0.0, 1.0)]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[j + 1] == scores[i]:
            j += 1
        tp += int((labels[i:j + 1] == 1).sum())
        fp += int((labels[i:j + 1] == 0).sum())
        points.append((tp / n_pos, tp / (tp + fp)))
        i = j + 1

    area = 0.0
    for (r0, p0), (r1, p1) in zip(points[:-1], points[1:]):
        area += (r1 - r0) * (p1 + p0) / 2.0
    return points, float(area)


def attention_in_box(attention: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of attention mass inside the target mask; 0 when the map is
    all-zero."""
    attention = np.asarray(attention, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if attention.shape != mask.shape:
        raise MetricError(f"grid mismatch: {attention.shape} vs {mask.shape}")
    total = attention.sum()
    if total == 0.0:
        return 0.0
    return float((attention * mask).sum() / total)
