"""Detection metrics: F1, ROC AUC, and equal error rate.

AUC is the Mann-Whitney pairwise statistic (ties count half), computed
from average ranks; EER sweeps thresholds at the distinct scores and
linearly interpolates the operating-point segment where the false
positive and false negative rates cross.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingleClassInput


@dataclass
class ScoredSet:
    """Parallel scores in [0, 1] and binary labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.size == 0:
            raise ValueError("empty scored set")
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must be parallel")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0/1")

    @property
    def n_pos(self):
        return int(self.labels.sum())

    @property
    def n_neg(self):
        return int(self.labels.size - self.labels.sum())

    def require_both_classes(self):
        if self.n_pos == 0 or self.n_neg == 0:
            raise SingleClassInput("need at least one positive and one negative")


def f1(scored: ScoredSet, threshold=0.5) -> float:
    """Harmonic mean of precision/recall with prediction = score >= threshold."""
    preds = scored.scores >= threshold
    tp = int(np.sum(preds & (scored.labels == 1)))
    fp = int(np.sum(preds & (scored.labels == 0)))
    fn = int(np.sum(~preds & (scored.labels == 1)))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2 * tp + fp + fn)


def _average_ranks(scores):
    n = scores.size
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    new_group = np.r_[True, s[1:] != s[:-1]]
    group_ids = np.cumsum(new_group) - 1
    counts = np.bincount(group_ids)
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    group_rank = starts + (counts + 1) / 2.0  # 1-based average rank
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[group_ids]
    return ranks


def auc(scored: ScoredSet) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties = 0.5.

    Evaluated on the canonical branch (the smaller of U and its
    complement) so that auc(s) + auc(1 - s) is exactly 1.
    """
    scored.require_both_classes()
    n_pos, n_neg = scored.n_pos, scored.n_neg
    ranks = _average_ranks(scored.scores)
    # 2U and 2*n_pos*n_neg are integer-valued and exactly representable
    two_u = 2.0 * ranks[scored.labels == 1].sum() - n_pos * (n_pos + 1)
    denom = 2.0 * n_pos * n_neg
    if two_u <= n_pos * n_neg:
        return two_u / denom
    return 1.0 - (denom - two_u) / denom


def _operating_points(scored):
    """FPR/FNR at thresholds = distinct scores (ascending) plus +inf."""
    pos = np.sort(scored.scores[scored.labels == 1])
    neg = np.sort(scored.scores[scored.labels == 0])
    thresholds = np.unique(scored.scores)
    # prediction: score >= threshold
    fpr = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    fnr = np.searchsorted(pos, thresholds, side="left") / pos.size
    fpr = np.r_[fpr, 0.0]
    fnr = np.r_[fnr, 1.0]
    return fpr, fnr


def eer(scored: ScoredSet) -> float:
    """Rate at which false positives equal false negatives.

    Finds the adjacent pair of operating points where FPR - FNR changes
    sign and interpolates linearly along that segment to FPR = FNR.
    """
    scored.require_both_classes()
    fpr, fnr = _operating_points(scored)
    diff = fpr - fnr
    for k in range(diff.size - 1):
        if diff[k] == 0.0:
            return float(fpr[k])
        if diff[k] > 0.0 and diff[k + 1] <= 0.0:
            span = diff[k] - diff[k + 1]
            s = diff[k] / span
            return float(fpr[k] + s * (fpr[k + 1] - fpr[k]))
    return float(fpr[-1])


def best_f1(scored: ScoredSet):
    """Max F1 over thresholds at the distinct scores; returns (f1, threshold)."""
    best, best_thr = 0.0, 0.5
    for thr in np.unique(scored.scores):
        val = f1(scored, threshold=float(thr))
        if val > best:
            best, best_thr = val, float(thr)
    return best, best_thr


def build_report(scores, labels, strategies=None, threshold=0.5) -> dict:
    """Evaluation report; negatives may carry a per-strategy provenance."""
    scored = ScoredSet(np.asarray(scores), np.asarray(labels))
    scored.require_both_classes()
    bf1, bthr = best_f1(scored)
    report = {
        "n_pos": scored.n_pos,
        "n_neg": scored.n_neg,
        "f1": f1(scored, threshold),
        "best_f1": bf1,
        "best_f1_threshold": bthr,
        "auc": auc(scored),
        "eer": eer(scored),
        "per_strategy": {},
    }
    if strategies is not None:
        strategies = list(strategies)
        pos_mask = scored.labels == 1
        for strat in sorted({s for s, is_pos in zip(strategies, pos_mask) if not is_pos and s}):
            mask = pos_mask | np.array([s == strat for s in strategies])
            subset = ScoredSet(scored.scores[mask], scored.labels[mask])
            report["per_strategy"][strat] = {
                "f1": f1(subset, threshold),
                "auc": auc(subset),
                "eer": eer(subset),
            }
    return report
