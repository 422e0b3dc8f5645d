"""Ranking evaluation metrics: AUC, GAUC and LogLoss.

AUC is the tie-aware Mann-Whitney statistic computed by rank-sum in
O(n log n).  Average tied ranks are integer multiples of 0.5, so for
realistic sizes every intermediate sum is exactly representable and the
result is bit-identical to an O(n^2) pairwise count.

GAUC: the impression-weighted mean of per-group AUC, where groups with
a single label class are excluded from both numerator and denominator.
There are uniform-weight variants of this metric in the wild; reported
numbers depend on the choice, so it is fixed and documented here.
Groups are visited in sorted key order, which makes the accumulation
order (and therefore the float result) reproducible.
"""

from __future__ import annotations

import numpy as np

LOGLOSS_CLIP = 1e-7


def _as_arrays(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be equal-length 1-d arrays")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return labels, scores


def _tied_ranks(scores):
    """1-based ranks with ties assigned the mean rank of their run."""
    uniq, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inv]


def auc(labels, scores):
    """Probability that a random positive outscores a random negative,
    ties counted half.  Raises on single-class input (AUC is undefined)."""
    labels, scores = _as_arrays(labels, scores)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc undefined: need at least one positive and one negative")
    ranks = _tied_ranks(scores)
    num = float(ranks[labels == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return num / float(n_pos * n_neg)


def gauc(labels, scores, groups):
    """Impression-weighted mean of per-group AUC.

    Groups lacking either class contribute nothing (neither weight nor
    value).  Raises when no group has both classes.
    """
    labels, scores = _as_arrays(labels, scores)
    groups = np.asarray(groups)
    if groups.shape != labels.shape:
        raise ValueError("groups must align with labels")
    num = 0.0
    den = 0.0
    for g in np.unique(groups):
        mask = groups == g
        sub = labels[mask]
        n_pos = int((sub == 1).sum())
        if n_pos == 0 or n_pos == len(sub):
            continue
        w = float(mask.sum())
        num += w * auc(sub, scores[mask])
        den += w
    if den == 0.0:
        raise ValueError("gauc undefined: no group has both classes")
    return num / den


def logloss(labels, scores):
    """Mean binary cross-entropy; scores clipped to [1e-7, 1 - 1e-7]."""
    labels, scores = _as_arrays(labels, scores)
    p = np.clip(scores, LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP)
    y = labels.astype(np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
