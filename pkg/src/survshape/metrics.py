"""Harrell's concordance index and its rank-statistic special case."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .survival import as_arrays


@dataclass(frozen=True)
class EvaluationResult:
    c_index: float
    num_comparable_pairs: int
    num_concordant: int
    num_tied_scores: int


def concordance_index(scores, records) -> EvaluationResult:
    """Harrell's c-index over all comparable pairs.

    A pair (i, j) is comparable when y_i < y_j and subject i had an event.
    It is concordant when score_i > score_j; equal scores count one half.
    Pairs with equal times are never comparable.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y, d = as_arrays(records)
    if s.size != y.size:
        raise ValueError(f"concordance_index: {s.size} scores for {y.size} records")
    if s.size < 2:
        raise ValueError("concordance_index: need at least 2 subjects")

    comparable = concordant = tied = 0
    for i in np.flatnonzero(d == 1):
        later = y > y[i]
        comparable += int(later.sum())
        concordant += int((s[i] > s[later]).sum())
        tied += int((s[i] == s[later]).sum())
    if comparable == 0:
        raise ValueError("no comparable pairs")
    c = (concordant + 0.5 * tied) / comparable
    return EvaluationResult(c_index=c, num_comparable_pairs=comparable, num_concordant=concordant, num_tied_scores=tied)


def c_index(scores, records) -> float:
    return concordance_index(scores, records).c_index


def auc_equivalence_check(scores, binary_labels) -> float:
    """c-index of ``scores`` on an uncensored encoding of a binary outcome.

    Label 1 is encoded as an event at time 1, label 0 as an event at time 2,
    so comparable pairs are exactly the (positive, negative) pairs of ROC AUC.
    """
    labels = np.asarray(binary_labels).reshape(-1)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("binary_labels must contain only 0 and 1")
    times = np.where(labels == 1, 1.0, 2.0)
    events = np.ones(labels.size, dtype=np.int64)
    return c_index(scores, (times, events))
