"""Cox partial-likelihood loss for right-censored data (Breslow ties)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import Tensor, as_tensor, custom_op, mul, tensor_sum


@dataclass(frozen=True)
class SurvivalRecord:
    """Observed time (months), event indicator and subject id."""

    y: float
    delta: int
    subject_id: str = ""

    def __post_init__(self):
        if not np.isfinite(self.y) or self.y <= 0:
            raise ValueError(f"survival time must be positive and finite, got {self.y!r} for {self.subject_id!r}")
        if self.delta not in (0, 1):
            raise ValueError(f"event indicator must be 0 or 1, got {self.delta!r} for {self.subject_id!r}")


def as_arrays(records) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, events)`` from records or from a ``(times, events)`` pair."""
    if isinstance(records, tuple) and len(records) == 2 and not isinstance(records[0], SurvivalRecord):
        y, d = records
        return np.asarray(y, dtype=np.float64), np.asarray(d, dtype=np.int64)
    y = np.array([r.y for r in records], dtype=np.float64)
    d = np.array([r.delta for r in records], dtype=np.int64)
    return y, d


@dataclass(frozen=True)
class RiskSetIndex:
    """Risk sets R_i = {j : y_j >= y_i} for every event i.

    Subjects are stored once in descending-time order; each risk set is a
    prefix of that order, so ``prefix_len[i]`` fully describes R_i.
    """

    order: np.ndarray
    events: np.ndarray
    prefix_len: np.ndarray

    def members(self, event_index: int) -> np.ndarray:
        pos = np.flatnonzero(self.events == event_index)
        if pos.size == 0:
            raise KeyError(f"subject {event_index} is not an event")
        return np.sort(self.order[: self.prefix_len[pos[0]]])

    def __len__(self) -> int:
        return int(self.events.size)

    def as_dict(self) -> dict[int, set[int]]:
        return {int(i): set(self.members(int(i)).tolist()) for i in self.events}


def _descending_order(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stable descending sort and, per sorted position, the end of its tie group."""
    order = np.argsort(-y, kind="stable")
    ys = y[order]
    # last sorted position holding the same time value, so ties share a risk set
    group_end = np.searchsorted(-ys, -ys, side="right") - 1
    return order, group_end


def build_risk_sets(records) -> RiskSetIndex:
    y, d = as_arrays(records)
    order, group_end = _descending_order(y)
    event_pos = np.flatnonzero(d[order] == 1)
    events = order[event_pos]
    prefix = group_end[event_pos] + 1
    # report events in ascending time order
    rev = np.argsort(y[events], kind="stable")
    return RiskSetIndex(order=order, events=events[rev], prefix_len=prefix[rev])


def _cox_forward(mu: np.ndarray, y: np.ndarray, d: np.ndarray):
    order, group_end = _descending_order(y)
    mu_s = mu[order]
    d_s = d[order]
    # log-sum-exp over each prefix of the descending order; logaddexp keeps it stable
    cum_lse = np.logaddexp.accumulate(mu_s)
    lse = cum_lse[group_end]
    n_events = d_s.sum()
    loglik = np.sum(d_s * (mu_s - lse))
    return -loglik / n_events, order, group_end, lse, d_s


def cox_loss(scores, records) -> Tensor:
    """Negative Breslow log partial likelihood averaged over events.

    ``records`` is a sequence of :class:`SurvivalRecord` or a ``(times,
    events)`` pair of arrays aligned with ``scores``.
    """
    scores = as_tensor(scores)
    y, d = as_arrays(records)
    mu = scores.data.reshape(-1)
    if mu.size != y.size:
        raise ValueError(f"cox_loss: {mu.size} scores for {y.size} records")
    if mu.size < 2:
        raise ValueError("cox_loss: need at least 2 subjects")
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError("cox_loss: non-finite risk score")
    if d.sum() == 0:
        raise ValueError("no events in risk computation")

    value, order, group_end, lse, d_s = _cox_forward(mu, y, d)
    n_events = d_s.sum()

    def bw(g):
        # d/dmu_j = -(1/E) [delta_j - exp(mu_j) * sum_{events i with j in R_i} exp(-lse_i)]
        # events whose risk set contains sorted position p are those whose tie group ends at or after p
        w = np.where(d_s == 1, -lse, -np.inf)
        n = w.size
        acc = np.full(n, -np.inf)
        np.logaddexp.at(acc, group_end, w)
        tail = np.logaddexp.accumulate(acc[::-1])[::-1]
        mu_s = mu[order]
        grad_sorted = -(d_s - np.exp(mu_s + tail)) / n_events
        grad = np.empty(n)
        grad[order] = grad_sorted
        return (g * grad.reshape(scores.shape),)

    return custom_op((scores,), np.array(value), bw)


def regularized_loss(loss: Tensor, weights: Iterable[Tensor], weight_decay: float) -> Tensor:
    """Add ``weight_decay * sum ||W||^2`` over the given weight tensors."""
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
    if weight_decay == 0:
        return loss
    total = loss
    for w in weights:
        total = total + mul(tensor_sum(mul(w, w)), weight_decay)
    return total

