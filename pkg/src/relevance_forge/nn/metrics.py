from __future__ import annotations

import numpy as np

from ..errors import MetricError
from . import tensor as T
from .tensor import Tensor

BCE_EPS = 1e-7


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy (natural log) with probabilities clamped to [eps, 1 - eps]."""
    p = T.as_tensor(p)
    y = np.asarray(y, dtype=p.dtype)
    pc = T.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per_item = -(T.log(pc) * y + T.log(1.0 - pc) * (1.0 - y))
    return T.mean_all(per_item)


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney probability P(s1 > s0) + 0.5 * P(s1 == s0)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores for {labels.size} labels")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC needs both classes present")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum()
    ties = (not_above - below).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))
