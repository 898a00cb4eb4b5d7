"""Binary CTR metrics: AUC, log-loss, normalized entropy and RIG (natural log)."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

EPS = 1e-6


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def auc(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counted one half.

    Computed from the Mann-Whitney rank sum with average ranks for ties.
    """
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def log_loss(scores, labels) -> float:
    s, y = _arrays(scores, labels)
    p = np.clip(s, EPS, 1.0 - EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def constant_entropy(p: float) -> float:
    """``p ln p + (1-p) ln(1-p)``: log-likelihood per example of always predicting ``p``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"average CTR must lie strictly between 0 and 1, got {p}")
    return p * np.log(p) + (1.0 - p) * np.log(1.0 - p)


def ne(scores, labels) -> float:
    """Mean log-likelihood divided by that of the constant empirical-CTR predictor."""
    s, y = _arrays(scores, labels)
    p = float(y.mean())
    constant_entropy(p)  # validates 0 < p < 1
    # the denominator is evaluated through the same path as the numerator,
    # so the constant-p predictor gives exactly 1
    return log_loss(s, y) / log_loss(np.full_like(y, p), y)


def rig(scores, labels) -> float:
    return 1.0 - ne(scores, labels)


def rig_reward(ll, p_avg: float):
    """Per-example reward ``1 - LL / (p ln p + (1-p) ln(1-p))``.

    ``ll`` is a (non-positive) log-likelihood; the reward is zero for the
    constant predictor at ``p_avg`` and approaches one for perfect predictions.
    """
    return 1.0 - np.asarray(ll, dtype=np.float64) / constant_entropy(p_avg)
