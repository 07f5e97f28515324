"""Loss terms of the joint objective and their composition.

The objective is ``-F_mmi + ce_weight * ce + alpha * rc + beta * rs``.
Each term returns its value and the gradient w.r.t. the network output it
scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Fst, forward_backward


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    ce_weight: float = 5.0

    def __post_init__(self):
        for v in (self.alpha, self.beta, self.ce_weight):
            if not np.isfinite(v):
                raise ValueError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    neg_mmi: float
    ce: float
    rc: float
    rs: float
    total: float

    FIELDS = ("neg_mmi", "ce", "rc", "rs", "total")

    def as_row(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)


def _squared_error(out, target):
    out = np.asarray(out, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if out.shape != target.shape:
        raise ValueError(f"shape mismatch: {out.shape} vs {target.shape}")
    diff = out - target
    n = out.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def recon_error(f_x, x):
    """Mean over frames of ``||f(x) - x||^2`` and its gradient w.r.t. ``f(x)``."""
    return _squared_error(f_x, x)


def restore_error(g_x, y):
    """Same form as :func:`recon_error`, scored against the clean reference ``y``."""
    return _squared_error(g_x, y)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def frame_ce(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T, S = logits.shape
    if labels.shape != (T,):
        raise ValueError(f"need {T} labels, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= S:
        raise ValueError("label out of range")
    logp = log_softmax(logits)
    rows = np.arange(T)
    value = float(-logp[rows, labels].sum() / T)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return value, grad / T


def lfmmi(logits, numerator: Fst, denominator: Fst):
    """``F = logZ_num - logZ_den`` and ``dF/dlogits = gamma_num - gamma_den``.

    The logits act directly as frame log-likelihoods. Raises
    NoAcceptingPathError if the numerator cannot align to the frames.
    """
    logz_num, gamma_num = forward_backward(numerator, logits)
    logz_den, gamma_den = forward_backward(denominator, logits)
    return logz_num - logz_den, gamma_num - gamma_den


def total_loss(neg_mmi: float, ce: float, rc: float, rs: float,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    parts = (float(neg_mmi), float(ce), float(rc), float(rs))
    neg_mmi, ce, rc, rs = parts
    if not all(np.isfinite(p) for p in parts):
        raise FloatingPointError(f"non-finite loss part in {parts}")
    total = neg_mmi + weights.ce_weight * ce + weights.alpha * rc + weights.beta * rs
    return LossBreakdown(neg_mmi, ce, rc, rs, total)
