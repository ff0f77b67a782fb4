"""Classification and segmentation losses.

Focal loss on sigmoid probabilities: FL(p_t) = -alpha_t (1 - p_t)^gamma log(p_t)
with p_t = p for cancer targets and 1 - p otherwise.  p_t is clamped to
[1e-7, 1 - 1e-7] before the log.  Batch reduction is the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, InvalidCounts, InvalidLabel
from .tensor import Tensor, apply_op, clamp, log, mul, powc, reduce_mean, sigmoid

PT_CLAMP = 1e-7


@dataclass(frozen=True)
class FocalConfig:
    alpha1: float = 0.95  # weight of the cancer class
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha1 < 1.0:
            raise InvalidConfig(f"alpha1 must lie in (0,1), got {self.alpha1}")
        if self.gamma < 0.0:
            raise InvalidConfig(f"gamma must be >= 0, got {self.gamma}")

    @property
    def alpha0(self) -> float:
        return 1.0 - self.alpha1


def alpha_from_counts(n_cancer: int, n_total: int, gamma: float = 2.0) -> FocalConfig:
    """alpha1 = 1 - N_cancer / N_total (inverse-prevalence weighting)."""
    if n_total <= 0 or n_cancer < 0 or n_cancer > n_total:
        raise InvalidCounts(f"bad counts: {n_cancer} cancer of {n_total}")
    alpha1 = 1.0 - n_cancer / n_total
    if not 0.0 < alpha1 < 1.0:
        raise InvalidCounts(
            f"counts {n_cancer}/{n_total} give degenerate alpha1 {alpha1}"
        )
    return FocalConfig(alpha1=alpha1, gamma=gamma)


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise InvalidLabel(f"labels must be a non-empty vector, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidLabel("labels must be 0 (normal) or 1 (cancer)")
    return labels.astype(np.float64)


def focal_terms(logits: Tensor, labels, alpha_pos: float, alpha_neg: float,
                gamma: float) -> Tensor:
    """Per-sample focal terms with explicit class weights (no sum-to-1 rule)."""
    y = _check_labels(labels)
    if logits.shape != y.shape:
        raise InvalidLabel(f"logits shape {logits.shape} != labels shape {y.shape}")
    p = sigmoid(logits)
    yt = Tensor(y)
    # p_t = y*p + (1-y)*(1-p)
    pt = mul(yt, p) + mul(Tensor(1.0 - y), 1.0 - p)
    alpha = Tensor(np.where(y == 1.0, alpha_pos, alpha_neg))
    focus = powc(1.0 - pt, gamma)
    return -(alpha * focus * log(clamp(pt, PT_CLAMP, 1.0 - PT_CLAMP)))


def focal_loss(logits: Tensor, labels, cfg: FocalConfig) -> Tensor:
    """Mean focal loss over a batch of logits."""
    return reduce_mean(focal_terms(logits, labels, cfg.alpha1, cfg.alpha0, cfg.gamma))


def bce_with_logits_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable mean binary cross-entropy on raw logits.

    Used for per-pixel segmentation training; targets are 0/1 arrays of the
    same shape as the logits.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise InvalidLabel(f"targets shape {t.shape} != logits shape {logits.shape}")
    x = logits.values
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.float64(loss.sum() / n)

    def grad_fn(g):
        p = np.empty_like(x)
        pos = x >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ev = np.exp(x[~pos])
        p[~pos] = ev / (1.0 + ev)
        return (g * (p - t) / n,)

    return apply_op("bce_with_logits", (logits,), out, grad_fn)
