"""Evaluation metrics: ROC-AUC (pair statistic) and F1 variants.

ROC-AUC is computed as the Mann-Whitney statistic via average ranks, which
equals the fraction of (cancer, normal) score pairs ranked correctly with
ties counted 1/2.  F1 is reported for cancer-positive, normal-positive, and
their unweighted (macro) mean; empty denominators yield 0.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ParseError, UndefinedMetric


def roc_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise UndefinedMetric(f"scores/labels must be matching vectors, got {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(f"ROC-AUC needs both classes, got {n_pos} positive / {n_neg} negative")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    rank = 1.0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = (rank + rank + (j - i)) / 2.0  # average rank of the tie group
        ranks[order[i:j + 1]] = avg
        rank += j - i + 1
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    roc_auc: float
    f1: float
    f1_normal: float
    f1_macro: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = 0.5

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"line {ln}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ParseError(f"line {ln}: unknown metric key {key!r}")
            try:
                kwargs[key] = int(val) if key in ("tp", "fp", "tn", "fn") else float(val)
            except ValueError as exc:
                raise ParseError(f"line {ln}: bad value {val!r}") from exc
        missing = set(known) - set(kwargs)
        if missing:
            raise ParseError(f"missing metric keys: {sorted(missing)}")
        return cls(**kwargs)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_scores(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Threshold scores (strict >) and compute F1 for both polarities.

    roc_auc in the returned report is NaN; use compute_report for both.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape or scores.size == 0:
        raise UndefinedMetric(f"scores/labels must be matching non-empty vectors")
    preds = scores > threshold
    actual = labels == 1
    tp = int(np.sum(preds & actual))
    fp = int(np.sum(preds & ~actual))
    tn = int(np.sum(~preds & ~actual))
    fn = int(np.sum(~preds & actual))
    f1_cancer = _f1(tp, fp, fn)
    f1_normal = _f1(tn, fn, fp)  # normal as the positive class
    return MetricsReport(
        roc_auc=float("nan"),
        f1=f1_cancer,
        f1_normal=f1_normal,
        f1_macro=(f1_cancer + f1_normal) / 2.0,
        tp=tp, fp=fp, tn=tn, fn=fn,
        threshold=threshold,
    )


def compute_report(scores, labels, threshold: float = 0.5) -> MetricsReport:
    report = f1_scores(scores, labels, threshold)
    report.roc_auc = roc_auc(scores, labels)
    return report
