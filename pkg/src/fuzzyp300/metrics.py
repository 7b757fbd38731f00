"""Binary classification metrics and paired model comparison."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import DimensionError

METRIC_NAMES = ("accuracy", "f1", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(p_hat, z, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with the rule ``predict 1 iff p_hat >= threshold``."""
    p = np.asarray(p_hat, dtype=np.float64)
    z = np.asarray(z)
    if p.shape != z.shape:
        raise DimensionError(f"{p.shape} predictions vs {z.shape} labels")
    pred = p >= threshold
    truth = z.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def scores(c: ConfusionCounts) -> dict:
    """Accuracy, precision, recall, F1 of the positive class.

    Zero denominators give 0 instead of NaN.
    """
    if c.total <= 0:
        raise ValueError("no evaluated trials")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "f1": _ratio(2 * precision * recall, precision + recall),
    }


def weighted_scores(c: ConfusionCounts) -> dict:
    """Support-weighted average of per-class precision/recall/F1 (both classes)."""
    pos = scores(c)
    neg = scores(ConfusionCounts(tp=c.tn, fp=c.fn, fn=c.fp, tn=c.tp))
    w_pos = (c.tp + c.fn) / c.total
    w_neg = 1.0 - w_pos
    out = {"accuracy": pos["accuracy"]}
    for k in ("precision", "recall", "f1"):
        out[k] = w_pos * pos[k] + w_neg * neg[k]
    return out


def evaluation_report(p_hat, z, threshold: float = 0.5) -> dict:
    c = confusion(p_hat, z, threshold)
    return {"confusion": c.as_dict(), "scores": scores(c), "weighted": weighted_scores(c)}


@dataclass(frozen=True)
class PairedResult:
    t: float
    p: float
    df: int
    degenerate: bool


def paired_test(scores_a, scores_b) -> PairedResult:
    """Two-sided paired t-test on per-subject differences ``a - b``.

    Zero variance of the differences is flagged as degenerate with ``p = 1``.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired arrays must be 1-D and equal length, got {a.shape}, {b.shape}")
    n = a.size
    if n < 2:
        raise DimensionError("paired test needs at least two subjects")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0 or not math.isfinite(sd):
        return PairedResult(t=0.0, p=1.0, df=n - 1, degenerate=True)
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return PairedResult(t=t, p=min(p, 1.0), df=n - 1, degenerate=False)


def summarize_subjects(per_subject: dict) -> dict:
    """``{subject: {metric: value}}`` to the mean (standard deviation) layout."""
    out = {"subjects": per_subject, "summary": {}}
    for name in METRIC_NAMES:
        vals = np.array([m[name] for m in per_subject.values()], dtype=np.float64)
        if vals.size == 0:
            continue
        out["summary"][name] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
        }
    return out
