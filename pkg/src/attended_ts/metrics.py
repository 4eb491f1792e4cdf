"""Calibration measures: NLL, ECE, Brier, accuracy and the referral curve."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ProbMatrix, ValidationError, clamped_log, predict

DEFAULT_BINS = 15


@dataclass(frozen=True)
class BinStats:
    bin_index: int
    count: int
    mean_confidence: float
    accuracy: float


@dataclass(frozen=True)
class ReferralCurve:
    """Confidence-threshold sweep for a refer-to-expert policy.

    ``kept_correct_fraction[j]`` is the share of correctly classified samples
    with confidence >= ``thresholds[j]``; ``referred_wrong_fraction[j]`` is
    the share of misclassified samples with confidence below it.
    """

    thresholds: tuple
    kept_correct_fraction: tuple
    referred_wrong_fraction: tuple
    auc: float


def _check(probs, labels):
    if not isinstance(probs, ProbMatrix):
        probs = ProbMatrix(probs)
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != probs.sample_count:
        raise ValidationError(
            f"{labels.shape[0] if labels.ndim == 1 else labels.shape} labels "
            f"for {probs.sample_count} probability rows")
    if labels.dtype.kind not in "iu":
        raise ValidationError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.class_count):
        raise ValidationError(f"labels must lie in [0, {probs.class_count})")
    return probs.probs, labels.astype(np.int64)


def nll(probs, labels) -> float:
    """Mean negative log-likelihood of the true labels (log floored at 1e-12)."""
    p, y = _check(probs, labels)
    return float(-np.mean(clamped_log(p[np.arange(len(y)), y])))


def brier(probs, labels) -> float:
    p, y = _check(probs, labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def accuracy(probs, labels) -> float:
    p, y = _check(probs, labels)
    return float(np.mean(predict(p) == y))


def bin_edges(num_bins):
    return np.arange(num_bins + 1) / num_bins


def ece(probs, labels, num_bins: int = DEFAULT_BINS):
    """Expected calibration error over equal-width confidence bins.

    Bins are ``[l/L, (l+1)/L)`` with the last one closed at 1. Returns the
    weighted gap and one :class:`BinStats` per bin (empty bins report zeros).
    """
    if int(num_bins) != num_bins or num_bins < 1:
        raise ValidationError(f"num_bins must be a positive integer, got {num_bins!r}")
    num_bins = int(num_bins)
    p, y = _check(probs, labels)
    n = len(y)
    conf = p.max(axis=1)
    correct = (predict(p) == y).astype(np.float64)
    idx = np.searchsorted(bin_edges(num_bins), conf, side="right") - 1
    idx = np.clip(idx, 0, num_bins - 1)

    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    hit_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    stats = []
    total = 0.0
    for b in range(num_bins):
        c = int(counts[b])
        if c == 0:
            stats.append(BinStats(b, 0, 0.0, 0.0))
            continue
        mc, acc = conf_sum[b] / c, hit_sum[b] / c
        stats.append(BinStats(b, c, float(mc), float(acc)))
        total += c / n * abs(acc - mc)
    return float(total), stats


def threshold_grid(step):
    if not (0 < step <= 1):
        raise ValidationError(f"step must lie in (0, 1], got {step!r}")
    n = int(np.floor(1.0 / step + 1e-9))
    grid = [round(j * step, 12) for j in range(n + 1)]
    if grid[-1] < 1.0:
        grid.append(1.0)
    return np.array(grid)


def _trapezoid(x, y):
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def referral_curve(probs, labels, step: float = 0.05) -> ReferralCurve:
    """Kept-correct vs referred-wrong fractions over thresholds 0, step, ..., 1.

    An empty correct (or wrong) subset gets fraction 1 at every threshold.
    AUC is the trapezoid area of kept-correct against referred-wrong.
    """
    p, y = _check(probs, labels)
    taus = threshold_grid(step)
    conf = p.max(axis=1)
    correct = predict(p) == y
    c_conf, w_conf = conf[correct], conf[~correct]
    kept = np.array([np.mean(c_conf >= t) if c_conf.size else 1.0 for t in taus])
    referred = np.array([np.mean(w_conf < t) if w_conf.size else 1.0 for t in taus])
    return ReferralCurve(
        thresholds=tuple(float(t) for t in taus),
        kept_correct_fraction=tuple(float(v) for v in kept),
        referred_wrong_fraction=tuple(float(v) for v in referred),
        auc=_trapezoid(referred, kept),
    )
