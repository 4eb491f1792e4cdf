"""Synthetic miscalibrated classifiers with known posteriors.

Posterior rows are ``q_i = softmax(z_i / concentration)`` with ``z_i`` i.i.d.
standard normal, a log-normal cousin of the symmetric Dirichlet: small
concentration gives peaked posteriors, large gives near-uniform ones.
Logits are ``true_temperature * log q_i``, so dividing them by the true
temperature recovers the posteriors and that temperature is the ideal
calibrator. Labels are drawn from ``q_i``. Randomness comes from numpy's
PCG64 generator seeded with ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .core import LogitDataset, ProbMatrix, ValidationError


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 10
    sample_count: int = 12_500
    true_temperature: float = 2.5
    concentration: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        if self.sample_count < 1:
            raise ValidationError("sample_count must be >= 1")
        if not self.true_temperature > 0 or not np.isfinite(self.true_temperature):
            raise ValidationError("true_temperature must be positive")
        if not self.concentration > 0 or not np.isfinite(self.concentration):
            raise ValidationError("concentration must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True, eq=False)
class SynthDataset:
    dataset: LogitDataset
    true_posteriors: ProbMatrix
    spec: SynthSpec | None = None

    def split(self, validation_fraction=0.2):
        """First ``round(fraction * N)`` rows as validation, the rest as test."""
        return split(self.dataset, validation_fraction)


def generate(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal((spec.sample_count, spec.class_count))
    log_q = log_softmax(z / spec.concentration, axis=1)
    q = np.exp(log_q)
    q /= q.sum(axis=1, keepdims=True)
    # inverse-CDF categorical draw, one uniform per row
    u = rng.random(spec.sample_count)
    cdf = np.cumsum(q, axis=1)
    labels = np.minimum((cdf < u[:, None]).sum(axis=1), spec.class_count - 1)
    logits = spec.true_temperature * log_q
    return SynthDataset(LogitDataset(labels, logits), ProbMatrix(q), spec)


def inject_label_noise(dataset: LogitDataset, rate: float, seed: int) -> LogitDataset:
    """Replace each label, with probability ``rate``, by a uniform other class."""
    if not 0 <= rate <= 1:
        raise ValidationError(f"noise rate must lie in [0, 1], got {rate!r}")
    rng = np.random.default_rng(seed)
    n, k = dataset.sample_count, dataset.class_count
    flip = rng.random(n) < rate
    shift = rng.integers(1, k, size=n)
    labels = np.where(flip, (dataset.labels + shift) % k, dataset.labels)
    return dataset.with_labels(labels)


def subsample(dataset: LogitDataset, size: int, seed: int) -> LogitDataset:
    """Uniform sample of ``size`` rows without replacement."""
    if int(size) != size or not 1 <= size <= dataset.sample_count:
        raise ValidationError(
            f"subsample size must lie in [1, {dataset.sample_count}], got {size!r}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(dataset.sample_count)[: int(size)]
    return dataset.take(idx)


def split(dataset: LogitDataset, validation_fraction=0.2):
    if not 0 < validation_fraction < 1:
        raise ValidationError("validation_fraction must lie in (0, 1)")
    n_val = int(round(validation_fraction * dataset.sample_count))
    if not 1 <= n_val < dataset.sample_count:
        raise ValidationError("dataset too small to split")
    idx = np.arange(dataset.sample_count)
    return dataset.take(idx[:n_val]), dataset.take(idx[n_val:])
