"""Domain types, tempered softmax and linear logit transforms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

T_MIN = 0.05
T_MAX = 1e6
LOG_FLOOR = 1e-12


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class FitError(RuntimeError):
    """Raised when a calibrator cannot produce a finite fit."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LogitDataset:
    """Labelled logit vectors, one row per sample.

    ``labels`` holds class indices in ``[0, K)`` and ``logits`` is an
    ``N x K`` float matrix. Arrays are copied and made read-only.
    """

    labels: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels)
        if logits.ndim != 2:
            raise ValidationError(f"logits must be 2-D, got shape {logits.shape}")
        n, k = logits.shape
        if k < 2:
            raise ValidationError(f"need at least 2 classes, got {k}")
        if n < 1:
            raise ValidationError("dataset is empty")
        if labels.ndim != 1 or labels.shape[0] != n:
            raise ValidationError(
                f"labels shape {labels.shape} does not match {n} logit rows")
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise ValidationError("labels must be integers")
        elif labels.dtype.kind not in "iu":
            raise ValidationError(f"labels must be integers, got dtype {labels.dtype}")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= k:
            raise ValidationError(f"labels must lie in [0, {k})")
        if not np.all(np.isfinite(logits)):
            raise ValidationError("logits contain NaN or Inf")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "logits", _frozen(logits))

    @property
    def sample_count(self) -> int:
        return self.logits.shape[0]

    @property
    def class_count(self) -> int:
        return self.logits.shape[1]

    def take(self, index) -> "LogitDataset":
        """Row subset (or permutation) by integer index array."""
        index = np.asarray(index, dtype=np.int64)
        return LogitDataset(self.labels[index], self.logits[index])

    def with_labels(self, labels) -> "LogitDataset":
        return LogitDataset(labels, self.logits)

    def __eq__(self, other):
        if not isinstance(other, LogitDataset):
            return NotImplemented
        return (np.array_equal(self.labels, other.labels)
                and np.array_equal(self.logits, other.logits))

    __hash__ = None


@dataclass(frozen=True)
class Temperature:
    value: float

    def __post_init__(self):
        v = float(self.value)
        if not np.isfinite(v) or v <= 0:
            raise ValidationError(f"temperature must be a positive finite number, got {self.value!r}")
        object.__setattr__(self, "value", v)


@dataclass(frozen=True, eq=False)
class LinearScaler:
    """Affine logit map ``W h + b``; ``kind='vector'`` keeps ``W`` diagonal."""

    weight: np.ndarray
    bias: np.ndarray
    kind: Literal["matrix", "vector"] = "matrix"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if self.kind not in ("matrix", "vector"):
            raise ValidationError(f"unknown scaler kind {self.kind!r}")
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"weight must be square, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValidationError(f"bias shape {b.shape} does not match weight {w.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("scaler parameters must be finite")
        if self.kind == "vector" and np.any(w[~np.eye(w.shape[0], dtype=bool)] != 0):
            raise ValidationError("vector scaler must have a diagonal weight")
        object.__setattr__(self, "weight", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @classmethod
    def identity(cls, k, kind="matrix"):
        return cls(np.eye(k), np.zeros(k), kind)

    @property
    def class_count(self) -> int:
        return self.weight.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LinearScaler):
            return NotImplemented
        return (self.kind == other.kind and np.array_equal(self.weight, other.weight)
                and np.array_equal(self.bias, other.bias))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProbMatrix:
    """Row-stochastic ``N x K`` confidence matrix."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 2:
            raise ValidationError(f"probs must be N x K with N >= 1, K >= 2, got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
            raise ValidationError("probabilities must lie in [0, 1]")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-9:
            raise ValidationError("probability rows must sum to 1")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def sample_count(self) -> int:
        return self.probs.shape[0]

    @property
    def class_count(self) -> int:
        return self.probs.shape[1]

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def __eq__(self, other):
        if not isinstance(other, ProbMatrix):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    __hash__ = None


def _as_logits(data) -> np.ndarray:
    if isinstance(data, LogitDataset):
        return data.logits
    logits = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("logits contain NaN or Inf")
    return logits


def _softmax_rows(z):
    # max-subtraction keeps exp() in (0, 1]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_with_temperature(dataset, t: Temperature | float = 1.0) -> ProbMatrix:
    """Softmax of ``logits / T`` per row."""
    t = t if isinstance(t, Temperature) else Temperature(t)
    return ProbMatrix(_softmax_rows(_as_logits(dataset) / t.value))


def log_softmax_with_temperature(dataset, t: Temperature | float = 1.0) -> np.ndarray:
    """Row-wise log-softmax of ``logits / T``.

    The normaliser is ``log1p`` of the non-top mass, so the top class keeps
    full relative precision when it is nearly certain.
    """
    t = t if isinstance(t, Temperature) else Temperature(t)
    z = _as_logits(dataset) / t.value
    rows = np.arange(z.shape[0])
    top = np.argmax(z, axis=1)
    z = z - z[rows, top][:, None]
    e = np.exp(z)
    e[rows, top] = 0.0
    return z - np.log1p(e.sum(axis=1))[:, None]


def scaled_logits(dataset, s: LinearScaler) -> np.ndarray:
    logits = _as_logits(dataset)
    if logits.shape[1] != s.class_count:
        raise ValidationError(
            f"scaler has {s.class_count} classes but data has {logits.shape[1]}")
    return logits @ s.weight.T + s.bias


def apply_linear_scaler(dataset, s: LinearScaler) -> ProbMatrix:
    """Softmax of ``W h_i + b`` per row."""
    return ProbMatrix(_softmax_rows(scaled_logits(dataset, s)))


def predict(probs) -> np.ndarray:
    """Per-row argmax; ties go to the lowest class index."""
    p = probs.probs if isinstance(probs, ProbMatrix) else np.asarray(probs)
    return np.argmax(p, axis=1)


def clamped_log(p):
    return np.log(np.maximum(p, LOG_FLOOR))
