"""Experiment drivers: method comparison, label-noise and validation-size sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .calibrators import AtsConfig, FitResult, fit_ats, fit_linear_scaler, fit_ts
from .core import (
    FitError,
    LogitDataset,
    ProbMatrix,
    ValidationError,
    apply_linear_scaler,
    softmax_with_temperature,
)
from .synth import SynthDataset, inject_label_noise, split, subsample

METHODS = ("ts", "ats", "vector", "matrix")
TEMPERATURE_METHODS = ("ts", "ats")


@dataclass(frozen=True)
class CalibrationReport:
    """One method's fitted parameters and before/after test metrics.

    ECE values are fractions; percentages are derived on serialisation.
    """

    method: str
    accuracy_before: float
    accuracy_after: float | None = None
    nll_before: float = 0.0
    nll_after: float | None = None
    ece_before: float = 0.0
    ece_after: float | None = None
    brier_before: float = 0.0
    brier_after: float | None = None
    referral_auc_before: float = 0.0
    referral_auc_after: float | None = None
    parameters: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    error: str | None = None


@dataclass(frozen=True)
class SweepPoint:
    value: float
    mean_nll: dict
    std_nll: dict
    mean_ece: dict


@dataclass(frozen=True)
class SweepResult:
    axis: str
    points: tuple
    repetitions: int
    seeds: tuple
    std_reported: bool
    runs: tuple = ()  # (axis value, seed, method, test nll, test ece) per fit


def fit_method(method: str, validation: LogitDataset, config: AtsConfig | None = None) -> FitResult:
    if method == "ts":
        return fit_ts(validation, config)
    if method == "ats":
        return fit_ats(validation, config)
    if method in ("vector", "matrix"):
        return fit_linear_scaler(validation, method)
    raise ValidationError(f"unknown method {method!r}; expected one of {METHODS}")


def calibrated_probs(fit: FitResult, data: LogitDataset) -> ProbMatrix:
    if fit.scaler is not None:
        return apply_linear_scaler(data, fit.scaler)
    return softmax_with_temperature(data, fit.temperature)


def _parameters(fit: FitResult) -> dict:
    if fit.scaler is not None:
        return {"kind": fit.scaler.kind,
                "weight": fit.scaler.weight.tolist(),
                "bias": fit.scaler.bias.tolist()}
    params = {"temperature": fit.temperature.value}
    if fit.theta is not None:
        params["theta"] = fit.theta
    return params


def _diagnostics(fit: FitResult) -> dict:
    diag = {"objective_value": fit.objective_value, "iterations": fit.iterations,
            "converged": fit.converged, "at_bound": fit.at_bound}
    if fit.stationarity_residual is not None:
        diag["stationarity_residual"] = fit.stationarity_residual
    diag.update(fit.extra)
    return diag


def _scores(probs, labels, num_bins, step):
    return {
        "accuracy": metrics.accuracy(probs, labels),
        "nll": metrics.nll(probs, labels),
        "ece": metrics.ece(probs, labels, num_bins)[0],
        "brier": metrics.brier(probs, labels),
        "referral_auc": metrics.referral_curve(probs, labels, step).auc,
    }


def run_comparison(validation: LogitDataset, test: LogitDataset, methods,
                   config: AtsConfig | None = None, num_bins: int = metrics.DEFAULT_BINS,
                   referral_step: float = 0.05) -> list:
    """Fit each method on ``validation`` and score it on ``test``.

    Reports come back in the canonical order of :data:`METHODS`. A method
    that fails to fit yields a report with ``error`` set instead of
    aborting the others.
    """
    if validation.class_count != test.class_count:
        raise ValidationError(
            f"validation has {validation.class_count} classes, test has {test.class_count}")
    methods = set(methods)
    unknown = methods - set(METHODS)
    if unknown:
        raise ValidationError(f"unknown methods {sorted(unknown)}")
    if not methods:
        return []
    before = _scores(softmax_with_temperature(test, 1.0), test.labels, num_bins, referral_step)
    base = {f"{k}_before": v for k, v in before.items()}
    reports = []
    for method in (m for m in METHODS if m in methods):
        try:
            fit = fit_method(method, validation, config)
        except FitError as exc:
            reports.append(CalibrationReport(method=method, error=str(exc), **base))
            continue
        after = _scores(calibrated_probs(fit, test), test.labels, num_bins, referral_step)
        reports.append(CalibrationReport(
            method=method,
            parameters=_parameters(fit),
            diagnostics=_diagnostics(fit),
            **base,
            **{f"{k}_after": v for k, v in after.items()},
        ))
    return reports


def _halves(base):
    if isinstance(base, SynthDataset):
        return base.split()
    if isinstance(base, LogitDataset):
        return split(base)
    validation, test = base
    return validation, test


def _sweep(axis, values, seeds, repetitions, make_validation, test, config, methods, num_bins):
    seeds = tuple(int(s) for s in seeds)
    if repetitions is None:
        repetitions = len(seeds)
    if repetitions != len(seeds) or repetitions < 1:
        raise ValidationError("repetitions must equal the number of seeds (>= 1)")
    runs, points = [], []
    for value in sorted(values):
        nll = {m: [] for m in methods}
        ece = {m: [] for m in methods}
        for seed in seeds:
            validation = make_validation(value, seed)
            for method in methods:
                probs = calibrated_probs(fit_method(method, validation, config), test)
                n = metrics.nll(probs, test.labels)
                e = metrics.ece(probs, test.labels, num_bins)[0]
                nll[method].append(n)
                ece[method].append(e)
                runs.append((float(value), seed, method, n, e))
        points.append(SweepPoint(
            value=float(value),
            mean_nll={m: float(np.mean(v)) for m, v in nll.items()},
            std_nll={m: float(np.std(v, ddof=1)) if repetitions > 1 else 0.0
                     for m, v in nll.items()},
            mean_ece={m: float(np.mean(v)) for m, v in ece.items()},
        ))
    return SweepResult(axis=axis, points=tuple(points), repetitions=repetitions,
                       seeds=seeds, std_reported=repetitions > 1, runs=tuple(runs))


def sweep_noise(base, rates, repetitions=None, seeds=(0, 1, 2, 3, 4),
                config: AtsConfig | None = None, methods=TEMPERATURE_METHODS,
                num_bins: int = metrics.DEFAULT_BINS) -> SweepResult:
    """Label noise on the validation half only; scoring on the clean test half."""
    if any(not 0 <= r <= 1 for r in rates):
        raise ValidationError("noise rates must lie in [0, 1]")
    validation, test = _halves(base)
    return _sweep("noise_rate", rates, seeds, repetitions,
                  lambda rate, seed: inject_label_noise(validation, rate, seed),
                  test, config, tuple(methods), num_bins)


def sweep_size(base, sizes, repetitions=None, seeds=(0, 1, 2, 3, 4),
               config: AtsConfig | None = None, methods=TEMPERATURE_METHODS,
               num_bins: int = metrics.DEFAULT_BINS) -> SweepResult:
    """Random validation subsets of each size; scoring on the fixed test half."""
    validation, test = _halves(base)
    for size in sizes:
        if int(size) != size or not 1 <= size <= validation.sample_count:
            raise ValidationError(
                f"size {size!r} outside [1, {validation.sample_count}]")
    return _sweep("validation_size", sizes, seeds, repetitions,
                  lambda size, seed: subsample(validation, int(size), seed),
                  test, config, tuple(methods), num_bins)
