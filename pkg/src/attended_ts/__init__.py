"""Attended temperature scaling and related post-hoc calibrators."""

from .calibrators import (
    AtsConfig,
    AttendedSubset,
    FitResult,
    ats_loss,
    build_attended_subsets,
    fit_ats,
    fit_linear_scaler,
    fit_ts,
    linear_scaler_objective,
    ts_stationarity_residual,
)
from .core import (
    FitError,
    LinearScaler,
    LogitDataset,
    ProbMatrix,
    Temperature,
    ValidationError,
    apply_linear_scaler,
    predict,
    softmax_with_temperature,
)
from .harness import CalibrationReport, SweepResult, run_comparison, sweep_noise, sweep_size
from .metrics import ReferralCurve, accuracy, brier, ece, nll, referral_curve
from .synth import SynthDataset, SynthSpec, generate, inject_label_noise, split, subsample

__all__ = [name for name in dir() if not name.startswith("_")]
