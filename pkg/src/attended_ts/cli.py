"""Command-line entry point.

Exit codes: 0 success, 2 bad input, 3 fit failure, 4 internal invariant
violation. Every command is deterministic given its inputs and seed.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness, metrics
from .calibrators import AtsConfig
from .core import FitError, ValidationError, predict, softmax_with_temperature
from .io import ReportFile, format_logits, format_posteriors, read_logits, write_text
from .synth import SynthSpec, generate

EXIT_OK, EXIT_INPUT, EXIT_FIT, EXIT_INVARIANT = 0, 2, 3, 4


class InvariantViolation(RuntimeError):
    pass


def parse_theta_grid(text: str):
    """Split ``"1:0.01,0.1:0.001,0.97"`` into grids and single values.

    ``UPPER:STEP`` entries are grids ``0, STEP, ..., UPPER``; bare numbers
    are individual theta candidates.
    """
    grids, values = [], []
    for part in text.split(","):
        try:
            if ":" in part:
                upper, step = part.split(":")
                grids.append((float(upper), float(step)))
            else:
                values.append(float(part))
        except ValueError:
            raise ValidationError(
                f"bad theta grid entry {part!r}; expected UPPER:STEP or a value") from None
    return tuple(grids), tuple(values)


def _points(text: str, integer: bool):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"bad point list {text!r}") from None
    if not values:
        raise ValidationError("empty point list")
    if integer:
        if any(v != int(v) for v in values):
            raise ValidationError("size points must be integers")
        values = [int(v) for v in values]
    return values


def _load_pair(args):
    val, test = read_logits(args.val), read_logits(args.test)
    if val.class_count != test.class_count:
        raise ValidationError(
            f"{args.val} has {val.class_count} classes but {args.test} has {test.class_count}")
    return val, test


def _check_reports(reports):
    for r in reports:
        if r.method in harness.TEMPERATURE_METHODS and r.error is None \
                and r.accuracy_after != r.accuracy_before:
            raise InvariantViolation(f"{r.method} changed test accuracy")


def cmd_calibrate(args) -> int:
    val, test = _load_pair(args)
    if args.theta_grid:
        grids, values = parse_theta_grid(args.theta_grid)
        config = AtsConfig(theta_grids=grids, theta_values=values)
    else:
        config = AtsConfig()
    reports = harness.run_comparison(val, test, {args.method}, config, num_bins=args.bins)
    _check_reports(reports)
    meta = {"command": "calibrate", "method": args.method, "bins": args.bins,
            "seed": args.seed, "theta_grids": [list(g) for g in config.theta_grids],
            "theta_values": list(config.theta_values),
            "validation_samples": val.sample_count, "test_samples": test.sample_count}
    write_text(args.out, ReportFile("calibration", reports, meta).dumps())
    failed = [r for r in reports if r.error is not None]
    if failed:
        print(f"fit failed: {failed[0].error}", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(class_count=args.classes, sample_count=args.samples,
                     true_temperature=args.true_temp, concentration=args.concentration,
                     seed=args.seed)
    data = generate(spec)
    write_text(args.out, format_logits(data.dataset))
    if args.posteriors_out:
        write_text(args.posteriors_out, format_posteriors(data.true_posteriors))
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.reps < 1:
        raise ValidationError("--reps must be >= 1")
    seeds = [int(s) for s in np.random.SeedSequence(args.seed).generate_state(args.reps)]
    base = generate(SynthSpec(seed=args.seed))
    if args.axis == "noise":
        result = harness.sweep_noise(base, _points(args.points, False), args.reps, seeds)
    else:
        result = harness.sweep_size(base, _points(args.points, True), args.reps, seeds)
    meta = {"command": "sweep", "axis": args.axis, "seed": args.seed,
            "synthetic": {"class_count": base.spec.class_count,
                          "sample_count": base.spec.sample_count,
                          "true_temperature": base.spec.true_temperature,
                          "concentration": base.spec.concentration}}
    write_text(args.out, ReportFile("sweep", result, meta).dumps())
    return EXIT_OK


def cmd_referral(args) -> int:
    metrics.threshold_grid(args.step)  # validate before any fitting
    val, test = _load_pair(args)
    meta = {"command": "referral", "probs_from": args.probs_from, "step": args.step}
    raw = softmax_with_temperature(test, 1.0)
    if args.probs_from == "raw":
        probs = raw
    else:
        fit = harness.fit_method(args.probs_from, val)
        probs = harness.calibrated_probs(fit, test)
        meta["temperature"] = fit.temperature.value
        if fit.theta is not None:
            meta["theta"] = fit.theta
        if not np.array_equal(predict(probs), predict(raw)):
            raise InvariantViolation("temperature changed predictions")
    curve = metrics.referral_curve(probs, test.labels, args.step)
    write_text(args.out, ReportFile("referral", curve, meta).dumps())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attended-ts",
                                     description="Post-hoc confidence calibration of logits.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit a calibrator on --val, score it on --test")
    p.add_argument("--method", choices=harness.METHODS, required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-grid", help="comma-separated UPPER:STEP grids and/or single theta values")
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    defaults = SynthSpec()
    p = sub.add_parser("synth", help="write a synthetic logit file")
    p.add_argument("--classes", type=int, default=defaults.class_count)
    p.add_argument("--samples", type=int, default=defaults.sample_count)
    p.add_argument("--true-temp", type=float, default=defaults.true_temperature)
    p.add_argument("--concentration", type=float, default=defaults.concentration)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--out", required=True)
    p.add_argument("--posteriors-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="label-noise or validation-size sweep on synthetic data")
    p.add_argument("--axis", choices=("noise", "size"), required=True)
    p.add_argument("--points", required=True, help="comma-separated axis values")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("referral", help="referral curve and its AUC on --test")
    p.add_argument("--probs-from", choices=("raw", "ts", "ats"), default="raw")
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_referral)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (InvariantViolation, ValueError) as exc:
        # ValueError here is a NaN reaching the report serialiser
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
