"""Text formats: logit tables, posterior sidecars and JSON reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .core import LogitDataset, ProbMatrix, ValidationError
from .harness import CalibrationReport, SweepPoint, SweepResult
from .metrics import ReferralCurve

SCHEMA_VERSION = 1
REPORT_KINDS = ("calibration", "sweep", "referral")


class ParseError(ValidationError):
    def __init__(self, message, line=None, column=None, path=None):
        where = ":".join(str(p) for p in (path, line, column) if p is not None)
        super().__init__(f"{where}: {message}" if where else message)
        self.line, self.column, self.path = line, column, path


def _fmt(v) -> str:
    return format(float(v), ".17g")


# ------------------------------------------------------------ logit tables

def format_logits(dataset: LogitDataset, header: bool = True) -> str:
    k = dataset.class_count
    rows = []
    if header:
        rows.append(",".join(["label"] + [f"logit_{j}" for j in range(k)]))
    for label, row in zip(dataset.labels, dataset.logits):
        rows.append(",".join([str(int(label))] + [_fmt(v) for v in row]))
    return "\n".join(rows) + "\n"


def parse_logits(text: str, path=None) -> LogitDataset:
    """Parse ``label,logit_0,...`` rows; a leading ``label,...`` header is optional."""
    lines = text.splitlines()
    labels, logits, width = [], [], None
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            if lineno == len(lines):
                continue
            raise ParseError("blank row", lineno, path=path)
        cells = [c.strip() for c in raw.split(",")]
        if not labels and width is None and cells[0] == "label":
            width = len(cells)
            if width < 3:
                raise ParseError("need a label and at least two logit columns", lineno, path=path)
            continue
        if width is None:
            width = len(cells)
            if width < 3:
                raise ParseError("need a label and at least two logit columns", lineno, path=path)
        if len(cells) != width:
            raise ParseError(f"expected {width} fields, found {len(cells)}", lineno, path=path)
        try:
            label = int(cells[0])
        except ValueError:
            raise ParseError(f"label {cells[0]!r} is not an integer", lineno, 1, path) from None
        if label < 0:
            raise ParseError(f"label {label} is negative", lineno, 1, path)
        row = []
        for col, cell in enumerate(cells[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{cell!r} is not a number", lineno, col, path) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {cell!r}", lineno, col, path)
            row.append(v)
        labels.append(label)
        logits.append(row)
    if not labels:
        raise ParseError("no data rows", path=path)
    k = width - 1
    bad = next((i for i, y in enumerate(labels) if y >= k), None)
    if bad is not None:
        raise ParseError(f"label {labels[bad]} outside [0, {k})", column=1, path=path)
    return LogitDataset(np.array(labels, dtype=np.int64), np.array(logits, dtype=np.float64))


def read_logits(path) -> LogitDataset:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}", path=path) from None
    return parse_logits(text, path=path)


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def format_posteriors(probs: ProbMatrix) -> str:
    k = probs.class_count
    rows = [",".join(f"p_{j}" for j in range(k))]
    rows.extend(",".join(_fmt(v) for v in row) for row in probs.probs)
    return "\n".join(rows) + "\n"


def parse_posteriors(text: str) -> ProbMatrix:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    body = lines[1:] if lines and lines[0].startswith("p_") else lines
    try:
        return ProbMatrix(np.array([[float(c) for c in ln.split(",")] for ln in body]))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# ----------------------------------------------------------------- reports

def _report_to_dict(r: CalibrationReport) -> dict:
    d = {f.name: getattr(r, f.name) for f in fields(r)}
    d["ece_before_pct"] = 100.0 * r.ece_before
    d["ece_after_pct"] = None if r.ece_after is None else 100.0 * r.ece_after
    return d


def _report_from_dict(d: dict) -> CalibrationReport:
    return CalibrationReport(**{f.name: d[f.name] for f in fields(CalibrationReport)})


def _sweep_to_dict(s: SweepResult) -> dict:
    return {
        "axis": s.axis,
        "repetitions": s.repetitions,
        "seeds": list(s.seeds),
        "std_reported": s.std_reported,
        "points": [{"value": p.value, "mean_nll": p.mean_nll, "std_nll": p.std_nll,
                    "mean_ece": p.mean_ece} for p in s.points],
        "runs": [{"value": v, "seed": sd, "method": m, "nll": n, "ece": e}
                 for v, sd, m, n, e in s.runs],
    }


def _sweep_from_dict(d: dict) -> SweepResult:
    return SweepResult(
        axis=d["axis"],
        points=tuple(SweepPoint(**p) for p in d["points"]),
        repetitions=d["repetitions"],
        seeds=tuple(d["seeds"]),
        std_reported=d["std_reported"],
        runs=tuple((r["value"], r["seed"], r["method"], r["nll"], r["ece"]) for r in d["runs"]),
    )


def _curve_to_dict(c: ReferralCurve) -> dict:
    return {f.name: list(v) if isinstance(v, tuple) else v
            for f in fields(c) for v in [getattr(c, f.name)]}


def _curve_from_dict(d: dict) -> ReferralCurve:
    return ReferralCurve(
        thresholds=tuple(d["thresholds"]),
        kept_correct_fraction=tuple(d["kept_correct_fraction"]),
        referred_wrong_fraction=tuple(d["referred_wrong_fraction"]),
        auc=d["auc"],
    )


@dataclass(frozen=True)
class ReportFile:
    """A versioned report document.

    ``body`` is a tuple of :class:`CalibrationReport` for ``calibration``,
    a :class:`SweepResult` for ``sweep`` and a :class:`ReferralCurve` for
    ``referral``. ``meta`` holds the settings that produced it.
    """

    kind: str
    body: object
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise ValidationError(f"unknown report kind {self.kind!r}")
        if self.kind == "calibration":
            object.__setattr__(self, "body", tuple(self.body))

    def to_dict(self) -> dict:
        if self.kind == "calibration":
            body = [_report_to_dict(r) for r in self.body]
        elif self.kind == "sweep":
            body = _sweep_to_dict(self.body)
        else:
            body = _curve_to_dict(self.body)
        return {"schema_version": self.schema_version, "kind": self.kind,
                "meta": self.meta, "body": body}

    @classmethod
    def from_dict(cls, d: dict) -> "ReportFile":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {d.get('schema_version')!r}")
        kind = d["kind"]
        if kind == "calibration":
            body = tuple(_report_from_dict(r) for r in d["body"])
        elif kind == "sweep":
            body = _sweep_from_dict(d["body"])
        elif kind == "referral":
            body = _curve_from_dict(d["body"])
        else:
            raise ValidationError(f"unknown report kind {kind!r}")
        return cls(kind=kind, body=body, meta=d.get("meta", {}))

    def dumps(self) -> str:
        # allow_nan=False: a NaN in a report means something upstream broke
        return json.dumps(self.to_dict(), sort_keys=True, indent=2,
                          allow_nan=False, default=_json_default) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ReportFile":
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed report: {exc}") from None


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
