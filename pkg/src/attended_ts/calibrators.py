"""Temperature scaling, attended temperature scaling and linear scalers.

Temperatures are searched in ``beta = 1/T``. The TS objective
``mean(-beta*h_y + logsumexp(beta*h))`` is convex in ``beta``, so its
derivative is bracketed and solved directly. The attended loss is not
convex; it is scanned on a log-spaced ``beta`` grid and refined locally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_softmax

from .core import (
    LOG_FLOOR,
    T_MAX,
    T_MIN,
    FitError,
    LinearScaler,
    LogitDataset,
    Temperature,
    ValidationError,
    softmax_with_temperature,
)

LOG_FLOOR_LN = float(np.log(LOG_FLOOR))
DEFAULT_THETA_GRIDS = ((1.0, 0.01), (0.1, 0.001), (0.001, 0.0001))


@dataclass(frozen=True)
class AtsConfig:
    theta_grids: tuple = DEFAULT_THETA_GRIDS
    theta_values: tuple = ()  # extra individual candidates
    t_bounds: tuple = (T_MIN, T_MAX)
    scan_points: int = 256
    refine_tolerance: float = 1e-4

    def __post_init__(self):
        grids = tuple((float(u), float(s)) for u, s in self.theta_grids)
        values = tuple(float(v) for v in self.theta_values)
        if not grids and not values:
            raise ValidationError("no theta candidates configured")
        if any(not 0 <= v <= 1 for v in values):
            raise ValidationError(f"theta values must lie in [0, 1], got {values}")
        for upper, step in grids:
            if step <= 0 or not 0 <= upper <= 1:
                raise ValidationError(f"bad theta grid ({upper}, {step})")
        lo, hi = (float(v) for v in self.t_bounds)
        if not 0 < lo < hi or not np.isfinite(hi):
            raise ValidationError(f"bad temperature bounds {self.t_bounds}")
        if self.scan_points < 16:
            raise ValidationError("scan_points must be >= 16")
        if not self.refine_tolerance > 0:
            raise ValidationError("refine_tolerance must be positive")
        object.__setattr__(self, "theta_grids", grids)
        object.__setattr__(self, "theta_values", values)
        object.__setattr__(self, "t_bounds", (lo, hi))

    def thetas(self) -> np.ndarray:
        """Sorted, de-duplicated union of all theta grids and extra values."""
        values = set(self.theta_values)
        for upper, step in self.theta_grids:
            n = int(np.floor(upper / step + 1e-9))
            values.update(round(j * step, 12) for j in range(n + 1))
        return np.array(sorted(values))

    @property
    def log_beta_bounds(self):
        lo, hi = self.t_bounds
        return float(np.log(1.0 / hi)), float(np.log(1.0 / lo))


@dataclass(frozen=True)
class FitResult:
    method: str
    objective_value: float
    temperature: Temperature | None = None
    scaler: LinearScaler | None = None
    theta: float | None = None
    iterations: int = 0
    converged: bool = True
    at_bound: bool = False
    stationarity_residual: float | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class AttendedSubset:
    """Members of one class's attended set and their true-label flags."""

    class_index: int
    member_indices: np.ndarray
    is_positive: np.ndarray

    def __len__(self):
        return len(self.member_indices)


def _require(validation):
    if not isinstance(validation, LogitDataset):
        raise ValidationError("expected a LogitDataset")
    return validation


# ---------------------------------------------------------------- TS

def _nll_at_beta(h, y, beta):
    z = beta * h
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def _nll_slope(h, y, beta):
    # d/dbeta of the mean NLL: mean(sum_k h_k S_k - h_y)
    z = beta * h
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return float(np.mean(np.sum(h * s, axis=1) - h[np.arange(len(y)), y]))


def ts_stationarity_residual(validation: LogitDataset, t: Temperature | float) -> float:
    """``|sum h_y - sum_i sum_k h_k S_k(T)| / N``; zero at an interior TS optimum."""
    validation = _require(validation)
    t = t if isinstance(t, Temperature) else Temperature(t)
    return abs(_nll_slope(validation.logits, validation.labels, 1.0 / t.value))


def fit_ts(validation: LogitDataset, config: AtsConfig | None = None) -> FitResult:
    """Fit a single temperature by minimising validation mean NLL."""
    validation = _require(validation)
    config = config or AtsConfig()
    h, y = validation.logits, validation.labels
    t_lo, t_hi = config.t_bounds
    b_lo, b_hi = 1.0 / t_hi, 1.0 / t_lo
    g_lo, g_hi = _nll_slope(h, y, b_lo), _nll_slope(h, y, b_hi)
    iterations = 0
    if g_lo >= 0:
        beta, at_bound = b_lo, True
    elif g_hi <= 0:
        beta, at_bound = b_hi, True
    else:
        beta, res = brentq(lambda b: _nll_slope(h, y, b), b_lo, b_hi,
                           xtol=1e-15, rtol=1e-13, full_output=True)
        iterations, at_bound = res.iterations, False
        if not res.converged:
            raise FitError("temperature root search did not converge", 1.0 / beta)
    t = Temperature(min(max(1.0 / beta, t_lo), t_hi))
    return FitResult(
        method="ts",
        temperature=t,
        objective_value=_nll_at_beta(h, y, beta),
        iterations=iterations,
        converged=True,
        at_bound=at_bound,
        stationarity_residual=abs(_nll_slope(h, y, beta)),
    )


# --------------------------------------------------------------- ATS

def build_attended_subsets(validation: LogitDataset, theta: float) -> list:
    """Per-class attended sets: own-label samples plus those with S_k >= theta at T=1."""
    validation = _require(validation)
    if not 0 <= theta <= 1:
        raise ValidationError(f"theta must lie in [0, 1], got {theta!r}")
    s = softmax_with_temperature(validation, 1.0).probs
    y = validation.labels
    subsets = []
    for k in range(validation.class_count):
        own = y == k
        members = np.flatnonzero(own | (s[:, k] >= theta))
        subsets.append(AttendedSubset(k, members, own[members]))
    return subsets


class _ShiftedLogits:
    """Class-major logits shifted so each sample's top logit is 0.

    For ``beta > 0`` the row maximum of ``beta * h`` is ``beta * max(h)``,
    so one shift serves every temperature.
    """

    def __init__(self, h):
        n = h.shape[0]
        top = np.argmax(h, axis=1)
        self.n = n
        self.h_t = np.ascontiguousarray((h - h[np.arange(n), top][:, None]).T)
        self.top_flat = top * n + np.arange(n)

    def logs(self, betas):
        """Unclamped log S and log(1 - S), each shaped ``(B, K*N)``."""
        nb = len(betas)
        log_s = np.multiply.outer(betas, self.h_t)  # (B, K, N)
        e = np.exp(log_s)
        # 1 - S at the top class is the sum of the other classes; summing it
        # directly avoids the cancellation in total - 1
        e.reshape(nb, -1)[:, self.top_flat] = 0.0
        rest = e.sum(axis=1)
        total = rest + 1.0
        log_total = np.log1p(rest)[:, None, :]
        log_s -= log_total
        log_1ms = np.subtract(total[:, None, :], e, out=e)
        log_1ms.reshape(nb, -1)[:, self.top_flat] = rest
        with np.errstate(divide="ignore"):
            np.log(log_1ms, out=log_1ms)
        log_1ms -= log_total
        log_s, log_1ms = log_s.reshape(nb, -1), log_1ms.reshape(nb, -1)
        return log_s, log_1ms


def _log_terms(h, beta):
    """Clamped log S and log(1 - S) at scalar ``beta``, both N x K."""
    log_s, log_1ms = _ShiftedLogits(h).logs(np.array([beta]))
    k = h.shape[1]
    return (np.maximum(log_s.reshape(k, -1).T, LOG_FLOOR_LN),
            np.maximum(log_1ms.reshape(k, -1).T, LOG_FLOOR_LN))


def ats_loss(validation: LogitDataset, subsets, t: Temperature | float) -> float:
    """Mean attended loss over every (class, member) appearance."""
    validation = _require(validation)
    t = t if isinstance(t, Temperature) else Temperature(t)
    log_s, log_1ms = _log_terms(validation.logits, 1.0 / t.value)
    y = validation.labels
    total, count = 0.0, 0
    for sub in subsets:
        idx = np.asarray(sub.member_indices, dtype=np.int64)
        if idx.size == 0:
            continue
        k = sub.class_index
        own = y[idx] == k
        # own-label members reduce to -log S_k
        total += -np.sum(log_s[idx[own], k])
        other = idx[~own]
        total += np.sum(-log_s[other, k] - log_1ms[other, y[other]] + log_1ms[other, k])
        count += idx.size
    if count == 0:
        raise ValidationError("all attended subsets are empty")
    return float(total / count)


class _AttendedObjective:
    """Attended loss for every theta at once via prefix sums.

    Cross-class pairs ``(i, k)`` are sorted by decreasing ``S_k(x_i)`` at
    T=1, so the members admitted by a threshold are a prefix of that order.
    """

    def __init__(self, validation):
        h, y = validation.logits, validation.labels
        n, k = h.shape
        s1 = softmax_with_temperature(validation, 1.0).probs
        cross = np.ones((n, k), dtype=bool)
        cross[np.arange(n), y] = False
        ii, kk = np.nonzero(cross)
        order = np.argsort(-s1[ii, kk], kind="stable")
        ii, kk = ii[order], kk[order]
        self.sorted_conf = s1[ii, kk]
        self.n = n
        self.shifted = _ShiftedLogits(h)
        # flat indices into the class-major (K, N) layout
        self.own_flat = y * n + np.arange(n)
        self.cross_flat = kk * n + ii
        self.cross_row = ii

    def prefix_len(self, theta):
        # number of cross pairs with S >= theta
        return int(np.searchsorted(-self.sorted_conf, -theta, side="right"))

    def prefix_sums(self, betas, ms):
        """Own-label sums, attended sums over each cross prefix ``ms`` and NLL.

        ``ms`` must be sorted ascending. Returns arrays shaped ``(B,)``,
        ``(B, len(ms))`` and ``(B,)``; the NLL is unclamped while the
        attended terms use clamped logs.
        """
        betas = np.asarray(betas, dtype=np.float64)
        ms = np.asarray(ms)
        raw_s, raw_1ms = self.shifted.logs(betas)
        nb = len(betas)
        raw_own = np.take(raw_s, self.own_flat, axis=1)
        nll = -raw_own.mean(axis=1)
        log_s = np.maximum(raw_s, LOG_FLOOR_LN, out=raw_s)
        log_1ms = np.maximum(raw_1ms, LOG_FLOOR_LN, out=raw_1ms)
        own_s = np.take(log_s, self.own_flat, axis=1)
        own_1ms = np.take(log_1ms, self.own_flat, axis=1)
        own = -own_s.sum(axis=1)
        sums = np.zeros((nb, len(ms)))

        # the prefix covering every cross pair is a whole-matrix reduction
        full = ms == len(self.cross_flat)
        if full.any():
            k = log_s.shape[1] // self.n
            sums[:, full] = ((log_1ms.sum(axis=1) - log_s.sum(axis=1))
                             + own_s.sum(axis=1) - k * own_1ms.sum(axis=1))[:, None]
        part = ~full & (ms > 0)
        if part.any():
            ends = ms[part]
            top = int(ends[-1])
            cf, ci = self.cross_flat[:top], self.cross_row[:top]
            cross = (np.take(log_1ms, cf, axis=1) - np.take(own_1ms, ci, axis=1)
                     - np.take(log_s, cf, axis=1))
            # segment sums between consecutive prefix ends, then accumulate
            starts = np.concatenate(([0], ends[:-1]))
            seg = np.add.reduceat(cross, starts, axis=1)
            seg[:, starts == ends] = 0.0
            sums[:, part] = np.cumsum(seg, axis=1)
        return own, sums, nll

    def evaluate(self, betas, m):
        """Attended loss and unclamped NLL at ``betas[g]`` with prefix ``m[g]``."""
        m = np.asarray(m)
        order = np.argsort(m, kind="stable")
        own, sums, nll = self.prefix_sums(np.asarray(betas)[order], m[order])
        rows = np.arange(len(m))
        loss = np.empty(len(m))
        nll_out = np.empty(len(m))
        loss[order] = (own + sums[rows, rows]) / (self.n + m[order])
        nll_out[order] = nll
        return loss, nll_out


_GOLD = (3.0 - np.sqrt(5.0)) / 2.0


class _Brackets:
    """Lock-step golden-section searches on bracketing triples.

    Each row holds ``a <= b <= c`` with ``f(b) <= f(a), f(c)`` and the
    validation NLL at ``a``, ``b`` and ``c``. The answer for a row is always
    its current ``b``, so it is never worse than the scan point it started
    from and always lies inside ``[a, c]``.
    """

    def __init__(self, a, b, c, fb, na, nb, nc):
        self.a, self.b, self.c = a.copy(), b.copy(), c.copy()
        self.fb = fb.copy()
        self.na, self.nb, self.nc = na.copy(), nb.copy(), nc.copy()

    def step(self, rows, evaluate):
        a, b, c = self.a[rows], self.b[rows], self.c[rows]
        right = (c - b) > (b - a)  # probe the longer side
        x = np.where(right, b + _GOLD * (c - b), b - _GOLD * (b - a))
        fx, nx = evaluate(x, rows)
        better = fx < self.fb[rows]
        nb = self.nb[rows]
        # better: the old centre becomes the bound on the probe's far side;
        # otherwise the probe becomes the bound on its own side
        to_a = np.where(better, right, ~right)
        new_bound = np.where(better, b, x)
        new_nll = np.where(better, nb, nx)
        self.a[rows] = np.where(to_a, new_bound, a)
        self.na[rows] = np.where(to_a, new_nll, self.na[rows])
        self.c[rows] = np.where(to_a, c, new_bound)
        self.nc[rows] = np.where(to_a, self.nc[rows], new_nll)
        self.b[rows] = np.where(better, x, b)
        self.nb[rows] = np.where(better, nx, nb)
        self.fb[rows] = np.where(better, fx, self.fb[rows])

    def nll_bounds(self, u_opt, nll_opt):
        """Bounds on the NLL of each row's eventual answer.

        NLL is unimodal in log(beta) with minimum ``nll_opt`` at ``u_opt``.
        """
        upper = np.maximum(self.na, self.nc)
        inside = (self.a <= u_opt) & (u_opt <= self.c)
        lower = np.where(inside, nll_opt, np.minimum(self.na, self.nc))
        return lower, upper


def fit_ats(validation: LogitDataset, config: AtsConfig | None = None) -> FitResult:
    """Attended temperature scaling with theta chosen by validation NLL.

    For each theta in the configured grids the attended loss is minimised
    over T (log-spaced scan, then golden-section refinement around the best
    scan point); the (theta, T) pair with lowest validation NLL wins, ties
    going to the smaller theta.
    """
    validation = _require(validation)
    config = config or AtsConfig()
    obj = _AttendedObjective(validation)
    u_lo, u_hi = config.log_beta_bounds
    grid = np.linspace(u_lo, u_hi, config.scan_points)
    tol = config.refine_tolerance

    thetas = config.thetas()
    prefix = np.array([obj.prefix_len(th) for th in thetas])
    # thetas admitting the same members share one objective; keep the smallest
    group_m, first = np.unique(prefix, return_index=True)
    group_theta = thetas[first]

    scan = np.empty((len(group_m), len(grid)))
    nll_grid = np.empty(len(grid))
    chunk = max(1, 2**18 // validation.logits.size)
    for j in range(0, len(grid), chunk):
        sl = slice(j, j + chunk)
        own, sums, nll_grid[sl] = obj.prefix_sums(np.exp(grid[sl]), group_m)
        scan[:, sl] = ((own[:, None] + sums) / (obj.n + group_m)).T
    best_j = np.argmin(scan, axis=1)
    j_lo = np.maximum(best_j - 1, 0)
    j_hi = np.minimum(best_j + 1, len(grid) - 1)
    rows_all = np.arange(len(group_m))
    br = _Brackets(grid[j_lo], grid[best_j], grid[j_hi], scan[rows_all, best_j],
                   nll_grid[j_lo], nll_grid[best_j], nll_grid[j_hi])

    ts = fit_ts(validation, config)
    u_ts = float(np.log(1.0 / ts.temperature.value))

    def evaluate(x, rows):
        return obj.evaluate(np.exp(x), group_m[rows])

    # Refine all groups in lock-step; a group whose best possible NLL is
    # above another group's worst possible NLL can never be selected.
    alive = np.ones(len(group_m), dtype=bool)
    calls = 0
    while True:
        lower, upper = br.nll_bounds(u_ts, ts.objective_value)
        cutoff = upper[alive].min()
        alive &= lower <= cutoff + 1e-12 * max(1.0, abs(cutoff))
        active = np.flatnonzero(alive & (br.c - br.a > tol))
        if active.size == 0:
            break
        br.step(active, evaluate)
        calls += 1

    live = np.flatnonzero(alive)
    pick = live[np.lexsort((group_theta[live], br.nb[live]))[0]]
    u = float(br.b[pick])
    t_lo, t_hi = config.t_bounds
    return FitResult(
        method="ats",
        temperature=Temperature(min(max(float(np.exp(-u)), t_lo), t_hi)),
        objective_value=float(br.fb[pick]),
        theta=float(group_theta[pick]),
        iterations=calls,
        converged=True,
        at_bound=bool(u <= u_lo or u >= u_hi),
        extra={"validation_nll": float(br.nb[pick]),
               "cross_members": int(group_m[pick]),
               "theta_groups": int(len(group_m))},
    )


# ------------------------------------------------------- linear scalers

def linear_scaler_objective(validation: LogitDataset, scaler: LinearScaler):
    """Mean NLL of ``softmax(W h + b)`` with its gradients ``(loss, dW, db)``."""
    validation = _require(validation)
    h, y = validation.logits, validation.labels
    if scaler.class_count != validation.class_count:
        raise ValidationError("scaler and data disagree on the number of classes")
    return _linear_loss_grad(h, y, scaler.weight, scaler.bias)


def _linear_loss_grad(h, y, w, b):
    n = len(y)
    z = h @ w.T + b
    log_p = log_softmax(z, axis=1)
    loss = float(-np.mean(log_p[np.arange(n), y]))
    r = np.exp(log_p)
    r[np.arange(n), y] -= 1.0
    r /= n
    return loss, r.T @ h, r.sum(axis=0)


def fit_linear_scaler(validation: LogitDataset, kind: str = "matrix",
                      max_iters: int = 500, tolerance: float = 1e-10) -> FitResult:
    """Fit matrix or vector scaling by L-BFGS with a monotone Armijo line search.

    Starts from ``W = I, b = 0``. The vector variant projects every
    gradient onto the diagonal so ``W`` stays diagonal.
    """
    validation = _require(validation)
    if kind not in ("matrix", "vector"):
        raise ValidationError(f"unknown scaler kind {kind!r}")
    h, y = validation.logits, validation.labels
    k = validation.class_count
    mask_w = np.ones((k, k)) if kind == "matrix" else np.eye(k)
    mask = np.concatenate([mask_w.ravel(), np.ones(k)])

    def unpack(x):
        return x[:k * k].reshape(k, k), x[k * k:]

    def fg(x):
        w, b = unpack(x)
        loss, gw, gb = _linear_loss_grad(h, y, w, b)
        return loss, np.concatenate([gw.ravel(), gb]) * mask

    x = np.concatenate([np.eye(k).ravel(), np.zeros(k)])
    f, g = fg(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise FitError("non-finite objective at initialisation", LinearScaler.identity(k, kind))
    hist_s, hist_y = [], []
    history = [float(f)]
    converged, it = False, 0
    for it in range(1, max_iters + 1):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s_, y_ in reversed(list(zip(hist_s, hist_y))):
            a = s_ @ q / (y_ @ s_)
            alphas.append(a)
            q -= a * y_
        if hist_s:
            q *= (hist_s[-1] @ hist_y[-1]) / (hist_y[-1] @ hist_y[-1])
        for (s_, y_), a in zip(zip(hist_s, hist_y), reversed(alphas)):
            q += (a - y_ @ q / (y_ @ s_)) * s_
        d = -q
        slope = g @ d
        if not slope < 0:
            d, slope = -g, -(g @ g)
            hist_s, hist_y = [], []
        if slope == 0:
            converged = True
            break
        step = 1.0
        while True:
            x_new = x + step * d
            f_new, g_new = fg(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                f_new = None
                break
        if f_new is None:
            converged = True  # no further descent possible
            break
        if not np.all(np.isfinite(g_new)):
            w, b = unpack(x)
            raise FitError("non-finite gradient during linear scaler fit",
                           LinearScaler(w * mask_w, b, kind))
        s_vec, y_vec = x_new - x, g_new - g
        if s_vec @ y_vec > 1e-12 * np.sqrt((s_vec @ s_vec) * (y_vec @ y_vec)):
            hist_s.append(s_vec)
            hist_y.append(y_vec)
            if len(hist_s) > 10:
                hist_s.pop(0)
                hist_y.pop(0)
        rel = abs(f - f_new) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        history.append(float(f))
        if rel < tolerance or np.max(np.abs(g)) < 1e-12:
            converged = True
            break
    w, b = unpack(x)
    return FitResult(
        method=kind,
        scaler=LinearScaler(w * mask_w, b, kind),
        objective_value=float(f),
        iterations=it,
        converged=converged,
        extra={"objective_history": history},
    )
