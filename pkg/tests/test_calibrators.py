import mpmath as mp
import numpy as np
import pytest
from scipy.optimize import minimize_scalar

import oracles
from attended_ts import metrics
from attended_ts.calibrators import (
    AtsConfig,
    ats_loss,
    build_attended_subsets,
    fit_ats,
    fit_linear_scaler,
    fit_ts,
    linear_scaler_objective,
    ts_stationarity_residual,
)
from attended_ts.core import (
    T_MAX,
    T_MIN,
    LinearScaler,
    LogitDataset,
    ValidationError,
    apply_linear_scaler,
    softmax_with_temperature,
)
from attended_ts.synth import SynthSpec, generate


def _small(seed=0, n=300, k=4, c=2.0, concentration=0.5):
    return generate(SynthSpec(class_count=k, sample_count=n, true_temperature=c,
                              concentration=concentration, seed=seed)).dataset


class TestAtsConfig:
    def test_default_candidates(self):
        th = AtsConfig().thetas()
        assert th[0] == 0.0 and th[-1] == 1.0
        assert np.all(np.diff(th) > 0)
        # 101 + 100 + 10 values, with 0 and the 0.01-multiples of [0, 0.1] shared
        assert len(th) == 101 + 100 + 10 - 10 - 1
        for v in (0.04, 0.057, 0.0003):
            assert np.any(np.isclose(th, v, rtol=0, atol=1e-15))

    def test_extra_values(self):
        th = AtsConfig(theta_grids=(), theta_values=(0.97, 0.5)).thetas()
        np.testing.assert_array_equal(th, [0.5, 0.97])

    @pytest.mark.parametrize("kwargs", [
        {"theta_grids": ()},
        {"theta_grids": ((1.0, 0.0),)},
        {"theta_grids": ((1.5, 0.1),)},
        {"theta_values": (1.2,)},
        {"t_bounds": (2.0, 1.0)},
        {"t_bounds": (0.0, 1.0)},
        {"scan_points": 3},
        {"refine_tolerance": 0.0},
    ])
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(ValidationError):
            AtsConfig(**kwargs)


class TestFitTs:
    def test_matches_grid_search(self):
        d = _small(seed=3, n=2000)
        t = fit_ts(d).temperature.value
        t_grid, _ = oracles.grid_search_temperature(d.logits, d.labels, 0.05, 100.0)
        assert t == pytest.approx(t_grid, rel=1e-3)

    def test_objective_is_validation_nll(self):
        d = _small(seed=4)
        fit = fit_ts(d)
        assert fit.objective_value == pytest.approx(
            oracles.nll_longdouble(d.logits, d.labels, 1 / fit.temperature.value), rel=1e-12)

    def test_stationary_and_locally_optimal(self):
        d = _small(seed=5)
        fit = fit_ts(d)
        t = fit.temperature.value
        assert not fit.at_bound
        assert fit.stationarity_residual < 1e-10
        assert ts_stationarity_residual(d, t) < 1e-10
        nll = lambda tt: metrics.nll(softmax_with_temperature(d, tt), d.labels)
        assert nll(t) <= min(nll(t * 1.001), nll(t / 1.001))

    def test_all_wrong_hits_upper_bound(self):
        logits = np.array([[3.0, 0.0], [0.0, 2.0], [1.0, 0.5]])
        fit = fit_ts(LogitDataset([1, 0, 1], logits))
        assert fit.at_bound and fit.temperature.value == T_MAX

    def test_separable_hits_lower_bound(self):
        logits = np.array([[3.0, 0.0], [0.0, 2.0]])
        fit = fit_ts(LogitDataset([0, 1], logits))
        assert fit.at_bound and fit.temperature.value == T_MIN

    def test_single_sample_returns(self):
        fit = fit_ts(LogitDataset([0], [[1.0, 2.0, 0.5]]))
        assert fit.at_bound

    def test_rejects_non_dataset(self):
        with pytest.raises(ValidationError):
            fit_ts(np.zeros((3, 2)))


def _fixture_k3():
    # six samples, K = 3
    logits = np.array([
        [2.0, 0.5, -1.0],
        [0.1, 0.3, 0.0],
        [-0.5, 1.5, 1.2],
        [1.0, 1.0, -2.0],
        [0.0, -1.0, 2.5],
        [0.7, 0.2, 0.4],
    ])
    return LogitDataset([0, 2, 1, 1, 2, 0], logits)


class TestAttendedSubsets:
    def test_threshold_membership_example(self):
        logits = np.log(np.array([[0.35, 0.05, 0.60]]))
        subsets = build_attended_subsets(LogitDataset([2], logits), 0.3)
        assert [len(s) for s in subsets] == [1, 0, 1]
        assert not subsets[0].is_positive[0] and subsets[2].is_positive[0]

    def test_theta_zero_takes_everything(self):
        d = _fixture_k3()
        for s in build_attended_subsets(d, 0.0):
            np.testing.assert_array_equal(s.member_indices, np.arange(6))

    def test_high_theta_keeps_own_labels(self):
        d = _fixture_k3()
        for s in build_attended_subsets(d, 0.99):
            np.testing.assert_array_equal(s.member_indices, np.flatnonzero(d.labels == s.class_index))
            assert s.is_positive.all()

    @pytest.mark.parametrize("theta", [-0.1, 1.1])
    def test_rejects_theta_outside_unit_interval(self, theta):
        with pytest.raises(ValidationError):
            build_attended_subsets(_fixture_k3(), theta)


class TestAtsLoss:
    def test_matches_term_enumeration(self):
        d = _fixture_k3()
        got = ats_loss(d, build_attended_subsets(d, 0.2), 1.5)
        want = oracles.mp_ats_loss(d.logits, d.labels, 0.2, 1.5)
        assert got == pytest.approx(float(want), rel=1e-13)

    @pytest.mark.parametrize("theta, t", [(0.0, 0.3), (0.05, 4.0), (0.3, 1.0), (0.6, 0.08)])
    def test_matches_clamped_term_enumeration(self, theta, t):
        d = _small(seed=9, n=40, k=5, concentration=0.8)
        got = ats_loss(d, build_attended_subsets(d, theta), t)
        want = oracles.mp_ats_loss(d.logits, d.labels, theta, t, floor=1e-12)
        assert got == pytest.approx(float(want), rel=1e-12)

    def test_floor_inactive_at_moderate_temperature(self):
        d = _small(seed=9, n=40, k=5, concentration=0.8)
        got = ats_loss(d, build_attended_subsets(d, 0.1), 3.0)
        assert got == pytest.approx(float(oracles.mp_ats_loss(d.logits, d.labels, 0.1, 3.0)), rel=1e-12)

    def test_own_label_only_equals_nll(self):
        d = _fixture_k3()
        subsets = build_attended_subsets(d, 0.99)
        for t in (0.2, 1.0, 7.0):
            nll = metrics.nll(softmax_with_temperature(d, t), d.labels)
            assert ats_loss(d, subsets, t) == pytest.approx(nll, abs=1e-14)

    def test_empty_subsets_rejected(self):
        d = _fixture_k3()
        with pytest.raises(ValidationError):
            ats_loss(d, [], 1.0)


def _ats_oracle(d, config):
    """Bounded scalar minimisation of each theta's attended loss from a dense scan."""
    best = None
    lo, hi = config.log_beta_bounds
    grid = np.linspace(lo, hi, 2000)
    for theta in config.thetas():
        subsets = build_attended_subsets(d, theta)
        f = lambda u: ats_loss(d, subsets, float(np.exp(-u)))
        j = int(np.argmin([f(u) for u in grid]))
        res = minimize_scalar(f, bounds=(grid[max(j - 1, 0)], grid[min(j + 1, 1999)]),
                              method="bounded", options={"xatol": 1e-10})
        t = float(np.exp(-res.x))
        nll = oracles.nll_longdouble(d.logits, d.labels, 1 / t)
        if best is None or nll < best[0] - 1e-15:
            best = (nll, theta, t, res.fun)
    return best


class TestFitAts:
    def test_matches_brute_force_search(self):
        d = _small(seed=12, n=150, k=3, c=2.5, concentration=0.6)
        config = AtsConfig(theta_grids=((1.0, 0.05),))
        fit = fit_ats(d, config)
        nll, theta, t, loss = _ats_oracle(d, config)
        assert fit.extra["validation_nll"] == pytest.approx(nll, rel=1e-7)
        # the chosen temperature minimises its own theta's attended loss
        subsets = build_attended_subsets(d, fit.theta)
        f = lambda tt: ats_loss(d, subsets, tt)
        t_fit = fit.temperature.value
        assert f(t_fit) <= min(f(t_fit * 1.001), f(t_fit / 1.001)) + 1e-12
        assert fit.objective_value == pytest.approx(f(t_fit), rel=1e-12)

    def test_reports_lowest_validation_nll(self):
        d = _small(seed=13, n=400, k=5, concentration=0.3)
        fit = fit_ats(d)
        nll = metrics.nll(softmax_with_temperature(d, fit.temperature), d.labels)
        assert fit.extra["validation_nll"] == pytest.approx(nll, rel=1e-9)
        # no candidate can beat the TS optimum on validation NLL
        assert nll >= fit_ts(d).objective_value - 1e-12

    def test_reduces_to_ts_when_no_cross_members(self):
        d = _small(seed=14, n=500)
        fit = fit_ats(d, AtsConfig(theta_grids=(), theta_values=(1.0,)))
        assert fit.extra["cross_members"] == 0
        assert fit.temperature.value == pytest.approx(fit_ts(d).temperature.value, rel=2e-4)

    def test_theta_tie_goes_to_smaller_value(self):
        d = _small(seed=15, n=200)
        # 0.999 and 1.0 admit the same members here, so they tie exactly
        fit = fit_ats(d, AtsConfig(theta_grids=(), theta_values=(1.0, 0.999)))
        assert fit.theta == 0.999

    def test_deterministic(self):
        d = _small(seed=16)
        assert fit_ats(d) == fit_ats(d)

    def test_single_sample(self):
        fit = fit_ats(LogitDataset([1], [[1.0, 0.0, -1.0]]))
        assert T_MIN <= fit.temperature.value <= T_MAX


class TestLinearScaler:
    @pytest.mark.parametrize("kind", ["matrix", "vector"])
    def test_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(20)
        d = LogitDataset(rng.integers(0, 3, 50), rng.normal(0, 2, (50, 3)))
        w = np.diag([0.8, 1.3, 1.1]) if kind == "vector" else rng.normal(size=(3, 3))
        b = rng.normal(size=3)
        _, gw, gb = linear_scaler_objective(d, LinearScaler(w, b, kind))
        f_w = lambda m: linear_scaler_objective(d, LinearScaler(m, b))[0]
        f_b = lambda v: linear_scaler_objective(d, LinearScaler(w, v, kind))[0]
        np.testing.assert_allclose(gw, oracles.central_difference(f_w, w), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(gb, oracles.central_difference(f_b, b), rtol=1e-6, atol=1e-9)

    def test_nested_models_order_by_validation_nll(self):
        d = _small(seed=21, n=600, k=4, concentration=0.4)
        ts = fit_ts(d).objective_value
        vec = fit_linear_scaler(d, "vector")
        mat = fit_linear_scaler(d, "matrix")
        assert vec.objective_value <= ts + 1e-9
        assert mat.objective_value <= vec.objective_value + 1e-9
        assert vec.converged and mat.converged

    def test_vector_weight_stays_diagonal(self):
        fit = fit_linear_scaler(_small(seed=22), "vector")
        w = fit.scaler.weight
        np.testing.assert_array_equal(w, np.diag(np.diag(w)))

    def test_objective_matches_predictions(self):
        d = _small(seed=23)
        fit = fit_linear_scaler(d, "matrix")
        probs = apply_linear_scaler(d, fit.scaler)
        assert fit.objective_value == pytest.approx(metrics.nll(probs, d.labels), rel=1e-12)

    def test_recovers_affine_miscalibration(self):
        # logits = A log q with a known diagonal A: vector scaling should undo A
        synth = generate(SynthSpec(class_count=3, sample_count=20_000, true_temperature=1.0,
                                   concentration=0.7, seed=24))
        a = np.array([2.0, 0.5, 1.0])
        d = LogitDataset(synth.dataset.labels, synth.dataset.logits * a)
        w = np.diag(fit_linear_scaler(d, "vector").scaler.weight)
        np.testing.assert_allclose(w * a, w[2] * a[2], rtol=0.05)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValidationError):
            fit_linear_scaler(_small(), "diagonal")

    def test_class_count_mismatch(self):
        with pytest.raises(ValidationError):
            linear_scaler_objective(_small(k=4), LinearScaler.identity(3))
