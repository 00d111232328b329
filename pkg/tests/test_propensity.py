import math
from fractions import Fraction

import numpy as np
import pytest

from feedback_effects.errors import (
    DegenerateArmError,
    SeparationError,
    ValidationError,
)
from feedback_effects.propensity import (
    CovariateEncoder,
    active_days_ate,
    balance_diagnostics,
    balancing_weight,
    bernoulli_loglik,
    bernoulli_score,
    fit_logistic,
    fit_propensity,
    PropensityModel,
    wate,
)
from feedback_effects.sim import SimConfig, simulate_event_log

from conftest import DEFAULT_SCHEMA, make_covariates, make_record


class TestFitLogistic:
    def test_intercept_only_balanced_gives_zero(self):
        X = np.ones((10, 1))
        z = np.array([1.0] * 5 + [0.0] * 5)
        model = fit_logistic(X, z, ridge=0.0)
        assert model.coefficients == pytest.approx([0.0], abs=1e-12)
        assert np.allclose(model.predict_from_design(X), 0.5)

    def test_recovers_planted_coefficients(self):
        rng = np.random.default_rng(17)
        n = 50000
        x = rng.standard_normal(n)
        z = (rng.random(n) < 1.0 / (1.0 + np.exp(-x))).astype(float)
        X = np.column_stack([np.ones(n), x])
        model = fit_logistic(X, z)
        assert model.report.converged
        assert 0.95 <= model.coefficients[1] <= 1.05
        assert abs(model.coefficients[0]) < 0.05

    def test_complete_separation_raises_without_ridge(self):
        x = np.array([0.0] * 6 + [1.0] * 6)
        X = np.column_stack([np.ones(12), x])
        with pytest.raises(SeparationError):
            fit_logistic(X, x.copy(), ridge=0.0)

    def test_ridge_restores_finite_fit_under_separation(self):
        x = np.array([0.0] * 6 + [1.0] * 6)
        X = np.column_stack([np.ones(12), x])
        model = fit_logistic(X, x.copy(), ridge=1e-4, max_iter=500)
        assert model.report.converged
        assert np.all(np.isfinite(model.coefficients))

    def test_score_matches_finite_differences(self):
        # 10-unit fixture, central differences of the penalized log-likelihood
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(10), rng.standard_normal(10)])
        z = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 0], dtype=float)
        beta = np.array([0.3, -0.7])
        ridge = 0.5
        analytic = bernoulli_score(X, z, beta, ridge)
        h = 1e-6
        for j in range(2):
            e_j = np.zeros(2)
            e_j[j] = h
            fd = (
                bernoulli_loglik(X, z, beta + e_j, ridge)
                - bernoulli_loglik(X, z, beta - e_j, ridge)
            ) / (2 * h)
            assert analytic[j] == pytest.approx(fd, rel=1e-6)

    def test_loglik_non_decreasing_and_score_below_tol(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(200), rng.standard_normal((200, 2))])
        z = (rng.random(200) < 0.4).astype(float)
        model = fit_logistic(X, z, tol=1e-8)
        logliks = [step["loglik"] for step in model.report.trace]
        assert all(b >= a - 1e-9 for a, b in zip(logliks, logliks[1:]))
        assert model.report.final_max_score < 1e-8

    def test_degenerate_arm_rejected(self):
        X = np.ones((4, 1))
        with pytest.raises(DegenerateArmError):
            fit_logistic(X, np.ones(4))

    def test_predictions_clamped_into_open_interval(self):
        X = np.column_stack([np.ones(20), np.linspace(-1, 1, 20) * 100])
        z = (X[:, 1] > 0).astype(float)
        model = fit_logistic(X, z, ridge=1e-3, max_iter=500)
        e = model.predict_from_design(X * 50)
        assert np.all(e >= 1e-6)
        assert np.all(e <= 1 - 1e-6)

    def test_fit_on_log_uses_annotated_records_only(self):
        log, _ = _simulated_log(seed=51, n=300, hazard_helpful=0.2, hazard_unhelpful=0.2)
        annotated = [recs[0] for recs in log.by_user().values()]
        from_log = fit_propensity(log)
        from_records = fit_propensity(annotated, log.schema)
        assert np.allclose(from_log.coefficients, from_records.coefficients)

    def test_json_round_trip(self):
        covs = [make_covariates(token_count=i + 1, wer=0.05 * i) for i in range(8)]
        records = [
            make_record(f"u{i}", float(i), helpful=i % 2, token_count=i + 1)
            for i in range(8)
        ]
        model = fit_propensity(records, DEFAULT_SCHEMA)
        back = PropensityModel.from_json(model.to_json())
        assert np.allclose(back.coefficients, model.coefficients)
        assert back.predict(covs) == pytest.approx(model.predict(covs))


class TestBalancingWeight:
    def test_ipw_at_half(self):
        assert balancing_weight(0.5, 1, "ipw") == 2.0

    def test_overlap_weight(self):
        assert balancing_weight(0.8, 1, "overlap") == pytest.approx(0.2, rel=1e-12)

    def test_entropy_weight(self):
        expected = math.log(2.0) / 0.5
        assert balancing_weight(0.5, 0, "entropy") == pytest.approx(expected, rel=1e-12)

    def test_boundary_propensities_rejected(self):
        for e in (0.0, 1.0):
            with pytest.raises(ValidationError):
                balancing_weight(e, 1, "ipw")

    def test_family_identities_hold_on_random_propensities(self):
        rng = np.random.default_rng(29)
        e = rng.uniform(1e-4, 1 - 1e-4, size=1000)
        w1_ipw = balancing_weight(e, np.ones(1000, dtype=int), "ipw")
        w1_ow = balancing_weight(e, np.ones(1000, dtype=int), "overlap")
        assert w1_ow == pytest.approx(e * (1 - e) * w1_ipw, rel=1e-12)
        # entropy weights are symmetric under (e, z) -> (1-e, 1-z)
        w_ent_1 = balancing_weight(e, np.ones(1000, dtype=int), "entropy")
        w_ent_0 = balancing_weight(1 - e, np.zeros(1000, dtype=int), "entropy")
        assert w_ent_1 == pytest.approx(w_ent_0, rel=1e-12)
        assert np.all(w1_ipw >= 0) and np.all(w1_ow >= 0) and np.all(w_ent_1 >= 0)


class TestWate:
    def test_outcome_equal_to_treatment(self):
        z = np.array([1, 0, 1, 0])
        assert wate(z.astype(float), z, np.array([0.5, 2.0, 1.5, 3.0])) == 1.0

    def test_constant_weights_reduce_to_difference_in_means(self):
        y = np.array([3.0, 3.0, 1.0, 1.0])
        z = np.array([1, 1, 0, 0])
        assert wate(y, z, np.ones(4)) == 2.0

    def test_six_unit_overlap_fixture_matches_enumeration(self):
        # independent evaluation with exact rational arithmetic
        units = [
            (1.0, 1, Fraction(2, 10)),
            (2.0, 1, Fraction(5, 10)),
            (3.0, 1, Fraction(8, 10)),
            (4.0, 0, Fraction(2, 10)),
            (5.0, 0, Fraction(5, 10)),
            (6.0, 0, Fraction(8, 10)),
        ]
        num1 = sum((1 - e) * Fraction(y) for y, z, e in units if z == 1)
        den1 = sum(1 - e for y, z, e in units if z == 1)
        num0 = sum(e * Fraction(y) for y, z, e in units if z == 0)
        den0 = sum(e for y, z, e in units if z == 0)
        expected = float(num1 / den1 - num0 / den0)

        y = np.array([u[0] for u in units])
        z = np.array([u[1] for u in units])
        e = np.array([float(u[2]) for u in units])
        w = balancing_weight(e, z, "overlap")
        assert wate(y, z, w) == pytest.approx(expected, rel=1e-12)

    def test_affine_equivariance(self):
        rng = np.random.default_rng(41)
        y = rng.normal(size=50)
        z = rng.integers(0, 2, size=50)
        if z.min() == z.max():
            z[0] = 1 - z[0]
        w = rng.uniform(0.1, 3.0, size=50)
        base = wate(y, z, w)
        for a, b in [(2.5, -1.0), (-0.3, 7.0), (0.0, 4.0)]:
            assert wate(a * y + b, z, w) == pytest.approx(a * base, abs=1e-10)

    def test_constant_propensity_collapses_all_schemes(self):
        rng = np.random.default_rng(43)
        y = rng.normal(size=100)
        z = np.array([1, 0] * 50)
        naive = y[z == 1].mean() - y[z == 0].mean()
        e = np.full(100, 0.37)
        for scheme in ("ipw", "overlap", "entropy"):
            w = balancing_weight(e, z, scheme)
            assert wate(y, z, w) == pytest.approx(naive, rel=1e-12)

    def test_zero_weight_arm_rejected(self):
        y = np.array([1.0, 2.0])
        z = np.array([1, 0])
        with pytest.raises(DegenerateArmError):
            wate(y, z, np.array([0.0, 1.0]))


class TestBalanceDiagnostics:
    def test_independent_treatment_has_small_raw_smd(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((20000, 3))
        z = rng.integers(0, 2, size=20000)
        rows = balance_diagnostics(X, z, np.ones(20000))
        for row in rows:
            assert abs(row.smd_raw) < 0.05

    def test_constant_covariate_has_zero_smd(self):
        X = np.ones((50, 1))
        z = np.array([1, 0] * 25)
        (row,) = balance_diagnostics(X, z, np.ones(50))
        assert row.smd_raw == 0.0
        assert row.smd_weighted == 0.0

    def test_weighting_improves_balance_under_confounding(self):
        rng = np.random.default_rng(11)
        n = 20000
        x = rng.standard_normal(n)
        e_true = 1.0 / (1.0 + np.exp(-1.2 * x))
        z = (rng.random(n) < e_true).astype(int)
        X = np.column_stack([np.ones(n), x])
        model = fit_logistic(X, z.astype(float))
        e = model.predict_from_design(X)
        w = balancing_weight(e, z, "overlap")
        (_, row) = balance_diagnostics(X, z, w, ["intercept", "x"])
        assert abs(row.smd_raw) > 0.5
        assert abs(row.smd_weighted) < 0.05
        assert abs(row.smd_weighted) < abs(row.smd_raw)


def _simulated_log(seed, n=4000, hazard_helpful=0.05, hazard_unhelpful=0.05):
    config = SimConfig(
        n_users=n,
        horizon_h=2000.0,
        s=0.5,
        hazard_helpful=hazard_helpful,
        hazard_unhelpful=hazard_unhelpful,
        seed=seed,
        annotation_window_h=400.0,
    )
    log, truth = simulate_event_log(config)
    return log, truth


class TestActiveDaysAte:
    def test_null_effect_ci_contains_zero(self):
        log, _ = _simulated_log(seed=21)
        result = active_days_ate(log, k=3, scheme="overlap", end_h=2000.0, n_boot=200, seed=1)
        assert result.ci_low <= 0.0 <= result.ci_high

    def test_halved_hazard_yields_negative_estimate(self):
        log, _ = _simulated_log(seed=23, hazard_helpful=0.06, hazard_unhelpful=0.03)
        result = active_days_ate(log, k=3, scheme="ipw", end_h=2000.0, n_boot=200, seed=1)
        assert result.estimate < 0.0
        assert result.ci_high < 0.0

    def test_recovers_planted_gap(self):
        # hazards calibrated so P(re-engage within 72h) differs by exactly -0.5
        lam_h = -math.log(0.1) / 72.0
        lam_u = -math.log(0.6) / 72.0
        config = SimConfig(
            n_users=20000,
            horizon_h=2000.0,
            s=0.5,
            hazard_helpful=lam_h,
            hazard_unhelpful=lam_u,
            seed=31,
            annotation_window_h=400.0,
        )
        log, _ = simulate_event_log(config)
        result = active_days_ate(log, k=3, scheme="ipw", end_h=2000.0, n_boot=50, seed=2)
        assert result.estimate == pytest.approx(-0.5, abs=0.05)

    def test_strict_followup_rejects_short_horizons(self):
        log, _ = _simulated_log(seed=25, n=50)
        with pytest.raises(ValidationError):
            active_days_ate(
                log, k=14, end_h=410.0, n_boot=0, strict_followup=True
            )


class TestCovariateEncoder:
    def test_reference_level_dropped_and_numerics_standardized(self):
        covs = [make_covariates(device_type=d) for d in ("phone", "speaker", "wearable")]
        enc = CovariateEncoder.fit(covs, DEFAULT_SCHEMA)
        names = enc.feature_names
        assert "device_type=phone" not in names
        assert "device_type=speaker" in names
        X = enc.transform(covs)
        assert X.shape == (3, len(names))
        assert np.allclose(X[:, 0], 1.0)
        # constant numerics standardize to zero
        tc = names.index("token_count")
        assert np.allclose(X[:, tc], 0.0)

    def test_unknown_level_rejected_at_transform(self):
        covs = [make_covariates()]
        enc = CovariateEncoder.fit(covs, DEFAULT_SCHEMA)
        bad = make_covariates()
        object.__setattr__(bad, "device_type", "toaster")
        with pytest.raises(ValidationError):
            enc.transform([bad])
