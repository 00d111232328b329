"""Propensity scores, balancing weights, and weighted treatment effects.

The propensity model is a ridge-penalized logistic GLM fit by iteratively
reweighted least squares (Newton steps with step-halving).  Fitted
probabilities are clamped to [1e-6, 1 - 1e-6] before any weighting, since
inverse-probability weights blow up at the boundary.

Weight schemes are members of one tilting-function family h(x):

    ipw       h = 1                w1 = 1/e         w0 = 1/(1-e)
    overlap   h = e(1-e)           w1 = 1-e         w0 = e
    entropy   h = -e*ln(e) - (1-e)*ln(1-e)
                                   w1 = h/e         w0 = h/(1-e)

and the weighted average treatment effect contrasts the weighted outcome
means of the two arms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import (
    CATEGORICAL_COVARIATES,
    COVARIATE_FIELDS,
    CovariateSchema,
    CovariateVector,
    InteractionRecord,
    ValidatedLog,
)
from .errors import (
    ComputationError,
    ConfigError,
    ConvergenceError,
    DegenerateArmError,
    SeparationError,
    ValidationError,
)
from .seeding import user_stream

PROPENSITY_CLAMP = 1e-6
WEIGHT_SCHEMES = ("ipw", "overlap", "entropy")


# --- covariate encoding -------------------------------------------------------


@dataclass(frozen=True)
class CovariateEncoder:
    """Maps covariate vectors to design rows: intercept, one-hot
    categoricals (first schema level dropped as reference), standardized
    numerics (zero-variance features pass through as zeros)."""

    categorical_levels: dict[str, tuple[str, ...]]
    numeric_center: dict[str, float]
    numeric_scale: dict[str, float]

    @classmethod
    def fit(
        cls, covariates: Sequence[CovariateVector], schema: CovariateSchema
    ) -> "CovariateEncoder":
        if not covariates:
            raise ValidationError("cannot fit an encoder on zero covariate rows")
        levels = {name: schema.levels_for(name) for name in CATEGORICAL_COVARIATES}
        center = {}
        scale = {}
        for name in COVARIATE_FIELDS:
            if name in levels:
                continue
            col = np.array([float(getattr(c, name)) for c in covariates])
            mu = float(col.mean())
            sd = float(col.std())
            center[name] = mu
            scale[name] = sd if sd > 0.0 else 1.0
        return cls(levels, center, scale)

    @property
    def feature_names(self) -> list[str]:
        names = ["intercept"]
        for name in COVARIATE_FIELDS:
            if name in self.categorical_levels:
                names.extend(
                    f"{name}={lvl}" for lvl in self.categorical_levels[name][1:]
                )
            else:
                names.append(name)
        return names

    def transform(self, covariates: Sequence[CovariateVector]) -> np.ndarray:
        rows = np.empty((len(covariates), len(self.feature_names)))
        for i, cov in enumerate(covariates):
            row = [1.0]
            for name in COVARIATE_FIELDS:
                if name in self.categorical_levels:
                    lvls = self.categorical_levels[name]
                    value = getattr(cov, name)
                    if value not in lvls:
                        raise ValidationError(
                            f"{name}={value!r} not in the encoder's schema"
                        )
                    row.extend(1.0 if value == lvl else 0.0 for lvl in lvls[1:])
                else:
                    row.append(
                        (float(getattr(cov, name)) - self.numeric_center[name])
                        / self.numeric_scale[name]
                    )
            rows[i] = row
        return rows

    def to_json_dict(self) -> dict:
        return {
            "categorical_levels": {
                k: list(v) for k, v in self.categorical_levels.items()
            },
            "numeric_center": self.numeric_center,
            "numeric_scale": self.numeric_scale,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CovariateEncoder":
        return cls(
            categorical_levels={
                k: tuple(v) for k, v in doc["categorical_levels"].items()
            },
            numeric_center=dict(doc["numeric_center"]),
            numeric_scale=dict(doc["numeric_scale"]),
        )


# --- logistic GLM by IRLS -----------------------------------------------------


def bernoulli_loglik(X: np.ndarray, z: np.ndarray, beta: np.ndarray, ridge: float) -> float:
    """Ridge-penalized Bernoulli log-likelihood at ``beta``."""
    eta = X @ beta
    # log sigma(eta) = -log(1 + e^-eta), log(1 - sigma(eta)) = -log(1 + e^eta)
    ll = -(np.logaddexp(0.0, -eta) @ z) - (np.logaddexp(0.0, eta) @ (1.0 - z))
    return float(ll - 0.5 * ridge * beta @ beta)


def bernoulli_score(X: np.ndarray, z: np.ndarray, beta: np.ndarray, ridge: float) -> np.ndarray:
    """Gradient of the penalized log-likelihood at ``beta``."""
    mu = _sigmoid(X @ beta)
    return X.T @ (z - mu) - ridge * beta


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(eta, -40.0, 40.0)))


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    iterations: int
    final_max_score: float
    trace: tuple[dict, ...]


@dataclass(frozen=True)
class PropensityModel:
    """Fitted logistic propensity model with its feature encoding."""

    coefficients: np.ndarray
    encoder: CovariateEncoder | None
    report: ConvergenceReport
    ridge: float

    def predict_from_design(self, X: np.ndarray) -> np.ndarray:
        e = _sigmoid(np.asarray(X, dtype=float) @ self.coefficients)
        return np.clip(e, PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)

    def predict(self, covariates: Sequence[CovariateVector]) -> np.ndarray:
        if self.encoder is None:
            raise ValidationError("model was fit on a raw design matrix")
        return self.predict_from_design(self.encoder.transform(covariates))

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": 1,
                "coefficients": self.coefficients.tolist(),
                "encoder": None if self.encoder is None else self.encoder.to_json_dict(),
                "ridge": self.ridge,
                "converged": self.report.converged,
                "iterations": self.report.iterations,
                "final_max_score": self.report.final_max_score,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PropensityModel":
        doc = json.loads(text)
        report = ConvergenceReport(
            converged=doc["converged"],
            iterations=doc["iterations"],
            final_max_score=doc["final_max_score"],
            trace=(),
        )
        encoder = (
            None
            if doc["encoder"] is None
            else CovariateEncoder.from_json_dict(doc["encoder"])
        )
        return cls(
            coefficients=np.array(doc["coefficients"], dtype=float),
            encoder=encoder,
            report=report,
            ridge=float(doc["ridge"]),
        )


def fit_logistic(
    X: np.ndarray,
    z: np.ndarray,
    ridge: float = 1e-6,
    tol: float = 1e-8,
    max_iter: int = 100,
    encoder: CovariateEncoder | None = None,
) -> PropensityModel:
    """Fit a logistic model of ``z`` on the design ``X`` by IRLS.

    ``X`` is the full design including any intercept column.  Converged
    when the max absolute component of the penalized score drops below
    ``tol``.  The penalized log-likelihood is non-decreasing across
    iterations (Newton steps are halved until they ascend).

    Raises :class:`SeparationError` when ridge = 0 and the arms are
    perfectly separated (the unpenalized MLE diverges), and
    :class:`ConvergenceError` with the iteration trace otherwise.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    if X.ndim != 2 or len(X) != len(z):
        raise ValidationError("X must be 2-D with one row per entry of z")
    if not np.isfinite(X).all():
        raise ValidationError("design matrix contains non-finite values")
    if not set(np.unique(z)) <= {0.0, 1.0}:
        raise ValidationError("z must be binary")
    if z.min() == z.max():
        raise DegenerateArmError("both treatment arms must be non-empty")
    if ridge < 0.0:
        raise ConfigError("ridge must be >= 0")

    n, p = X.shape
    beta = np.zeros(p)
    loglik = bernoulli_loglik(X, z, beta, ridge)
    trace: list[dict] = []
    for iteration in range(1, max_iter + 1):
        mu = _sigmoid(X @ beta)
        if ridge == 0.0 and _separated(mu, z):
            # the unpenalized score also vanishes under complete
            # separation, so this must be ruled out before declaring
            # convergence
            raise SeparationError(
                "complete separation detected; the unpenalized MLE diverges -- refit with ridge > 0"
            )
        score = X.T @ (z - mu) - ridge * beta
        max_score = float(np.abs(score).max())
        trace.append(
            {"iteration": iteration, "max_score": max_score, "loglik": loglik}
        )
        if max_score < tol:
            report = ConvergenceReport(True, iteration, max_score, tuple(trace))
            return PropensityModel(beta, encoder, report, ridge)

        w = mu * (1.0 - mu)
        hessian = (X * w[:, None]).T @ X + ridge * np.eye(p)
        try:
            delta = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError as exc:
            if ridge == 0.0:
                raise SeparationError(
                    "singular IRLS system; arms are (nearly) separated -- refit with ridge > 0"
                ) from exc
            raise ConvergenceError("singular IRLS system", trace) from exc

        step = 1.0
        slack = 1e-10 * (1.0 + abs(loglik))
        for _ in range(50):
            candidate = bernoulli_loglik(X, z, beta + step * delta, ridge)
            if candidate >= loglik - slack:
                break
            step *= 0.5
        else:
            raise ConvergenceError(
                "IRLS step-halving could not find an ascent direction", trace
            )
        beta = beta + step * delta
        loglik = max(candidate, loglik)

    raise ConvergenceError(
        f"IRLS did not converge in {max_iter} iterations "
        f"(final max |score| = {trace[-1]['max_score']:.3e})",
        trace,
    )


def _separated(mu: np.ndarray, z: np.ndarray) -> bool:
    # every fitted probability pinned to its own arm's boundary
    edge = 1e-6
    return bool(np.all(mu[z == 1.0] > 1.0 - edge) and np.all(mu[z == 0.0] < edge))


def fit_propensity(
    log_or_records: ValidatedLog | Sequence[InteractionRecord],
    schema: CovariateSchema | None = None,
    ridge: float = 1e-6,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PropensityModel:
    """Fit the propensity of an unhelpful response on the record covariates.

    Given a validated log, only each user's annotated interaction (their
    first record) enters the fit; a raw record sequence is used as-is.
    """
    if isinstance(log_or_records, ValidatedLog):
        records: Sequence[InteractionRecord] = [
            recs[0] for recs in log_or_records.by_user().values()
        ]
        schema = log_or_records.schema
    else:
        records = log_or_records
        if schema is None:
            raise ConfigError("schema is required when passing raw records")
    covs = [r.covariates for r in records]
    z = np.array([r.helpful for r in records], dtype=float)
    encoder = CovariateEncoder.fit(covs, schema)
    X = encoder.transform(covs)
    return fit_logistic(X, z, ridge=ridge, tol=tol, max_iter=max_iter, encoder=encoder)


# --- balancing weights and WATE -------------------------------------------


def tilting(e: np.ndarray | float, scheme: str) -> np.ndarray | float:
    """Tilting function h(e) of the scheme's target population."""
    if scheme == "ipw":
        return np.ones_like(np.asarray(e, dtype=float)) if np.ndim(e) else 1.0
    if scheme == "overlap":
        return e * (1.0 - e)
    if scheme == "entropy":
        return -(e * np.log(e) + (1.0 - e) * np.log1p(-e))
    raise ConfigError(f"unknown weight scheme {scheme!r}; expected one of {WEIGHT_SCHEMES}")


def balancing_weight(
    e: np.ndarray | float, z: np.ndarray | int, scheme: str
) -> np.ndarray | float:
    """Balancing weight h(e)/e for treated units, h(e)/(1-e) for controls.

    ``e`` must lie strictly inside (0, 1).
    """
    e_arr = np.asarray(e, dtype=float)
    z_arr = np.asarray(z)
    if np.any(e_arr <= 0.0) or np.any(e_arr >= 1.0):
        raise ValidationError("propensity values must lie strictly inside (0, 1)")
    if not set(np.unique(z_arr)) <= {0, 1}:
        raise ValidationError("z must be binary")
    h = tilting(e_arr, scheme)
    w = np.where(z_arr == 1, h / e_arr, h / (1.0 - e_arr))
    return float(w) if np.ndim(e) == 0 and np.ndim(z) == 0 else w


def wate(y: np.ndarray, z: np.ndarray, weights: np.ndarray) -> float:
    """Weighted average treatment effect: weighted treated mean minus
    weighted control mean."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0.0):
        raise ValidationError("weights must be nonnegative")
    treated = z == 1
    w1 = w[treated].sum()
    w0 = w[~treated].sum()
    if w1 <= 0.0 or w0 <= 0.0:
        raise DegenerateArmError(
            f"zero total weight in an arm (treated {w1}, control {w0})"
        )
    return float(
        (w[treated] * y[treated]).sum() / w1 - (w[~treated] * y[~treated]).sum() / w0
    )


# --- balance diagnostics ----------------------------------------------------


@dataclass(frozen=True)
class BalanceRow:
    feature: str
    smd_raw: float
    smd_weighted: float

    @property
    def flagged(self) -> bool:
        return abs(self.smd_weighted) > 0.1


def _weighted_mean_var(x: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    total = w.sum()
    mean = float((w * x).sum() / total)
    var = float((w * (x - mean) ** 2).sum() / total)
    return mean, var


def balance_diagnostics(
    X: np.ndarray,
    z: np.ndarray,
    weights: np.ndarray,
    feature_names: Sequence[str] | None = None,
) -> list[BalanceRow]:
    """Standardized mean differences per design column, raw and weighted.

    The denominator is the raw pooled standard deviation
    sqrt((var_1 + var_0) / 2) in both cases, so weighting moves only the
    numerator.  Zero-variance columns report SMD 0.  Rows with weighted
    |SMD| > 0.1 are flagged.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z)
    w = np.asarray(weights, dtype=float)
    names = (
        list(feature_names)
        if feature_names is not None
        else [f"x{j}" for j in range(X.shape[1])]
    )
    treated = z == 1
    ones = np.ones(len(z))
    rows = []
    for j, name in enumerate(names):
        col = X[:, j]
        m1, v1 = _weighted_mean_var(col[treated], ones[treated])
        m0, v0 = _weighted_mean_var(col[~treated], ones[~treated])
        denom = math.sqrt((v1 + v0) / 2.0)
        if denom == 0.0:
            rows.append(BalanceRow(name, 0.0, 0.0))
            continue
        wm1, _ = _weighted_mean_var(col[treated], w[treated])
        wm0, _ = _weighted_mean_var(col[~treated], w[~treated])
        rows.append(BalanceRow(name, (m1 - m0) / denom, (wm1 - wm0) / denom))
    return rows


# --- active-day outcome and its weighted ATE --------------------------------


@dataclass(frozen=True)
class AteEstimate:
    estimate: float
    ci_low: float | None
    ci_high: float | None
    n_replicates: int
    n_units: int


def active_day_outcomes(
    log: ValidatedLog, k: int, end_h: float | None = None, strict: bool = True
) -> tuple[list[InteractionRecord], np.ndarray]:
    """Per-user count of active days within k days of the annotated request.

    The first record of each user is the annotated interaction; later
    records contribute activity only.  The outcome counts distinct
    calendar days with an interaction in ``(t0, t0 + 24k]``.  When
    ``end_h`` is given, users whose k-day follow-up extends past it are
    rejected (``strict=True``) or dropped (``strict=False``).
    """
    annotated: list[InteractionRecord] = []
    outcomes: list[int] = []
    skipped = 0
    for _, recs in log.by_user().items():
        first = recs[0]
        if end_h is not None and first.timestamp_h + 24.0 * k > end_h:
            if strict:
                raise ValidationError(
                    f"user {first.user_id!r} lacks a full {k}-day follow-up window"
                )
            skipped += 1
            continue
        horizon = first.timestamp_h + 24.0 * k
        later = [
            r.timestamp_h for r in recs[1:] if first.timestamp_h < r.timestamp_h <= horizon
        ]
        days = {int(math.floor(t / 24.0)) for t in later}
        annotated.append(first)
        outcomes.append(len(days))
    if not annotated:
        raise ValidationError("no users with an observable follow-up window")
    return annotated, np.array(outcomes, dtype=float)


def active_days_ate(
    log: ValidatedLog,
    k: int,
    scheme: str = "overlap",
    end_h: float | None = None,
    n_boot: int = 1000,
    seed: int = 0,
    ridge: float = 1e-6,
    strict_followup: bool = False,
    threads: int = 1,
) -> AteEstimate:
    """Weighted ATE of an unhelpful response on the k-day active-day count.

    Fits the propensity model on the annotated records, applies the
    requested balancing-weight scheme, and attaches a percentile
    bootstrap CI (users resampled, propensity refit per replicate).
    """
    if k < 1:
        raise ConfigError("k must be a positive day count")
    annotated, y = active_day_outcomes(log, k, end_h=end_h, strict=strict_followup)
    covs = [r.covariates for r in annotated]
    z = np.array([r.helpful for r in annotated], dtype=float)
    encoder = CovariateEncoder.fit(covs, log.schema)
    X = encoder.transform(covs)

    estimate = _weighted_ate(X, z, y, scheme, ridge)
    ci_low = ci_high = None
    if n_boot > 0:
        reps = bootstrap_replicates(
            lambda idx: _weighted_ate(X[idx], z[idx], y[idx], scheme, ridge),
            len(y),
            n_boot,
            seed,
            "active-days-bootstrap",
            threads=threads,
        )
        ci_low, ci_high = percentile_ci(reps, estimate)
    return AteEstimate(estimate, ci_low, ci_high, n_boot, len(y))


def _weighted_ate(X: np.ndarray, z: np.ndarray, y: np.ndarray, scheme: str, ridge: float) -> float:
    model = fit_logistic(X, z, ridge=ridge)
    e = model.predict_from_design(X)
    w = balancing_weight(e, z.astype(int), scheme)
    return wate(y, z, w)


def bootstrap_replicates(
    statistic,
    n: int,
    n_boot: int,
    seed: int,
    label: str,
    threads: int = 1,
) -> np.ndarray:
    """Percentile-bootstrap replicates of ``statistic(resampled_indices)``.

    Each replicate draws its index vector from its own keyed stream, so
    results do not depend on execution order or worker count.  Replicates
    where the statistic is undefined on the resample (a degenerate arm,
    say) are skipped; at least half must survive.
    """

    def one(r: int):
        idx = user_stream(seed, label, r).integers(0, n, size=n)
        try:
            return statistic(idx)
        except ComputationError:
            return None

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_boot)))
    else:
        results = [one(r) for r in range(n_boot)]
    reps = [r for r in results if r is not None]
    if len(reps) < max(2, n_boot // 2):
        raise ConvergenceError(
            f"only {len(reps)} of {n_boot} bootstrap replicates were estimable"
        )
    return np.asarray(reps)


def percentile_ci(
    reps: np.ndarray, estimate=None, level: float = 0.95
) -> tuple:
    """Percentile CI; widened, if needed, to contain the point estimate."""
    alpha = (1.0 - level) / 2.0
    lo = np.quantile(reps, alpha, axis=0)
    hi = np.quantile(reps, 1.0 - alpha, axis=0)
    if estimate is not None:
        lo = np.minimum(lo, estimate)
        hi = np.maximum(hi, estimate)
    if np.ndim(lo) == 0:
        return float(lo), float(hi)
    return lo, hi
