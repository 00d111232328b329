"""Seeded generative model of the engagement feedback loop.

Two generators with known ground truth:

* :func:`simulate_event_log` draws, per user, covariates, a quality label
  (optionally confounded through a treatment logit), and an exponential
  time to next engagement whose hazard depends on the label (and the
  confounders, proportionally).  Engagements past the horizon are
  censored.  The closed-form survival mixture is returned alongside the
  log, so estimators can be checked against exact targets.
* :func:`simulate_survey_panel` draws the two-period re-engagement panel
  behind the survey measurement-error model.

Determinism contract: output is a pure function of (config, seed).  Each
user owns a counter-keyed RNG stream, so generation order and worker
count cannot change the draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from .bias import BiasScenario, PeriodPanel
from .domain import (
    CATEGORICAL_COVARIATES,
    CovariateSchema,
    CovariateVector,
    InteractionRecord,
    ValidatedLog,
    validate_log,
)
from .errors import ConfigError
from .propensity import tilting
from .seeding import stream, user_stream

_DOMAIN_VOCAB = {
    "weather": ["what", "is", "the", "weather", "today", "rain", "snow", "forecast"],
    "music": ["play", "some", "music", "song", "next", "album", "artist", "shuffle"],
    "timer": ["set", "a", "timer", "for", "minutes", "cancel", "the", "alarm"],
    "phone": ["call", "mom", "phone", "dial", "number", "text", "message", "send"],
    "qa": ["how", "tall", "is", "what", "who", "when", "where", "why"],
}


@dataclass(frozen=True)
class CategoricalMarginal:
    levels: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.levels) != len(self.probs) or not self.levels:
            raise ConfigError("levels and probs must be nonempty and equal length")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-9:
            raise ConfigError("probs must be nonnegative and sum to 1")


@dataclass(frozen=True)
class CovariateModel:
    """Marginal distributions for the generated covariates.

    Day-of-week and hour-of-day are derived from the timestamp rather
    than drawn, so the temporal fields stay consistent with the record.
    """

    device_type: CategoricalMarginal = CategoricalMarginal(
        ("phone", "speaker", "wearable"), (0.6, 0.3, 0.1)
    )
    os_version: CategoricalMarginal = CategoricalMarginal(
        ("v1", "v2", "v3"), (0.3, 0.5, 0.2)
    )
    nlu_domain: CategoricalMarginal = CategoricalMarginal(
        ("weather", "music", "timer", "phone", "qa"), (0.3, 0.25, 0.2, 0.15, 0.1)
    )
    token_count_mean: float = 3.0  # token_count ~ 1 + Poisson(mean)
    wer_beta: tuple[float, float] = (1.5, 15.0)
    nlu_confidence_beta: tuple[float, float] = (8.0, 2.0)
    prior_active_days_mean: float = 12.0

    def marginal(self, name: str) -> CategoricalMarginal:
        return getattr(self, name)

    def schema(self) -> CovariateSchema:
        return CovariateSchema(
            device_type=self.device_type.levels,
            os_version=self.os_version.levels,
            nlu_domain=self.nlu_domain.levels,
            domain_label=self.nlu_domain.levels,
        )


@dataclass(frozen=True)
class ConfounderEffect:
    """Additive shifts a categorical level applies to the treatment logit
    and to the log hazard of re-engagement."""

    logit: float = 0.0
    log_hazard: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    """Event-log simulator configuration.

    The baseline unhelpful-response probability is ``1 - s``;
    ``confounders`` maps a categorical covariate to per-level
    :class:`ConfounderEffect` shifts, making the label and the hazard
    share a cause.  Annotated interactions happen uniformly during the
    first ``annotation_window_h`` hours (default: half the horizon), and
    the next engagement is censored at the horizon.
    """

    n_users: int
    horizon_h: float
    s: float
    hazard_helpful: float
    hazard_unhelpful: float
    seed: int
    confounders: dict[str, dict[str, ConfounderEffect]] = field(default_factory=dict)
    covariates: CovariateModel = field(default_factory=CovariateModel)
    annotation_window_h: float | None = None

    def __post_init__(self):
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        if not self.horizon_h > 0.0:
            raise ConfigError("horizon_h must be > 0")
        if not 0.0 < self.s < 1.0:
            raise ConfigError("s must lie in (0, 1)")
        if self.hazard_helpful <= 0.0 or self.hazard_unhelpful <= 0.0:
            raise ConfigError("hazards must be > 0")
        window = self.annotation_window()
        if not 0.0 < window < self.horizon_h:
            raise ConfigError("annotation_window_h must lie in (0, horizon_h)")
        for name, levels in self.confounders.items():
            if name not in CATEGORICAL_COVARIATES:
                raise ConfigError(
                    f"confounder {name!r} is not a categorical covariate; "
                    f"expected one of {CATEGORICAL_COVARIATES}"
                )
            declared = self.covariates.marginal(name).levels
            unknown = set(levels) - set(declared)
            if unknown:
                raise ConfigError(f"confounder {name!r} has unknown levels {sorted(unknown)}")

    def annotation_window(self) -> float:
        if self.annotation_window_h is not None:
            return self.annotation_window_h
        return self.horizon_h / 2.0

    @property
    def base_logit(self) -> float:
        return math.log((1.0 - self.s) / self.s)

    def treatment_logit(self, cov: CovariateVector) -> float:
        shift = sum(
            effects.get(getattr(cov, name), ConfounderEffect()).logit
            for name, effects in self.confounders.items()
        )
        return self.base_logit + shift

    def hazard(self, z: int, cov: CovariateVector) -> float:
        base = self.hazard_unhelpful if z == 1 else self.hazard_helpful
        shift = sum(
            effects.get(getattr(cov, name), ConfounderEffect()).log_hazard
            for name, effects in self.confounders.items()
        )
        return base * math.exp(shift)


@dataclass(frozen=True)
class GroundTruth:
    """Closed-form per-stratum survival mixture behind a simulated log.

    A stratum is one joint assignment of the confounding levels; with no
    confounders there is a single stratum and every scheme's target
    population coincides.
    """

    hazard_helpful: float
    hazard_unhelpful: float
    base_logit: float
    strata: tuple[dict, ...]  # prob, logit_shift, log_hazard_shift, levels

    def _stratum_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        probs = np.array([s["prob"] for s in self.strata])
        e = 1.0 / (1.0 + np.exp(-(self.base_logit + np.array([s["logit_shift"] for s in self.strata]))))
        mult = np.exp(np.array([s["log_hazard_shift"] for s in self.strata]))
        return probs, e, mult

    def true_survival(self, t, z: int, scheme: str = "ipw") -> np.ndarray:
        """Potential survival P(T(z) >= t) averaged over the scheme's
        tilted target population."""
        t = np.asarray(t, dtype=float)
        probs, e, mult = self._stratum_arrays()
        h = np.asarray(tilting(e, scheme), dtype=float)
        weights = probs * h
        weights = weights / weights.sum()
        lam = (self.hazard_unhelpful if z == 1 else self.hazard_helpful) * mult
        return np.exp(-np.outer(t, lam)) @ weights

    def true_rpce(self, grid, scheme: str = "ipw") -> np.ndarray:
        """Re-engagement probability difference, unhelpful minus helpful."""
        return self.true_survival(grid, 0, scheme) - self.true_survival(grid, 1, scheme)

    def to_json_dict(self, grid: Sequence[float] | None = None) -> dict:
        doc = {
            "hazard_helpful": self.hazard_helpful,
            "hazard_unhelpful": self.hazard_unhelpful,
            "base_logit": self.base_logit,
            "strata": list(self.strata),
        }
        if grid is not None:
            grid = list(map(float, grid))
            doc["grid"] = grid
            doc["true_rpce"] = {
                scheme: self.true_rpce(np.array(grid), scheme).tolist()
                for scheme in ("ipw", "overlap", "entropy")
            }
        return doc


def _ground_truth(config: SimConfig) -> GroundTruth:
    fields = sorted(config.confounders)
    level_sets = []
    for name in fields:
        marg = config.covariates.marginal(name)
        level_sets.append(list(zip(marg.levels, marg.probs)))
    strata = []
    for combo in product(*level_sets) if fields else [()]:
        prob = 1.0
        logit_shift = 0.0
        loghaz_shift = 0.0
        levels = {}
        for name, (level, p) in zip(fields, combo):
            prob *= p
            eff = config.confounders[name].get(level, ConfounderEffect())
            logit_shift += eff.logit
            loghaz_shift += eff.log_hazard
            levels[name] = level
        strata.append(
            {
                "prob": prob,
                "logit_shift": logit_shift,
                "log_hazard_shift": loghaz_shift,
                "levels": levels,
            }
        )
    return GroundTruth(
        hazard_helpful=config.hazard_helpful,
        hazard_unhelpful=config.hazard_unhelpful,
        base_logit=config.base_logit,
        strata=tuple(strata),
    )


def _draw_covariates(rng: np.random.Generator, model: CovariateModel, t0: float) -> CovariateVector:
    device = model.device_type.levels[rng.choice(len(model.device_type.levels), p=model.device_type.probs)]
    osv = model.os_version.levels[rng.choice(len(model.os_version.levels), p=model.os_version.probs)]
    dom = model.nlu_domain.levels[rng.choice(len(model.nlu_domain.levels), p=model.nlu_domain.probs)]
    return CovariateVector(
        device_type=device,
        os_version=osv,
        token_count=1 + int(rng.poisson(model.token_count_mean)),
        wer=float(rng.beta(*model.wer_beta)),
        nlu_domain=dom,
        nlu_confidence=float(rng.beta(*model.nlu_confidence_beta)),
        prior_active_days=int(rng.poisson(model.prior_active_days_mean)),
        day_of_week=int(t0 // 24.0) % 7,
        hour_of_day=int(t0 % 24.0),
    )


def _draw_tokens(rng: np.random.Generator, domain: str, count: int) -> tuple[str, ...]:
    vocab = _DOMAIN_VOCAB.get(domain, _DOMAIN_VOCAB["qa"])
    return tuple(vocab[i] for i in rng.choice(len(vocab), size=count))


def simulate_event_log(config: SimConfig) -> tuple[ValidatedLog, GroundTruth]:
    """Generate an interaction log with one annotated request per user.

    The user's first record carries the label and covariates; a second
    record marks the next engagement when it lands inside the horizon.
    The returned log passes validation; identical configs produce
    bit-identical logs.
    """
    model = config.covariates
    records: list[InteractionRecord] = []
    width = len(str(config.n_users - 1))
    for i in range(config.n_users):
        rng = user_stream(config.seed, "event-log-user", i)
        user_id = f"u{i:0{width}d}"
        t0 = float(rng.uniform(0.0, config.annotation_window()))
        cov = _draw_covariates(rng, model, t0)
        z = int(rng.random() < _sigmoid(config.treatment_logit(cov)))
        records.append(
            InteractionRecord(
                user_id=user_id,
                timestamp_h=t0,
                tokens=_draw_tokens(rng, cov.nlu_domain, cov.token_count),
                domain_label=cov.nlu_domain,
                helpful=z,
                covariates=cov,
            )
        )
        t_next = t0 + float(rng.exponential(1.0 / config.hazard(z, cov)))
        if t_next <= config.horizon_h:
            cov_next = CovariateVector(
                device_type=cov.device_type,
                os_version=cov.os_version,
                token_count=cov.token_count,
                wer=cov.wer,
                nlu_domain=cov.nlu_domain,
                nlu_confidence=cov.nlu_confidence,
                prior_active_days=cov.prior_active_days,
                day_of_week=int(t_next // 24.0) % 7,
                hour_of_day=int(t_next % 24.0),
            )
            records.append(
                InteractionRecord(
                    user_id=user_id,
                    timestamp_h=t_next,
                    tokens=_draw_tokens(rng, cov.nlu_domain, cov.token_count),
                    domain_label=cov.nlu_domain,
                    helpful=z,
                    covariates=cov_next,
                )
            )
    log = validate_log(records, model.schema())
    return log, _ground_truth(config)


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def simulate_survey_panel(scenario: BiasScenario, seed: int) -> PeriodPanel:
    """Draw the two-period panel: previously active users re-engage with
    probability p (satisfied) or p - delta_p (unsatisfied); joiners are
    active by definition and satisfied at rate s."""
    rng = stream(seed, "survey-panel")
    n, m = scenario.n_prev, scenario.n_joiners
    satisfied_prev = rng.random(n) < scenario.s
    p_return = np.where(satisfied_prev, scenario.p, scenario.p - scenario.delta_p)
    active_cur_prev = rng.random(n) < p_return
    satisfied_join = rng.random(m) < scenario.s

    satisfied = np.concatenate([satisfied_prev, satisfied_join])
    active_prev = np.concatenate([np.ones(n, dtype=bool), np.zeros(m, dtype=bool)])
    active_cur = np.concatenate([active_cur_prev, np.ones(m, dtype=bool)])
    return PeriodPanel(
        satisfied=satisfied,
        active_prev=active_prev,
        active_cur=active_cur,
        scenario=scenario,
    )


# --- config documents ---------------------------------------------------------


def config_from_dict(doc: dict) -> SimConfig:
    """Build a :class:`SimConfig` from a parsed TOML/JSON document."""
    required = ["n_users", "horizon_h", "s", "hazard_helpful", "hazard_unhelpful", "seed"]
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"config missing required field(s): {', '.join(missing)}")

    covariates = CovariateModel()
    if "covariates" in doc:
        kwargs = {}
        for name, spec in doc["covariates"].items():
            if name in CATEGORICAL_COVARIATES:
                kwargs[name] = CategoricalMarginal(
                    tuple(spec["levels"]), tuple(spec["probs"])
                )
            elif name in (
                "token_count_mean",
                "wer_beta",
                "nlu_confidence_beta",
                "prior_active_days_mean",
            ):
                kwargs[name] = tuple(spec) if isinstance(spec, list) else spec
            else:
                raise ConfigError(f"unknown covariate generator field {name!r}")
        covariates = CovariateModel(**kwargs)

    confounders = {}
    for name, levels in doc.get("confounders", {}).items():
        confounders[name] = {
            level: ConfounderEffect(
                logit=float(eff.get("logit", 0.0)),
                log_hazard=float(eff.get("log_hazard", 0.0)),
            )
            for level, eff in levels.items()
        }

    return SimConfig(
        n_users=int(doc["n_users"]),
        horizon_h=float(doc["horizon_h"]),
        s=float(doc["s"]),
        hazard_helpful=float(doc["hazard_helpful"]),
        hazard_unhelpful=float(doc["hazard_unhelpful"]),
        seed=int(doc["seed"]),
        confounders=confounders,
        covariates=covariates,
        annotation_window_h=(
            float(doc["annotation_window_h"]) if "annotation_window_h" in doc else None
        ),
    )


def load_config(path) -> SimConfig:
    """Read a simulator config from a TOML or JSON file."""
    text = open(path, "rb").read()
    name = str(path)
    if name.endswith(".json"):
        doc = json.loads(text.decode("utf-8"))
    else:
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            doc = tomllib.loads(text.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {name}: {exc}") from exc
    return config_from_dict(doc)
