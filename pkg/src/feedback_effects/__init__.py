"""Causal and measurement toolkit for assistant interaction logs.

Library surface: a seeded simulator with closed-form ground truth (`sim`),
propensity-weighted and matched treatment-effect estimators (`propensity`,
`matching`), the time-to-re-engagement effect curve (`survival`), the
activity-sampled survey error model (`bias`), and language-convergence
metrics (`lang`).  The `feedback-effects` console script ties them into
reproducible pipelines.
"""

__version__ = "0.1.0"

from .bias import BiasScenario, PeriodPanel, approx_error, error_sweep, exact_error, survey_estimate
from .domain import (
    Cohort,
    CohortAssignment,
    CovariateSchema,
    CovariateVector,
    InteractionRecord,
    StudyWindow,
    Subgroup,
    ValidatedLog,
    assign_cohorts,
    validate_log,
)
from .errors import (
    ComputationError,
    ConfigError,
    ConvergenceError,
    DegenerateArmError,
    EmptyMatchError,
    LogValidationError,
    SeparationError,
    ValidationError,
)
from .lang import (
    ContingencyTable2x2,
    EmbeddingTable,
    TrigramLm,
    chi_squared_2x2,
    cohort_pp_trend,
    jaccard_diversity,
    perplexity,
    self_bleu_diversity,
    train_trigram,
    wed_diversity,
)
from .matching import CemResult, CoarseningSpec, cem_ate, cem_match, coarsen, default_coarsening
from .propensity import (
    AteEstimate,
    CovariateEncoder,
    PropensityModel,
    active_days_ate,
    balance_diagnostics,
    balancing_weight,
    fit_logistic,
    fit_propensity,
    wate,
)
from .sim import GroundTruth, SimConfig, simulate_event_log, simulate_survey_panel
from .survival import (
    PseudoObservationMatrix,
    RpceCurve,
    SurvivalObservation,
    kaplan_meier,
    pseudo_observations,
    rpce_pipeline,
)

__all__ = [name for name in dir() if not name.startswith("_")]
