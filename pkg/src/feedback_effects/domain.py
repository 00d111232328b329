"""Canonical data model for interaction logs.

One :class:`InteractionRecord` is a single user request: who asked, when
(hours since study start), the transcribed tokens, the task domain, the
binary quality label, and the request-level covariates used by the causal
estimators.

Label convention used throughout the toolkit: ``helpful`` stores the
treatment indicator ``z`` where ``z = 1`` means the response was
UNHELPFUL and ``z = 0`` means it was helpful.  Estimated effects are
therefore "effect of an unhelpful response", and an engagement-dampening
response shows up as a negative effect.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import ConfigError, LogValidationError

CATEGORICAL_COVARIATES = ("device_type", "os_version", "nlu_domain")
NUMERIC_COVARIATES = (
    "token_count",
    "wer",
    "nlu_confidence",
    "prior_active_days",
    "day_of_week",
    "hour_of_day",
)
COVARIATE_FIELDS = (
    "device_type",
    "os_version",
    "token_count",
    "wer",
    "nlu_domain",
    "nlu_confidence",
    "prior_active_days",
    "day_of_week",
    "hour_of_day",
)


@dataclass(frozen=True)
class CovariateVector:
    """Request-level features observed at annotation time."""

    device_type: str
    os_version: str
    token_count: int
    wer: float
    nlu_domain: str
    nlu_confidence: float
    prior_active_days: int
    day_of_week: int
    hour_of_day: int

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in COVARIATE_FIELDS}


@dataclass(frozen=True)
class InteractionRecord:
    """One logged user request with its quality label.

    ``helpful`` holds the treatment indicator z (1 = unhelpful response,
    0 = helpful); see the module docstring.
    """

    user_id: str
    timestamp_h: float
    tokens: tuple[str, ...]
    domain_label: str
    helpful: int
    covariates: CovariateVector

    def to_json_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "timestamp_h": self.timestamp_h,
            "tokens": list(self.tokens),
            "domain_label": self.domain_label,
            "helpful": self.helpful,
            "covariates": self.covariates.as_dict(),
        }


class Cohort(str, Enum):
    NEW = "New"
    EXISTING = "Existing"


class Subgroup(str, Enum):
    RETAINED = "Retained"
    DROPOUT = "Dropout"
    NEITHER = "Neither"


@dataclass(frozen=True)
class CohortAssignment:
    user_id: str
    cohort: Cohort
    subgroup: Subgroup = Subgroup.NEITHER

    def __post_init__(self):
        if self.subgroup is not Subgroup.NEITHER and self.cohort is not Cohort.NEW:
            raise ConfigError("subgroup applies to the New cohort only")


@dataclass(frozen=True)
class StudyWindow:
    """Observation window plus the cohort thresholds applied inside it.

    A "month" is a 30-day block of the follow-up period and an "active
    day" is a calendar day (floor(timestamp_h / 24)) with at least one
    interaction.
    """

    start_h: float
    end_h: float
    new_user_quiet_period_days: int = 60
    retained_min_active_months: int = 3
    dropout_max_active_days: int = 30

    def __post_init__(self):
        if not self.start_h < self.end_h:
            raise ConfigError("window start must precede end")
        if min(
            self.new_user_quiet_period_days,
            self.retained_min_active_months,
            self.dropout_max_active_days,
        ) <= 0:
            raise ConfigError("window thresholds must be positive")

    @property
    def quiet_end_h(self) -> float:
        return self.start_h + 24.0 * self.new_user_quiet_period_days


@dataclass(frozen=True)
class CovariateSchema:
    """Declared categorical levels, shared by validation and encoding."""

    device_type: tuple[str, ...]
    os_version: tuple[str, ...]
    nlu_domain: tuple[str, ...]
    domain_label: tuple[str, ...]

    def levels_for(self, fieldname: str) -> tuple[str, ...]:
        return getattr(self, fieldname)

    def to_json_dict(self) -> dict:
        return {
            "device_type": list(self.device_type),
            "os_version": list(self.os_version),
            "nlu_domain": list(self.nlu_domain),
            "domain_label": list(self.domain_label),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CovariateSchema":
        try:
            return cls(
                device_type=tuple(doc["device_type"]),
                os_version=tuple(doc["os_version"]),
                nlu_domain=tuple(doc["nlu_domain"]),
                domain_label=tuple(doc["domain_label"]),
            )
        except KeyError as exc:
            raise ConfigError(f"covariate schema missing key {exc}") from exc


@dataclass(frozen=True)
class ValidatedLog:
    """Interaction records sorted by (user_id, timestamp_h).

    Immutable once constructed; safe to share across workers.
    """

    records: tuple[InteractionRecord, ...]
    schema: CovariateSchema

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_user(self) -> dict[str, list[InteractionRecord]]:
        users: dict[str, list[InteractionRecord]] = {}
        for rec in self.records:
            users.setdefault(rec.user_id, []).append(rec)
        return users


def _check_record(rec: InteractionRecord, schema: CovariateSchema, idx: int) -> list:
    errs = []

    def bad(fieldname: str, msg: str):
        errs.append((idx, fieldname, msg))

    if not isinstance(rec.user_id, str) or not rec.user_id:
        bad("user_id", "must be a nonempty string")
    if not math.isfinite(rec.timestamp_h) or rec.timestamp_h < 0:
        bad("timestamp_h", f"must be a finite value >= 0, got {rec.timestamp_h!r}")
    if len(rec.tokens) == 0:
        bad("tokens", "must be nonempty")
    if rec.helpful not in (0, 1):
        bad("helpful", f"must be 0 or 1, got {rec.helpful!r}")
    if rec.domain_label not in schema.domain_label:
        bad("domain_label", f"{rec.domain_label!r} not in schema")

    cov = rec.covariates
    for name in CATEGORICAL_COVARIATES:
        if getattr(cov, name) not in schema.levels_for(name):
            bad(name, f"{getattr(cov, name)!r} not in schema")
    if cov.token_count < 1:
        bad("token_count", f"must be >= 1, got {cov.token_count!r}")
    if not 0.0 <= cov.wer <= 1.0:
        bad("wer", f"must lie in [0, 1], got {cov.wer!r}")
    if not 0.0 <= cov.nlu_confidence <= 1.0:
        bad("nlu_confidence", f"must lie in [0, 1], got {cov.nlu_confidence!r}")
    if cov.prior_active_days < 0:
        bad("prior_active_days", f"must be >= 0, got {cov.prior_active_days!r}")
    if not 0 <= cov.day_of_week <= 6:
        bad("day_of_week", f"must lie in 0..6, got {cov.day_of_week!r}")
    if not 0 <= cov.hour_of_day <= 23:
        bad("hour_of_day", f"must lie in 0..23, got {cov.hour_of_day!r}")
    return errs


def validate_log(
    records: Iterable[InteractionRecord], schema: CovariateSchema
) -> ValidatedLog:
    """Check every record against the log contract and sort the result.

    Returns the records sorted ascending by (user_id, timestamp_h).
    Raises :class:`LogValidationError` carrying (index, field, message)
    for every violation; indices refer to the input order.  Validating a
    :class:`ValidatedLog`'s records again is the identity.
    """
    recs = list(records)
    errors = []
    for idx, rec in enumerate(recs):
        errors.extend(_check_record(rec, schema, idx))
    if errors:
        raise LogValidationError(errors)
    recs.sort(key=lambda r: (r.user_id, r.timestamp_h))
    return ValidatedLog(records=tuple(recs), schema=schema)


def active_days(timestamps_h: Iterable[float]) -> set[int]:
    """Distinct calendar days (floor of hours / 24) touched by the times."""
    return {int(math.floor(t / 24.0)) for t in timestamps_h}


def assign_cohorts(log: ValidatedLog, window: StudyWindow) -> list[CohortAssignment]:
    """Partition in-window users into New / Existing cohorts.

    A user is New when they have at least one interaction inside the
    window and none during the quiet period (the window's first
    ``new_user_quiet_period_days`` days); otherwise Existing.  New users
    are Retained when they were active in strictly more than
    ``retained_min_active_months`` 30-day blocks of the follow-up,
    Dropout when (not Retained and) their follow-up activity spans no
    more than ``dropout_max_active_days`` distinct active days, Neither
    otherwise.  Users with no in-window interaction are skipped.
    """
    if window.quiet_end_h >= window.end_h:
        raise ConfigError("window shorter than the new-user quiet period")

    out: list[CohortAssignment] = []
    for user_id, recs in log.by_user().items():
        in_window = [
            r.timestamp_h for r in recs if window.start_h <= r.timestamp_h <= window.end_h
        ]
        if not in_window:
            continue
        quiet = [t for t in in_window if t < window.quiet_end_h]
        if quiet:
            out.append(CohortAssignment(user_id, Cohort.EXISTING))
            continue
        followup = [t for t in in_window if t >= window.quiet_end_h]
        months = {
            int(math.floor((t - window.quiet_end_h) / (24.0 * 30.0))) for t in followup
        }
        days = active_days(followup)
        if len(months) > window.retained_min_active_months:
            sub = Subgroup.RETAINED
        elif len(days) <= window.dropout_max_active_days:
            sub = Subgroup.DROPOUT
        else:
            sub = Subgroup.NEITHER
        out.append(CohortAssignment(user_id, Cohort.NEW, sub))
    out.sort(key=lambda a: a.user_id)
    return out


# --- JSON-lines interface ---------------------------------------------------


def record_from_json_dict(doc: dict) -> InteractionRecord:
    cov = doc["covariates"]
    return InteractionRecord(
        user_id=doc["user_id"],
        timestamp_h=float(doc["timestamp_h"]),
        tokens=tuple(doc["tokens"]),
        domain_label=doc["domain_label"],
        helpful=int(doc["helpful"]),
        covariates=CovariateVector(
            device_type=cov["device_type"],
            os_version=cov["os_version"],
            token_count=int(cov["token_count"]),
            wer=float(cov["wer"]),
            nlu_domain=cov["nlu_domain"],
            nlu_confidence=float(cov["nlu_confidence"]),
            prior_active_days=int(cov["prior_active_days"]),
            day_of_week=int(cov["day_of_week"]),
            hour_of_day=int(cov["hour_of_day"]),
        ),
    )


def read_log_jsonl(path, schema: CovariateSchema) -> ValidatedLog:
    """Read and validate a JSON-lines interaction log."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_json_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise LogValidationError(
                    [(lineno - 1, "record", f"line {lineno}: {exc}")]
                ) from exc
    return validate_log(records, schema)


def write_log_jsonl(path, log: Sequence[InteractionRecord] | ValidatedLog) -> None:
    records = log.records if isinstance(log, ValidatedLog) else log
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")


def read_schema_json(path) -> CovariateSchema:
    with open(path, encoding="utf-8") as fh:
        return CovariateSchema.from_json_dict(json.load(fh))


def write_schema_json(path, schema: CovariateSchema) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_json_dict(), fh, indent=2)
        fh.write("\n")
