import pytest

from feedback_effects.domain import (
    CovariateSchema,
    CovariateVector,
    InteractionRecord,
)

DEFAULT_SCHEMA = CovariateSchema(
    device_type=("phone", "speaker", "wearable"),
    os_version=("v1", "v2", "v3"),
    nlu_domain=("weather", "music", "timer", "phone", "qa"),
    domain_label=("weather", "music", "timer", "phone", "qa"),
)


def make_covariates(**overrides) -> CovariateVector:
    base = dict(
        device_type="phone",
        os_version="v1",
        token_count=4,
        wer=0.1,
        nlu_domain="weather",
        nlu_confidence=0.9,
        prior_active_days=5,
        day_of_week=2,
        hour_of_day=10,
    )
    base.update(overrides)
    return CovariateVector(**base)


def make_record(
    user_id: str,
    timestamp_h: float,
    helpful: int = 0,
    tokens=("what", "is", "the", "weather"),
    domain_label: str = "weather",
    **cov_overrides,
) -> InteractionRecord:
    return InteractionRecord(
        user_id=user_id,
        timestamp_h=timestamp_h,
        tokens=tuple(tokens),
        domain_label=domain_label,
        helpful=helpful,
        covariates=make_covariates(**cov_overrides),
    )


@pytest.fixture
def schema() -> CovariateSchema:
    return DEFAULT_SCHEMA
