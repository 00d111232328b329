import pytest

from feedback_effects.domain import (
    Cohort,
    StudyWindow,
    Subgroup,
    assign_cohorts,
    read_log_jsonl,
    validate_log,
    write_log_jsonl,
)
from feedback_effects.errors import ConfigError, LogValidationError

from conftest import DEFAULT_SCHEMA, make_record


class TestValidateLog:
    def test_empty_input_gives_empty_log(self, schema):
        log = validate_log([], schema)
        assert len(log) == 0

    def test_out_of_range_wer_is_reported_with_field(self, schema):
        records = [make_record("u1", 1.0, wer=1.5)]
        with pytest.raises(LogValidationError) as exc:
            validate_log(records, schema)
        (error,) = exc.value.errors
        assert error[0] == 0
        assert error[1] == "wer"

    def test_records_sorted_by_user_then_time(self, schema):
        records = [
            make_record("u2", 5.0),
            make_record("u1", 9.0),
            make_record("u1", 2.0),
        ]
        log = validate_log(records, schema)
        keys = [(r.user_id, r.timestamp_h) for r in log]
        assert keys == [("u1", 2.0), ("u1", 9.0), ("u2", 5.0)]

    def test_validation_is_idempotent(self, schema):
        log = validate_log([make_record("u1", 3.0), make_record("u1", 1.0)], schema)
        again = validate_log(log.records, schema)
        assert again.records == log.records

    def test_multiple_violations_all_reported(self, schema):
        records = [
            make_record("u1", -1.0),
            make_record("u2", 1.0, helpful=3),
            make_record("u3", 2.0, tokens=()),
        ]
        with pytest.raises(LogValidationError) as exc:
            validate_log(records, schema)
        fields = {(e[0], e[1]) for e in exc.value.errors}
        assert fields == {(0, "timestamp_h"), (1, "helpful"), (2, "tokens")}

    def test_unknown_categorical_level_rejected(self, schema):
        with pytest.raises(LogValidationError) as exc:
            validate_log([make_record("u1", 1.0, device_type="toaster")], schema)
        assert exc.value.errors[0][1] == "device_type"

    def test_jsonl_round_trip(self, tmp_path, schema):
        log = validate_log(
            [make_record("u1", 3.5, helpful=1), make_record("u2", 1.25)], schema
        )
        path = tmp_path / "events.jsonl"
        write_log_jsonl(path, log)
        back = read_log_jsonl(path, schema)
        assert back.records == log.records


def _days_to_records(user_id, days):
    # one interaction at noon on each listed calendar day
    return [make_record(user_id, 24.0 * d + 12.0) for d in days]


class TestAssignCohorts:
    WINDOW = StudyWindow(start_h=0.0, end_h=180 * 24.0)

    def _assign(self, records):
        log = validate_log(records, DEFAULT_SCHEMA)
        return {a.user_id: a for a in assign_cohorts(log, self.WINDOW)}

    def test_first_active_day_70_is_new(self):
        got = self._assign(_days_to_records("u1", [70]))
        assert got["u1"].cohort is Cohort.NEW

    def test_active_day_10_is_existing(self):
        got = self._assign(_days_to_records("u1", [10, 70]))
        assert got["u1"].cohort is Cohort.EXISTING

    def test_retained_when_active_across_all_followup_months(self):
        days = (
            list(range(61, 70))
            + list(range(91, 100))
            + list(range(121, 130))
            + list(range(151, 159))
        )
        assert len(days) == 35
        got = self._assign(_days_to_records("u1", days))
        assert got["u1"].cohort is Cohort.NEW
        assert got["u1"].subgroup is Subgroup.RETAINED

    def test_dropout_when_five_days_in_first_month_only(self):
        got = self._assign(_days_to_records("u1", [61, 62, 63, 64, 65]))
        assert got["u1"].cohort is Cohort.NEW
        assert got["u1"].subgroup is Subgroup.DROPOUT

    def test_neither_when_moderately_active_without_retention(self):
        # 40 active days confined to two follow-up months
        days = list(range(61, 90)) + list(range(91, 102))
        got = self._assign(_days_to_records("u1", days))
        assert got["u1"].subgroup is Subgroup.NEITHER

    def test_existing_users_never_carry_a_subgroup(self):
        got = self._assign(_days_to_records("u1", [10, 61, 62]))
        assert got["u1"].cohort is Cohort.EXISTING
        assert got["u1"].subgroup is Subgroup.NEITHER

    def test_out_of_window_users_are_skipped(self):
        got = self._assign(_days_to_records("u1", [500]))
        assert got == {}

    def test_partition_is_complete_and_deterministic(self):
        records = []
        for i, first_day in enumerate([1, 30, 59, 60, 61, 100, 179]):
            records.extend(_days_to_records(f"u{i}", [first_day]))
        log = validate_log(records, DEFAULT_SCHEMA)
        a1 = assign_cohorts(log, self.WINDOW)
        a2 = assign_cohorts(log, self.WINDOW)
        assert a1 == a2
        assert {a.user_id for a in a1} == {f"u{i}" for i in range(7)}
        for a in a1:
            assert a.cohort in (Cohort.NEW, Cohort.EXISTING)

    def test_quiet_period_boundary_is_strict(self):
        # day 59 ends inside the quiet period, day 60 starts the follow-up
        got = self._assign(_days_to_records("u1", [59]))
        assert got["u1"].cohort is Cohort.EXISTING
        got = self._assign(_days_to_records("u2", [60]))
        assert got["u2"].cohort is Cohort.NEW

    def test_window_shorter_than_quiet_period_rejected(self):
        log = validate_log(_days_to_records("u1", [1]), DEFAULT_SCHEMA)
        with pytest.raises(ConfigError):
            assign_cohorts(log, StudyWindow(start_h=0.0, end_h=30 * 24.0))
