"""Exception hierarchy shared across the toolkit.

Two families matter for callers (and for CLI exit codes): validation
errors mean the inputs were malformed, computation errors mean a
well-formed request could not be completed.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Malformed input: bad config, bad log record, out-of-domain argument."""


class ConfigError(ValidationError):
    """Invalid configuration document or parameter combination."""


class LogValidationError(ValidationError):
    """One or more interaction records violated the log contract.

    ``errors`` holds ``(index, field, message)`` triples, one per violation.
    """

    def __init__(self, errors: list[tuple[int, str, str]]):
        self.errors = errors
        preview = "; ".join(f"record {i}: {f}: {m}" for i, f, m in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} invalid record(s): {preview}{more}")


class ComputationError(RuntimeError):
    """A well-formed request that cannot be completed on this data."""


class ConvergenceError(ComputationError):
    """Iterative fit failed to converge; ``trace`` holds per-iteration stats."""

    def __init__(self, message: str, trace: list[dict] | None = None):
        self.trace = trace or []
        super().__init__(message)


class SeparationError(ComputationError):
    """Complete separation in logistic fit; refit with ridge > 0."""


class DegenerateArmError(ComputationError):
    """A treatment arm is empty or carries zero total weight."""


class EmptyMatchError(ComputationError):
    """No stratum contains units from both arms."""
