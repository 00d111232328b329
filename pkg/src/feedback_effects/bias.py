"""Two-period survey measurement-error model.

Satisfaction surveys drawn from *active* users over-represent satisfied
users whenever dissatisfaction suppresses re-engagement.  With a true
satisfied share ``s``, a satisfied re-engagement probability ``p``, a
re-engagement deficit ``delta_p`` for unsatisfied users, ``n_prev`` users
active in the preceding period and ``n_joiners`` newly active users, the
naive survey estimate overshoots by

    exact:        s * delta_p * (1 - s) / (p - delta_p + s * delta_p + n_joiners / n_prev)
    approximate:  s * delta_p * (1 - s) / (1 - delta_p * (1 - s))

where the approximation assumes the user base is in equilibrium
(joiners replace non-returners, ``n_joiners + p * n_prev = n_prev``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ComputationError, ConfigError


@dataclass(frozen=True)
class BiasScenario:
    """Parameters of the two-period re-engagement model."""

    s: float
    p: float
    delta_p: float
    n_prev: int
    n_joiners: int = 0

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ConfigError(f"s must lie in (0, 1), got {self.s}")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"p must lie in (0, 1], got {self.p}")
        if not 0.0 <= self.delta_p <= self.p:
            raise ConfigError(
                f"delta_p must lie in [0, p]; got delta_p={self.delta_p}, p={self.p}"
            )
        if self.n_prev < 1:
            raise ConfigError("n_prev must be >= 1")
        if self.n_joiners < 0:
            raise ConfigError("n_joiners must be >= 0")


def exact_error(scenario: BiasScenario) -> float:
    """Exact survey error ``E[s_hat] - s`` for a scenario."""
    s, p, dp = scenario.s, scenario.p, scenario.delta_p
    denom = p - dp + s * dp + scenario.n_joiners / scenario.n_prev
    if denom <= 0.0:
        raise ConfigError(f"degenerate scenario: error denominator {denom} <= 0")
    return s * dp * (1.0 - s) / denom


def approx_error(s: float, delta_p: float) -> float:
    """Equilibrium approximation of the survey error.

    Valid for ``0 < s < 1`` and ``0 <= delta_p < 1 / (1 - s)``.
    """
    if not 0.0 < s < 1.0:
        raise ConfigError(f"s must lie in (0, 1), got {s}")
    if delta_p < 0.0:
        raise ConfigError(f"delta_p must be >= 0, got {delta_p}")
    denom = 1.0 - delta_p * (1.0 - s)
    if denom <= 0.0:
        raise ConfigError(
            f"approximation undefined: 1 - delta_p*(1-s) = {denom} <= 0"
        )
    return s * delta_p * (1.0 - s) / denom


def error_sweep(
    s_values: list[float], delta_p_grid: list[float]
) -> list[tuple[float, float, float]]:
    """Approximate error over the full (s, delta_p) cross product.

    Returns ``(s, delta_p, epsilon_hat)`` rows, one series per ``s``,
    ordered by (s, delta_p).
    """
    rows = []
    for s in sorted(s_values):
        for dp in sorted(delta_p_grid):
            rows.append((s, dp, approx_error(s, dp)))
    return rows


def write_sweep_csv(path, rows: list[tuple[float, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("s,delta_p,epsilon_hat\n")
        for s, dp, eps in rows:
            fh.write(f"{s:.17g},{dp:.17g},{eps:.17g}\n")


@dataclass(frozen=True)
class PeriodPanel:
    """Simulated user panel over two adjacent periods.

    The first ``scenario.n_prev`` entries are users active in the
    preceding period; the remaining ``scenario.n_joiners`` are new
    arrivals, active in the current period by construction.
    """

    satisfied: np.ndarray
    active_prev: np.ndarray
    active_cur: np.ndarray
    scenario: BiasScenario

    def __post_init__(self):
        n = self.scenario.n_prev + self.scenario.n_joiners
        if not (len(self.satisfied) == len(self.active_prev) == len(self.active_cur) == n):
            raise ConfigError("panel arrays inconsistent with scenario counts")
        if int(self.active_prev.sum()) != self.scenario.n_prev:
            raise ConfigError("active_prev count inconsistent with scenario")


def survey_estimate(panel: PeriodPanel) -> tuple[float, float]:
    """Naive satisfaction survey over current-period active users.

    Returns ``(s_hat, s_hat - s)``: the share of satisfied users among
    those active in the current period, and its deviation from the true
    rate.
    """
    active = panel.active_cur.astype(bool)
    n_active = int(active.sum())
    if n_active == 0:
        raise ComputationError("no active users in the current period")
    s_hat = float(panel.satisfied[active].mean())
    return s_hat, s_hat - panel.scenario.s
