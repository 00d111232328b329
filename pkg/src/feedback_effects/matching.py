"""Coarsened exact matching.

Covariates are coarsened at a declared granularity (bin edges for
numerics, optional level groupings for categoricals), units sharing a
coarsened key form a stratum, and strata missing either arm are dropped.
Matched units carry the standard CEM weights: treated weight 1, control
weight (m_T^s / m_C^s) * (M_C / M_T) within stratum s, where lowercase
counts are per stratum and uppercase totals run over matched strata.
The resulting estimand is a matched-population effect; unmatched counts
are always reported alongside it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .domain import CATEGORICAL_COVARIATES, COVARIATE_FIELDS, CovariateVector
from .errors import ConfigError, EmptyMatchError, ValidationError
from .propensity import AteEstimate, bootstrap_replicates, percentile_ci


@dataclass(frozen=True)
class NumericRule:
    """Left-closed, right-open bins over strictly increasing edges.

    Values at the last edge fall in the final bin; values outside the
    outermost edges are clamped into the boundary bin with a warning.
    """

    edges: tuple[float, ...]

    def __post_init__(self):
        if len(self.edges) < 2 or np.any(np.diff(self.edges) <= 0.0):
            raise ConfigError("bin edges must be strictly increasing, length >= 2")

    def bin_of(self, value: float) -> int:
        edges = self.edges
        if value < edges[0] or value > edges[-1]:
            warnings.warn(
                f"value {value} outside the coarsening range "
                f"[{edges[0]}, {edges[-1]}]; clamped to the boundary bin",
                stacklevel=3,
            )
        idx = int(np.searchsorted(edges, value, side="right")) - 1
        return min(max(idx, 0), len(edges) - 2)


@dataclass(frozen=True)
class CategoricalRule:
    """Optional level grouping; ungrouped levels stay themselves."""

    groups: dict[str, str] = field(default_factory=dict)

    def group_of(self, level: str) -> str:
        return self.groups.get(level, level)


@dataclass(frozen=True)
class CoarseningSpec:
    """Per-covariate coarsening rules; fields without a rule are ignored."""

    rules: dict[str, NumericRule | CategoricalRule]

    def __post_init__(self):
        unknown = set(self.rules) - set(COVARIATE_FIELDS)
        if unknown:
            raise ConfigError(f"unknown covariate fields in coarsening spec: {sorted(unknown)}")
        for name, rule in self.rules.items():
            is_cat = name in CATEGORICAL_COVARIATES
            if is_cat and not isinstance(rule, CategoricalRule):
                raise ConfigError(f"{name} is categorical; expected a CategoricalRule")
            if not is_cat and not isinstance(rule, NumericRule):
                raise ConfigError(f"{name} is numeric; expected a NumericRule")

    @property
    def fields(self) -> list[str]:
        return [f for f in COVARIATE_FIELDS if f in self.rules]


def quantile_edges(values: Sequence[float], n_bins: int = 5) -> tuple[float, ...]:
    """Edges at evenly spaced quantiles of the pooled values (duplicates
    collapsed, so heavily tied data may yield fewer bins)."""
    qs = np.linspace(0.0, 1.0, n_bins + 1)
    edges = np.unique(np.quantile(np.asarray(values, dtype=float), qs))
    if len(edges) < 2:
        edges = np.array([edges[0], edges[0] + 1.0])
    return tuple(float(e) for e in edges)


def default_coarsening(
    covariates: Sequence[CovariateVector],
    fields: Sequence[str] | None = None,
    n_bins: int = 5,
) -> CoarseningSpec:
    """Quintile bins for numeric fields, identity for categoricals."""
    chosen = list(fields) if fields is not None else list(COVARIATE_FIELDS)
    rules: dict[str, NumericRule | CategoricalRule] = {}
    for name in chosen:
        if name in CATEGORICAL_COVARIATES:
            rules[name] = CategoricalRule()
        else:
            pooled = [float(getattr(c, name)) for c in covariates]
            rules[name] = NumericRule(quantile_edges(pooled, n_bins))
    return CoarseningSpec(rules)


def coarsen(x: CovariateVector, spec: CoarseningSpec) -> tuple[Hashable, ...]:
    """Deterministic stratum key: one bin index or group label per ruled field."""
    key: list[Hashable] = []
    for name in spec.fields:
        rule = spec.rules[name]
        if isinstance(rule, CategoricalRule):
            key.append(rule.group_of(getattr(x, name)))
        else:
            key.append(rule.bin_of(float(getattr(x, name))))
    return tuple(key)


@dataclass(frozen=True)
class CemResult:
    """Stratum keys and CEM weights per unit (0 when unmatched)."""

    keys: tuple
    weights: np.ndarray
    z: np.ndarray
    matched_treated: int
    matched_control: int
    unmatched_treated: int
    unmatched_control: int
    l1_before: float
    l1_after: float

    def summary_json(self) -> str:
        return json.dumps(
            {
                "matched": {
                    "treated": self.matched_treated,
                    "control": self.matched_control,
                },
                "unmatched": {
                    "treated": self.unmatched_treated,
                    "control": self.unmatched_control,
                },
                "l1_imbalance_before": self.l1_before,
                "l1_imbalance_after": self.l1_after,
                "n_strata_matched": len(
                    {k for k, w in zip(self.keys, self.weights) if w > 0}
                ),
            },
            indent=2,
        )


def l1_imbalance(keys: Sequence[Hashable], z: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Half the L1 distance between the arms' (weighted) stratum histograms."""
    z = np.asarray(z)
    w = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=float)
    hist: dict[Hashable, list[float]] = {}
    for key, zi, wi in zip(keys, z, w):
        cell = hist.setdefault(key, [0.0, 0.0])
        cell[int(zi)] += wi
    tot0 = sum(c[0] for c in hist.values())
    tot1 = sum(c[1] for c in hist.values())
    if tot0 <= 0.0 or tot1 <= 0.0:
        return 1.0
    return 0.5 * sum(abs(c[1] / tot1 - c[0] / tot0) for c in hist.values())


def cem_match(keys: Sequence[Hashable], z: np.ndarray) -> CemResult:
    """Match on coarsened keys and attach the CEM weights."""
    z = np.asarray(z, dtype=np.int64)
    if len(keys) != len(z):
        raise ValidationError("one key per treatment label required")
    if not set(np.unique(z)) <= {0, 1}:
        raise ValidationError("z must be binary")

    counts: dict[Hashable, list[int]] = {}
    for key, zi in zip(keys, z):
        cell = counts.setdefault(key, [0, 0])
        cell[zi] += 1
    matched_strata = {k for k, (c0, c1) in counts.items() if c0 > 0 and c1 > 0}
    if not matched_strata:
        raise EmptyMatchError("no stratum contains units from both arms")

    m_t_total = sum(counts[k][1] for k in matched_strata)
    m_c_total = sum(counts[k][0] for k in matched_strata)
    weights = np.zeros(len(z))
    for i, (key, zi) in enumerate(zip(keys, z)):
        if key not in matched_strata:
            continue
        if zi == 1:
            weights[i] = 1.0
        else:
            c0, c1 = counts[key][0], counts[key][1]
            weights[i] = (c1 / c0) * (m_c_total / m_t_total)

    unmatched = weights == 0.0
    return CemResult(
        keys=tuple(keys),
        weights=weights,
        z=z,
        matched_treated=int(((z == 1) & ~unmatched).sum()),
        matched_control=int(((z == 0) & ~unmatched).sum()),
        unmatched_treated=int(((z == 1) & unmatched).sum()),
        unmatched_control=int(((z == 0) & unmatched).sum()),
        l1_before=l1_imbalance(keys, z),
        l1_after=l1_imbalance(keys, z, weights),
    )


def cem_ate(
    y: np.ndarray,
    z: np.ndarray,
    result: CemResult,
    n_boot: int = 1000,
    seed: int = 0,
    threads: int = 1,
) -> AteEstimate:
    """Weighted difference in means over the matched units, with a
    percentile bootstrap CI (units resampled and re-matched per replicate)."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=np.int64)
    if len(y) != len(result.weights):
        raise ValidationError("outcome length must match the CEM result")

    estimate = _matched_difference(y, z, result.weights)
    ci_low = ci_high = None
    if n_boot > 0:
        keys = result.keys

        def replicate(idx: np.ndarray) -> float:
            res = cem_match([keys[i] for i in idx], z[idx])
            return _matched_difference(y[idx], z[idx], res.weights)

        reps = bootstrap_replicates(replicate, len(y), n_boot, seed, "cem-bootstrap", threads=threads)
        ci_low, ci_high = percentile_ci(reps, estimate)
    n_matched = result.matched_treated + result.matched_control
    return AteEstimate(estimate, ci_low, ci_high, n_boot, n_matched)


def _matched_difference(y: np.ndarray, z: np.ndarray, w: np.ndarray) -> float:
    w1 = w * (z == 1)
    w0 = w * (z == 0)
    s1, s0 = w1.sum(), w0.sum()
    if s1 <= 0.0 or s0 <= 0.0:
        raise EmptyMatchError("matched set lost an arm")
    return float((w1 @ y) / s1 - (w0 @ y) / s0)
