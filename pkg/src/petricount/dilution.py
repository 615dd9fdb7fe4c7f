"""Serial-dilution bookkeeping: scaled CFU estimates, t-intervals, diagnostics.

A dish plated at dilution d holding n colonies witnesses n/d CFUs in the
undiluted sample. Estimates from all dishes of an experiment are pooled per
class and summarized with a Student-t confidence interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy import stats

from .errors import ExperimentError

CLASS_KEYS = ("BVG-", "BVG+")


@dataclass(frozen=True)
class DilutionFactor:
    """Fraction of the original concentration plated, e.g. 0.001 for 10^3-fold."""

    value: float

    def __post_init__(self):
        if not (0.0 < self.value <= 1.0):
            raise ExperimentError(f"dilution factor must be in (0, 1], got {self.value}")


@dataclass
class TriplicateGroup:
    image_ids: list
    dilution: DilutionFactor


@dataclass
class Experiment:
    id: str
    triplicates: list[TriplicateGroup]
    created_at: datetime | None = None

    def __post_init__(self):
        if not self.triplicates:
            raise ExperimentError("experiment needs at least one triplicate")
        dilutions = [t.dilution.value for t in self.triplicates]
        if len(set(dilutions)) != len(dilutions):
            raise ExperimentError("triplicate dilutions must be distinct")
        seen = set()
        for t in self.triplicates:
            for image_id in t.image_ids:
                if image_id in seen:
                    raise ExperimentError(f"image {image_id} referenced by more than one triplicate")
                seen.add(image_id)
        if self.created_at is None:
            self.created_at = datetime.now(timezone.utc)

    def all_image_ids(self) -> list:
        return [iid for t in self.triplicates for iid in t.image_ids]


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "warning" | "error"
    code: str
    message: str

    def __str__(self):
        return f"{self.severity.upper()}: {self.message}"


@dataclass(frozen=True)
class Estimate:
    point_estimate: float
    ci_low: float
    ci_high: float
    confidence_level: float
    n_dishes: int


@dataclass
class QuantReport:
    per_class: dict  # class name -> Estimate
    total: Estimate
    per_dish: list  # rows: {image_id, dilution, counts per class, scaled per class}
    warnings: list = field(default_factory=list)


def scaled_estimate(count: float, d: DilutionFactor) -> float:
    """CFU count in the undiluted sample witnessed by one dish."""
    if count < 0:
        raise ExperimentError(f"colony count cannot be negative, got {count}")
    return count / d.value


def _t_interval(samples: list[float], level: float):
    n = len(samples)
    mean = float(np.mean(samples))
    if n == 1:
        return Estimate(mean, mean, mean, level, 1), True
    s = float(np.std(samples, ddof=1))
    half = float(stats.t.ppf((1.0 + level) / 2.0, n - 1)) * s / np.sqrt(n)
    return Estimate(mean, mean - half, mean + half, level, n), False


def aggregate_ci(experiment: Experiment, counts: dict, confidence_level: float = 0.95) -> QuantReport:
    """Pool scaled per-dish estimates per class into t-interval summaries.

    ``counts`` maps image_id to {"BVG-": n, "BVG+": n}. Every image the
    experiment references must be present.
    """
    if not (0.0 < confidence_level < 1.0):
        raise ExperimentError(f"confidence level must be in (0, 1), got {confidence_level}")
    missing = [iid for iid in experiment.all_image_ids() if iid not in counts]
    if missing:
        raise ExperimentError(f"missing counts for image(s): {missing}")
    per_dish = []
    scaled = {key: [] for key in CLASS_KEYS}
    scaled_total = []
    for trip in experiment.triplicates:
        for image_id in trip.image_ids:
            row_counts = counts[image_id]
            row = {
                "image_id": image_id,
                "dilution": trip.dilution.value,
                "counts": {key: int(row_counts.get(key, 0)) for key in CLASS_KEYS},
                "scaled": {},
            }
            for key in CLASS_KEYS:
                val = scaled_estimate(row["counts"][key], trip.dilution)
                row["scaled"][key] = val
                scaled[key].append(val)
            total = scaled_estimate(sum(row["counts"].values()), trip.dilution)
            row["scaled"]["total"] = total
            scaled_total.append(total)
            per_dish.append(row)
    warnings = []
    per_class = {}
    for key in CLASS_KEYS:
        per_class[key], degenerate = _t_interval(scaled[key], confidence_level)
        if degenerate:
            warnings.append(f"{key}: single dish, confidence interval collapsed to the point estimate")
    total_est, degenerate = _t_interval(scaled_total, confidence_level)
    if degenerate:
        warnings.append("total: single dish, confidence interval collapsed to the point estimate")
    return QuantReport(per_class=per_class, total=total_est, per_dish=per_dish, warnings=warnings)


def validate_experiment(experiment: Experiment, images_with_unvalidated=()) -> list[Diagnostic]:
    """Consistency diagnostics; never raises.

    ``images_with_unvalidated`` lists image ids still carrying unsure model
    predictions that nobody has validated or invalidated.
    """
    out = []
    dilutions = [t.dilution.value for t in experiment.triplicates]
    if any(b >= a for a, b in zip(dilutions, dilutions[1:])):
        out.append(
            Diagnostic(
                "warning",
                "non_decreasing_dilutions",
                f"triplicate dilutions are not strictly decreasing: {dilutions}",
            )
        )
    for k, trip in enumerate(experiment.triplicates):
        if len(trip.image_ids) != 3:
            out.append(
                Diagnostic(
                    "error",
                    "image_count",
                    f"triplicate {k} has image count != 3 ({len(trip.image_ids)})",
                )
            )
    flagged = sorted(
        (iid for iid in set(experiment.all_image_ids()) if iid in set(images_with_unvalidated)),
        key=str,
    )
    if flagged:
        out.append(
            Diagnostic(
                "warning",
                "unvalidated_predictions",
                f"image(s) with unvalidated model predictions: {flagged}",
            )
        )
    return out
