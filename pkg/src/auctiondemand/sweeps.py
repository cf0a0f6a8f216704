"""Counterfactual feature sweeps.

Vary one feature over a fixed grid for a sample of listings, re-predict the
price-setting (rank-2) expected log bid at each grid value, and normalize
each curve so the first grid point maps to 1 and the last to 0. The
monotonicity report then measures how often predictions decline over the
grid, which for depreciation-like features is the economically expected
shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoder import ListingFeatures
from .errors import ConfigError, DataError

DEFAULT_MILEAGE_GRID = (25_000.0, 50_000.0, 75_000.0, 100_000.0, 125_000.0, 150_000.0)

DEGENERATE_SPAN = 1e-12
MONOTONE_TOL = 1e-12

Predictor = Callable[[ListingFeatures], float]


@dataclass(frozen=True)
class SweepSpec:
    feature: str = "mileage"
    grid: tuple[float, ...] = DEFAULT_MILEAGE_GRID
    sample_size: int = 200

    def __post_init__(self):
        if len(self.grid) < 2:
            raise ConfigError("sweep grid needs at least two points")
        diffs = np.diff(np.asarray(self.grid, dtype=float))
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ConfigError("sweep grid must be strictly monotone")
        if self.sample_size < 1:
            raise ConfigError("sample_size must be >= 1")


@dataclass
class SweepCurve:
    listing_id: str
    raw: np.ndarray
    normalized: np.ndarray | None  # None when the curve is degenerate

    @property
    def degenerate(self) -> bool:
        return self.normalized is None


@dataclass
class SweepResult:
    spec: SweepSpec
    curves: list[SweepCurve]


def run_sweep(predict: Predictor, listings, spec: SweepSpec = SweepSpec()) -> SweepResult:
    """Predict along the grid for every listing and normalize the curves.

    Normalization anchors the first grid value at 1 and the last at 0; a
    listing whose first and last predictions coincide cannot be anchored and
    is flagged degenerate (excluded from aggregates, counted in totals).
    """
    curves = []
    for record in listings:
        raw = np.array(
            [predict(record.features.with_value(spec.feature, g)) for g in spec.grid]
        )
        if not np.all(np.isfinite(raw)):
            raise DataError(f"{record.listing_id}: non-finite sweep prediction")
        span = raw[0] - raw[-1]
        normalized = (raw - raw[-1]) / span if abs(span) > DEGENERATE_SPAN else None
        curves.append(SweepCurve(record.listing_id, raw, normalized))
    return SweepResult(spec=spec, curves=curves)


@dataclass
class MonotonicityReport:
    fraction_monotone: float
    grid: tuple[float, ...]
    mean_normalized: np.ndarray
    n_curves: int
    n_degenerate: int


def monotonicity_report(result: SweepResult) -> MonotonicityReport:
    """Share of curves that decline monotonically, plus the mean normalized
    curve.

    A curve counts as a monotone decline when no step increases and the
    overall change is an actual decrease; an everywhere-flat curve stays in
    the denominator but not the numerator. The mean curve averages the
    non-degenerate normalized curves, so its endpoints are exactly (1, 0).
    """
    if not result.curves:
        raise DataError("no curves to report on")
    monotone = 0
    stack = []
    for curve in result.curves:
        steps = np.diff(curve.raw)
        if np.all(steps <= MONOTONE_TOL) and (curve.raw[0] - curve.raw[-1]) > MONOTONE_TOL:
            monotone += 1
        if curve.normalized is not None:
            stack.append(curve.normalized)
    mean_curve = np.mean(stack, axis=0) if stack else np.full(len(result.spec.grid), np.nan)
    return MonotonicityReport(
        fraction_monotone=monotone / len(result.curves),
        grid=result.spec.grid,
        mean_normalized=mean_curve,
        n_curves=len(result.curves),
        n_degenerate=sum(c.degenerate for c in result.curves),
    )


def sweep_csv(result: SweepResult) -> str:
    lines = ["listing_id,grid_value,raw_pred,normalized"]
    for curve in result.curves:
        for g, raw_v, norm_v in zip(
            result.spec.grid, curve.raw,
            curve.normalized if curve.normalized is not None else [None] * len(curve.raw),
        ):
            norm_txt = "" if norm_v is None else repr(float(norm_v))
            lines.append(f"{curve.listing_id},{g!r},{float(raw_v)!r},{norm_txt}")
    return "\n".join(lines) + "\n"


def aggregate_csv(report: MonotonicityReport) -> str:
    lines = ["grid_value,mean_normalized,n_curves"]
    for g, v in zip(report.grid, report.mean_normalized):
        lines.append(f"{g!r},{float(v)!r},{report.n_curves - report.n_degenerate}")
    return "\n".join(lines) + "\n"
