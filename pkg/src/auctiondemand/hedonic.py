"""Pooled-OLS hedonic baseline for the price-setting bid.

Regresses the log runner-up bid on logged/level continuous terms, a
transmission flag, and dummy blocks for cohorts (brand-body pairs with
enough observations, brand otherwise) and body style, with one reference
level excluded per block. Estimation is QR-based least squares with
heteroskedasticity-robust (HC1) standard errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DataError
from .simulator import AuctionRecord

logger = logging.getLogger(__name__)

RANK_DEFICIENCY_TOL = 1e-10


@dataclass(frozen=True)
class HedonicSpec:
    """Design choices for the baseline regression.

    Cohort fixed effects (brand-body pairs above the frequency cutoff,
    brand otherwise) subsume a separate body-style block; enabling both
    makes the design exactly collinear whenever every pair is frequent,
    which the rank check would reject.
    """

    use_cohorts: bool = True
    cohort_cutoff: int = 50
    use_body_style: bool = False
    include_trend: bool = True
    target_rank: int = 2


@dataclass
class DesignLevels:
    """Fitted categorical levels and trend normalization, reused at predict
    time so columns stay aligned."""

    cohort_levels: list[str]
    cohort_reference: str
    body_levels: list[str]
    body_reference: str
    frequent_pairs: set[str]
    trend_min: float
    trend_max: float


def _cohort_label(record: AuctionRecord, frequent_pairs: set[str], use_cohorts: bool) -> str:
    if not use_cohorts:
        return record.features.brand
    pair = f"{record.features.brand}:{record.features.body_style}"
    return pair if pair in frequent_pairs else record.features.brand


def fit_levels(records: list[AuctionRecord], spec: HedonicSpec) -> DesignLevels:
    """Derive categorical levels from training records.

    Cohorts form at the brand-body pair level when the pair clears the
    frequency cutoff and fall back to the brand alone otherwise; the first
    sorted level of each block is the reference.
    """
    counts: dict[str, int] = {}
    for r in records:
        pair = f"{r.features.brand}:{r.features.body_style}"
        counts[pair] = counts.get(pair, 0) + 1
    frequent = {p for p, c in counts.items() if c >= spec.cohort_cutoff}
    cohorts = sorted({_cohort_label(r, frequent, spec.use_cohorts) for r in records})
    bodies = sorted({r.features.body_style for r in records})
    times = [r.sale_time for r in records]
    t_min, t_max = float(min(times)), float(max(times))
    return DesignLevels(
        cohort_levels=cohorts,
        cohort_reference=cohorts[0],
        body_levels=bodies,
        body_reference=bodies[0],
        frequent_pairs=frequent,
        trend_min=t_min,
        trend_max=t_max if t_max > t_min else t_min + 1.0,
    )


def build_design(
    records: list[AuctionRecord],
    spec: HedonicSpec = HedonicSpec(),
    levels: DesignLevels | None = None,
) -> tuple[np.ndarray, np.ndarray, list[str], DesignLevels]:
    """Design matrix, log-price target, column names, and fitted levels.

    Unseen categories at prediction time collapse to the reference level
    with a logged warning. Records lacking the target rank are rejected.
    """
    if not records:
        raise DataError("no records to build a design from")
    for r in records:
        if r.n_bidders < spec.target_rank:
            raise DataError(f"{r.listing_id}: no rank-{spec.target_rank} bid")
    if levels is None:
        levels = fit_levels(records, spec)

    columns = ["intercept", "log_mileage", "log_horsepower", "age"]
    if spec.include_trend:
        columns.append("time_trend")
    columns.append("automatic")
    cohort_dummies = [c for c in levels.cohort_levels if c != levels.cohort_reference]
    columns += [f"cohort[{c}]" for c in cohort_dummies]
    body_dummies = []
    if spec.use_body_style:
        body_dummies = [b for b in levels.body_levels if b != levels.body_reference]
        columns += [f"body[{b}]" for b in body_dummies]

    rows = []
    y = []
    trend_span = levels.trend_max - levels.trend_min
    for r in records:
        f = r.features
        row = [1.0, np.log1p(f.mileage), np.log(f.horsepower), f.age]
        if spec.include_trend:
            row.append(np.clip((r.sale_time - levels.trend_min) / trend_span, 0.0, 1.0))
        row.append(1.0 if f.automatic else 0.0)
        cohort = _cohort_label(r, levels.frequent_pairs, spec.use_cohorts)
        if cohort not in levels.cohort_levels:
            logger.warning("unseen cohort %r mapped to reference %r",
                           cohort, levels.cohort_reference)
            cohort = levels.cohort_reference
        row += [1.0 if cohort == c else 0.0 for c in cohort_dummies]
        if spec.use_body_style:
            body = f.body_style
            if body not in levels.body_levels:
                logger.warning("unseen body style %r mapped to reference %r",
                               body, levels.body_reference)
                body = levels.body_reference
            row += [1.0 if body == b else 0.0 for b in body_dummies]
        rows.append(row)
        y.append(np.log(r.final_bids[spec.target_rank - 1]))
    return np.array(rows), np.array(y), columns, levels


@dataclass
class OLSFit:
    beta: np.ndarray
    robust_se: np.ndarray
    r2: float
    rmse: float
    columns: list[str]

    def coefficient_csv(self) -> str:
        lines = ["term,estimate,robust_se"]
        for name, b, se in zip(self.columns, self.beta, self.robust_se):
            lines.append(f"{name},{b!r},{se!r}")
        return "\n".join(lines) + "\n"


def fit_ols(X: np.ndarray, y: np.ndarray, columns: list[str] | None = None) -> OLSFit:
    """Least squares via pivoted QR with HC1 robust standard errors."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n <= k:
        raise DataError(f"need more rows ({n}) than columns ({k})")
    columns = columns or [f"x{i}" for i in range(k)]

    q_mat, r_mat, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_mat))
    threshold = RANK_DEFICIENCY_TOL * max(diag[0], 1.0) * max(n, k)
    deficient = np.where(diag <= threshold)[0]
    if deficient.size:
        bad = [columns[piv[i]] for i in deficient]
        raise DataError(f"design matrix is rank deficient in columns: {bad}")

    beta_piv = linalg.solve_triangular(r_mat, q_mat.T @ y)
    beta = np.empty(k)
    beta[piv] = beta_piv

    resid = y - X @ beta
    sse = float(resid @ resid)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else float("nan")
    rmse = float(np.sqrt(sse / n))

    # HC1: (X'X)^{-1} X' diag(e^2) X (X'X)^{-1} * n/(n-k)
    r_inv = linalg.solve_triangular(r_mat, np.eye(k))
    xtx_inv = np.empty((k, k))
    xtx_inv[np.ix_(piv, piv)] = r_inv @ r_inv.T
    meat = (X * (resid**2)[:, None]).T @ X
    cov = xtx_inv @ meat @ xtx_inv * (n / (n - k))
    robust_se = np.sqrt(np.diag(cov))
    return OLSFit(beta=beta, robust_se=robust_se, r2=r2, rmse=rmse, columns=columns)


def predict_ols(fit: OLSFit, X_new: np.ndarray, columns: list[str]) -> np.ndarray:
    """Linear prediction; refuses silently misaligned designs."""
    if columns != fit.columns:
        raise DataError(
            f"design columns differ from fit: {columns[:4]}... vs {fit.columns[:4]}..."
        )
    X_new = np.asarray(X_new, dtype=float)
    if X_new.shape[1] != fit.beta.shape[0]:
        raise DataError("column count mismatch with fitted coefficients")
    return X_new @ fit.beta


@dataclass
class HedonicModel:
    """Fitted baseline bundling the spec, levels, and coefficients."""

    spec: HedonicSpec
    levels: DesignLevels
    fit: OLSFit

    @classmethod
    def train(cls, records: list[AuctionRecord], spec: HedonicSpec = HedonicSpec()) -> "HedonicModel":
        usable = [r for r in records if not r.excluded]
        X, y, columns, levels = build_design(usable, spec)
        return cls(spec=spec, levels=levels, fit=fit_ols(X, y, columns))

    def predict_records(self, records: list[AuctionRecord]) -> dict[str, float]:
        X, _, columns, _ = build_design(records, self.spec, self.levels)
        preds = predict_ols(self.fit, X, columns)
        return {r.listing_id: float(p) for r, p in zip(records, preds)}
