"""Per-rank fit metrics and model-comparison report assembly.

Six metrics per (model, bid rank): RMSE and R-squared on the log scale,
mean/median absolute percentage error and the hit rate on the level scale,
and multiplicative bias, (exp(mean(log P - log T)) - 1) * 100, which reads as
systematic percent over- or under-prediction.

Denominator conventions: MAPE and MdAPE divide |P - T| by the target T; the
hit rate divides by the prediction P (so a hit means the target lies within
the tolerance band around the prediction) and includes the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, JoinError

DEFAULT_HIT_TOLERANCE = 0.10

# boundary-inclusive hit comparison: an exact 10% error that round-trips
# through logs lands one ulp above the tolerance
_HIT_EPS = 1e-12


@dataclass(frozen=True)
class Metrics:
    n: int
    rmse_log: float
    r2: float
    mape_pct: float
    mdape_pct: float
    hit_pct: float
    bias_pct: float

    def as_tuple(self) -> tuple:
        return (self.n, self.rmse_log, self.r2, self.mape_pct,
                self.mdape_pct, self.hit_pct, self.bias_pct)


def compute_metrics(pred_log, target_log,
                    hit_tolerance: float = DEFAULT_HIT_TOLERANCE) -> Metrics:
    """Metric row for aligned prediction/target vectors in log space."""
    pred = np.asarray(pred_log, dtype=float)
    target = np.asarray(target_log, dtype=float)
    if pred.shape != target.shape or pred.ndim != 1:
        raise DataError(f"prediction/target shapes differ: {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise DataError("empty input")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise DataError("non-finite entries in predictions or targets")

    log_err = pred - target
    rmse_log = float(np.sqrt(np.mean(log_err**2)))
    sst = float(np.sum((target - target.mean()) ** 2))
    sse = float(np.sum(log_err**2))
    r2 = 1.0 - sse / sst if sst > 0 else float("nan")

    levels_pred = np.exp(pred)
    levels_target = np.exp(target)
    abs_err = np.abs(levels_pred - levels_target)
    ape = abs_err / levels_target
    mape = float(100.0 * np.mean(ape))
    mdape = float(100.0 * np.median(ape))
    hit = float(100.0 * np.mean(abs_err / levels_pred <= hit_tolerance + _HIT_EPS))
    bias = float((np.exp(np.mean(log_err)) - 1.0) * 100.0)
    return Metrics(pred.shape[0], rmse_log, r2, mape, mdape, hit, bias)


@dataclass
class EvalReport:
    model: str
    rows: dict[int, Metrics]


CSV_HEADER = "model,rank,n,rmse_log,r2,mape,mdape,hit,bias"

METRIC_LABELS = (
    ("rmse_log", "RMSE (log)"),
    ("r2", "R2"),
    ("mape_pct", "MAPE%"),
    ("mdape_pct", "MdAPE%"),
    ("hit_pct", "Hit%"),
    ("bias_pct", "Bias%"),
)


def assemble_report(
    predictions: dict[str, dict[int, dict[str, float]]],
    targets: dict[int, dict[str, float]],
    hit_tolerance: float = DEFAULT_HIT_TOLERANCE,
) -> tuple[list[EvalReport], str, str]:
    """Join per-model per-rank predictions against targets by listing id.

    ``predictions[model][rank][listing_id]`` and ``targets[rank][listing_id]``
    are log values. A model may skip whole ranks, but within a covered rank
    its ids must match the target ids exactly; mismatches raise JoinError and
    name the offending ids. Returns (reports, csv text, aligned text table).
    """
    reports = []
    for model in predictions:
        rows = {}
        for rank in sorted(predictions[model]):
            if rank not in targets:
                raise JoinError(f"{model}: no targets for rank {rank}")
            pred_map = predictions[model][rank]
            target_map = targets[rank]
            missing = sorted(set(target_map) - set(pred_map))
            extra = sorted(set(pred_map) - set(target_map))
            if missing or extra:
                raise JoinError(
                    f"{model} rank {rank}: missing={missing[:5]} extra={extra[:5]}"
                )
            ids = sorted(target_map)
            pred = np.array([pred_map[i] for i in ids])
            target = np.array([target_map[i] for i in ids])
            rows[rank] = compute_metrics(pred, target, hit_tolerance)
        reports.append(EvalReport(model=model, rows=rows))
    return reports, render_csv(reports), render_table(reports)


def render_csv(reports: list[EvalReport]) -> str:
    lines = [CSV_HEADER]
    for report in reports:
        for rank in sorted(report.rows):
            m = report.rows[rank]
            cells = [report.model, str(rank), str(m.n)] + [
                repr(float(v)) for v in m.as_tuple()[1:]
            ]
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def render_table(reports: list[EvalReport]) -> str:
    """Fixed-width comparison table: metrics as rows, (rank, model) columns."""
    columns = []
    for report in reports:
        for rank in sorted(report.rows):
            columns.append((rank, report.model))
    columns.sort()
    width = max([12] + [len(f"b{r} {m}") + 2 for r, m in columns])
    header = "Metric".ljust(12) + "".join(f"b{r} {m}".rjust(width) for r, m in columns)
    lines = [header, "-" * len(header)]
    by_key = {(rank, report.model): report.rows[rank]
              for report in reports for rank in report.rows}
    for attr, label in METRIC_LABELS:
        cells = [f"{getattr(by_key[c], attr):.4f}".rjust(width) for c in columns]
        lines.append(label.ljust(12) + "".join(cells))
    lines.append("N".ljust(12) + "".join(str(by_key[c].n).rjust(width) for c in columns))
    return "\n".join(lines) + "\n"
