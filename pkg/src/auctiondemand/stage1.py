"""Outcome-encoding stage: fit the feature encoder and a linear head so the
embedding carries the listing's market outcomes.

Targets per listing are the log values of the 2nd-5th largest bids, log(1+x)
engagement counts, the active-bidder count, and the reserve-met indicator.
The head output for the indicator passes through a sigmoid before entering
the shared mean-squared-error loss; all real-valued targets get a small
Gaussian perturbation at every presentation to discourage memorizing exact
outcomes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .encoder import Encoder, FeatureSchema
from .errors import DataError, NumericalError, RecordExcluded
from .nn import (
    AdamState,
    NetworkSpec,
    NetworkState,
    OptimizerConfig,
    adamw_step,
    backward,
    forward,
    init_state,
    sigmoid,
)
from .simulator import MIN_UNIQUE_BIDDERS, AuctionRecord

TARGET_DIM = 8
TARGET_NAMES = (
    "log_b2", "log_b3", "log_b4", "log_b5",
    "log_views", "log_watchers", "active_bidders", "reserve_met",
)
BID_TARGET_SLICE = slice(0, 4)
RESERVE_INDEX = 7

DEFAULT_NOISE_SIGMA = 0.01


@dataclass(frozen=True)
class Stage1Targets:
    log_b2: float
    log_b3: float
    log_b4: float
    log_b5: float
    log_views: float
    log_watchers: float
    active_bidders: float
    reserve_met: int

    def __post_init__(self):
        # bid ordering is enforced when targets are built from a record;
        # perturbed copies may legitimately break it
        if self.reserve_met not in (0, 1):
            raise DataError(f"reserve_met must be 0/1, got {self.reserve_met}")

    def vector(self) -> np.ndarray:
        return np.array(
            [
                self.log_b2, self.log_b3, self.log_b4, self.log_b5,
                self.log_views, self.log_watchers,
                self.active_bidders, float(self.reserve_met),
            ]
        )


def build_stage1_targets(record: AuctionRecord) -> Stage1Targets:
    """Construct the eight-target vector; excluded records raise."""
    if record.excluded or record.n_bidders < MIN_UNIQUE_BIDDERS:
        raise RecordExcluded(
            f"{record.listing_id}: needs >= {MIN_UNIQUE_BIDDERS} unique bidders"
        )
    if np.any(np.diff(np.log(record.final_bids[1:5])) > 1e-12):
        raise DataError(f"{record.listing_id}: log bids not ordered by rank")
    return Stage1Targets(
        log_b2=record.log_bid(2),
        log_b3=record.log_bid(3),
        log_b4=record.log_bid(4),
        log_b5=record.log_bid(5),
        log_views=float(np.log1p(record.views)),
        log_watchers=float(np.log1p(record.watchers)),
        active_bidders=float(record.n_bidders),
        reserve_met=int(record.reserve_met),
    )


def perturb_targets(t: Stage1Targets, sigma_noise: float,
                    rng: np.random.Generator) -> Stage1Targets:
    """Gaussian noise on every real-valued target; the indicator stays put."""
    if sigma_noise < 0:
        raise DataError(f"noise sigma must be >= 0, got {sigma_noise}")
    if sigma_noise == 0:
        return t
    noise = rng.normal(scale=sigma_noise, size=TARGET_DIM - 1)
    return Stage1Targets(
        log_b2=t.log_b2 + noise[0],
        log_b3=t.log_b3 + noise[1],
        log_b4=t.log_b4 + noise[2],
        log_b5=t.log_b5 + noise[3],
        log_views=t.log_views + noise[4],
        log_watchers=t.log_watchers + noise[5],
        active_bidders=t.active_bidders + noise[6],
        reserve_met=t.reserve_met,
    )


def _transform_prediction(pred: np.ndarray) -> np.ndarray:
    out = pred.copy()
    out[RESERVE_INDEX] = sigmoid(pred[RESERVE_INDEX])
    return out


def stage1_loss(pred: np.ndarray, target: Stage1Targets) -> float:
    """Mean squared error over the eight components, sigmoid on the reserve
    output."""
    pred = np.asarray(pred, dtype=float)
    if pred.shape != (TARGET_DIM,):
        raise DataError(f"prediction must have shape ({TARGET_DIM},), got {pred.shape}")
    err = _transform_prediction(pred) - target.vector()
    return float(np.mean(err**2))


def stage1_loss_and_grad(pred: np.ndarray, target: Stage1Targets) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    transformed = _transform_prediction(pred)
    err = transformed - target.vector()
    grad = 2.0 * err / TARGET_DIM
    s = transformed[RESERVE_INDEX]
    grad[RESERVE_INDEX] *= s * (1.0 - s)
    return float(np.mean(err**2)), grad


@dataclass
class Stage1Result:
    encoder: Encoder
    head_spec: NetworkSpec
    head_state: NetworkState
    history: list[tuple[int, int, float]]
    metadata: dict

    def predict(self, record: AuctionRecord) -> np.ndarray:
        emb = self.encoder.encode(record.features)
        out, _ = forward(self.head_spec, self.head_state, emb)
        return _transform_prediction(out)

    def embeddings(self, records) -> dict[str, np.ndarray]:
        return {r.listing_id: self.encoder.encode(r.features) for r in records}


def resolve_schedule(opt: OptimizerConfig, n_samples: int, batch_size: int,
                     epochs: int) -> tuple[OptimizerConfig, int, bool]:
    """Fill in total_steps from the data size; clamp warmup to fit.

    Returns (resolved config, steps per epoch, whether warmup was clamped).
    """
    steps_per_epoch = max(1, math.ceil(n_samples / batch_size))
    total = epochs * steps_per_epoch
    warmup = opt.warmup_steps
    clamped = warmup >= total
    if clamped:
        warmup = max(1, total // 5) if total > 1 else 0
    resolved = replace(opt, warmup_steps=warmup, total_steps=total)
    return resolved, steps_per_epoch, clamped


def train_stage1(
    records: list[AuctionRecord],
    opt_config: OptimizerConfig = OptimizerConfig(),
    *,
    schema: FeatureSchema | None = None,
    q: int = 64,
    hidden: int = 128,
    batch_size: int = 64,
    epochs: int = 5,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
) -> Stage1Result:
    """Joint shuffled mini-batch training of encoder and head.

    Deterministic given the seed. The head's final bias starts at the
    training-target means so the optimizer spends its budget on structure
    rather than on covering the offset of log-dollar targets.
    """
    usable, targets = [], []
    for r in records:
        try:
            targets.append(build_stage1_targets(r))
            usable.append(r)
        except RecordExcluded:
            continue
    if not usable:
        raise DataError("no records satisfy the inclusion criteria")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    schema = schema or FeatureSchema()
    encoder = Encoder.initialize(schema=schema, q=q, hidden=hidden, rng=rng)
    head_spec = NetworkSpec((q, TARGET_DIM), ("identity",), (False,))
    head_state = init_state(head_spec, rng)
    target_matrix = np.stack([t.vector() for t in targets])
    head_state.biases[-1][...] = target_matrix.mean(axis=0)
    # the reserve output passes through a sigmoid; start its bias neutral
    head_state.biases[-1][RESERVE_INDEX] = 0.0

    opt, steps_per_epoch, warmup_clamped = resolve_schedule(
        opt_config, len(usable), batch_size, epochs
    )
    enc_opt = AdamState.for_state(encoder.state)
    head_opt = AdamState.for_state(head_state)

    history: list[tuple[int, int, float]] = []
    feature_vectors = [schema.vector(r.features) for r in usable]
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(usable))
        for start in range(0, len(usable), batch_size):
            batch = order[start : start + batch_size]
            step += 1
            enc_grads = _zeros_like(encoder.state)
            head_grads = _zeros_like(head_state)
            batch_loss = 0.0
            for i in batch:
                noisy = perturb_targets(targets[i], noise_sigma, rng)
                emb, enc_cache = forward(encoder.spec, encoder.state, feature_vectors[i])
                pred, head_cache = forward(head_spec, head_state, emb)
                loss, dpred = stage1_loss_and_grad(pred, noisy)
                batch_loss += loss
                hg, demb = backward(head_spec, head_state, head_cache, dpred)
                eg, _ = backward(encoder.spec, encoder.state, enc_cache, demb)
                _accumulate(head_grads, hg)
                _accumulate(enc_grads, eg)
            scale = 1.0 / batch.shape[0]
            _scale(head_grads, scale)
            _scale(enc_grads, scale)
            batch_loss *= scale
            if not np.isfinite(batch_loss):
                raise NumericalError(
                    f"stage-1 loss diverged at epoch {epoch} step {step}"
                )
            adamw_step(encoder.state, enc_grads, enc_opt, opt, step)
            adamw_step(head_state, head_grads, head_opt, opt, step)
            history.append((epoch, step, batch_loss))

    metadata = {
        "seed": seed,
        "epochs": epochs,
        "batch_size": batch_size,
        "noise_sigma": noise_sigma,
        "n_train": len(usable),
        "warmup_steps": opt.warmup_steps,
        "warmup_clamped": warmup_clamped,
        "total_steps": opt.total_steps,
        "max_lr": opt.max_lr,
        "engagement_transform": "log1p",
        "head_bias_init": "target_means",
    }
    return Stage1Result(encoder, head_spec, head_state, history, metadata)


def dataset_loss(result: Stage1Result, records: list[AuctionRecord]) -> float:
    """Clean (noise-free) mean loss over the included records of a dataset."""
    losses = []
    for r in records:
        try:
            t = build_stage1_targets(r)
        except RecordExcluded:
            continue
        emb = result.encoder.encode(r.features)
        pred, _ = forward(result.head_spec, result.head_state, emb)
        losses.append(stage1_loss(pred, t))
    if not losses:
        raise DataError("no included records to evaluate")
    return float(np.mean(losses))


def per_target_r2(result: Stage1Result, records: list[AuctionRecord]) -> dict[str, float]:
    """R-squared of each head output against its clean target."""
    rows, preds = [], []
    for r in records:
        try:
            t = build_stage1_targets(r)
        except RecordExcluded:
            continue
        rows.append(t.vector())
        preds.append(result.predict(r))
    if not rows:
        raise DataError("no included records to evaluate")
    y = np.stack(rows)
    yhat = np.stack(preds)
    out = {}
    for k, name in enumerate(TARGET_NAMES):
        sse = float(np.sum((y[:, k] - yhat[:, k]) ** 2))
        sst = float(np.sum((y[:, k] - y[:, k].mean()) ** 2))
        out[name] = 1.0 - sse / sst if sst > 0 else float("nan")
    return out


def _zeros_like(state: NetworkState) -> NetworkState:
    return NetworkState(
        [np.zeros_like(w) for w in state.weights],
        [np.zeros_like(b) for b in state.biases],
        [np.zeros_like(g) if g is not None else None for g in state.ln_gains],
        [np.zeros_like(o) if o is not None else None for o in state.ln_offsets],
    )


def _accumulate(into: NetworkState, grads: NetworkState) -> None:
    for a, b in zip(into.arrays(), grads.arrays()):
        a += b


def _scale(state: NetworkState, factor: float) -> None:
    for a in state.arrays():
        a *= factor
