"""Structural decoding stage: train the decoder that maps embeddings to
demand-primitive parameters against observed bids.

The decoder is a small trunk (LayerNorm + SiLU twice) with two output heads:
one for the valuation family (location raw, scale through softplus plus a
floor, shape weights through a bounded tanh) and one for the market-size
likelihoods. Its loss compares observed log bids at ranks 2..j with the
expected order statistics implied by the decoded parameters; gradients reach
the decoder by composing the pricing Jacobian with network backprop.

Two training modes share the loop: the frozen-embedding mode consumes a fixed
id -> embedding table and never touches the encoder, and the direct mode
trains a fresh encoder jointly through the same structural loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import MarketSizeParams, ValuationParams
from .encoder import Encoder, FeatureSchema
from .errors import ConfigError, DataError, DimensionError, NumericalError, RecordExcluded
from .nn import (
    AdamState,
    NetworkSpec,
    NetworkState,
    OptimizerConfig,
    adamw_step,
    backward,
    forward,
    init_state,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)
from .pricing import BidPrediction, QuadratureConfig, expected_order_stats_unconditional, predict_and_gradient
from .simulator import AuctionRecord
from .stage1 import DEFAULT_NOISE_SIGMA, _accumulate, _scale, _zeros_like, resolve_schedule

SIGMA_FLOOR = 1e-3
ALPHA_BOUND = 2.0


@dataclass(frozen=True)
class DecoderOutput:
    valuation: ValuationParams
    market_size: MarketSizeParams


@dataclass(frozen=True)
class DecoderConfig:
    """Dimensions of the decoder and of the parameter space it targets."""

    q: int = 64
    kappa: int = 4
    n_min: int = 1
    n_max: int = 40
    hidden: tuple[int, int] = (32, 16)
    j_max: int = 5

    def __post_init__(self):
        if self.kappa < 0 or self.kappa > 8:
            raise ConfigError(f"kappa must lie in 0..8, got {self.kappa}")
        if not (1 <= self.n_min <= self.n_max):
            raise ConfigError("need 1 <= n_min <= n_max")
        if self.j_max < 2 or self.j_max > self.n_max:
            raise ConfigError("need 2 <= j_max <= n_max")

    @property
    def grid_size(self) -> int:
        return self.n_max - self.n_min + 1


@dataclass
class Decoder:
    config: DecoderConfig
    trunk_spec: NetworkSpec
    trunk_state: NetworkState
    head_v_spec: NetworkSpec
    head_v_state: NetworkState
    head_n_spec: NetworkSpec
    head_n_state: NetworkState

    @classmethod
    def initialize(cls, config: DecoderConfig, rng: np.random.Generator) -> "Decoder":
        h1, h2 = config.hidden
        trunk_spec = NetworkSpec(
            (config.q, h1, h2), ("silu", "silu"), (True, True)
        )
        head_v_spec = NetworkSpec((h2, 2 + config.kappa), ("identity",), (False,))
        head_n_spec = NetworkSpec((h2, config.grid_size), ("identity",), (False,))
        return cls(
            config,
            trunk_spec, init_state(trunk_spec, rng),
            head_v_spec, init_state(head_v_spec, rng),
            head_n_spec, init_state(head_n_spec, rng),
        )

    def copy(self) -> "Decoder":
        return Decoder(
            self.config,
            self.trunk_spec, self.trunk_state.copy(),
            self.head_v_spec, self.head_v_state.copy(),
            self.head_n_spec, self.head_n_state.copy(),
        )

    def states(self) -> list[NetworkState]:
        return [self.trunk_state, self.head_v_state, self.head_n_state]

    def save(self, path, meta: dict | None = None) -> None:
        payload = dict(meta or {})
        payload.update(
            {
                "kappa": self.config.kappa,
                "n_min": self.config.n_min,
                "n_max": self.config.n_max,
                "j_max": self.config.j_max,
            }
        )
        save_checkpoint(
            path,
            {
                "trunk": (self.trunk_spec, self.trunk_state),
                "head_v": (self.head_v_spec, self.head_v_state),
                "head_n": (self.head_n_spec, self.head_n_state),
            },
            meta=payload,
        )

    @classmethod
    def load(cls, path) -> tuple["Decoder", dict]:
        networks, meta = load_checkpoint(path)
        try:
            trunk_spec, trunk_state = networks["trunk"]
            head_v_spec, head_v_state = networks["head_v"]
            head_n_spec, head_n_state = networks["head_n"]
        except KeyError as exc:
            raise DataError(f"{path}: not a decoder checkpoint (missing {exc})") from exc
        config = DecoderConfig(
            q=trunk_spec.layer_dims[0],
            kappa=int(meta["kappa"]),
            n_min=int(meta["n_min"]),
            n_max=int(meta["n_max"]),
            hidden=tuple(trunk_spec.layer_dims[1:]),
            j_max=int(meta["j_max"]),
        )
        return (
            cls(config, trunk_spec, trunk_state, head_v_spec, head_v_state,
                head_n_spec, head_n_state),
            meta,
        )


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def decode_params(decoder: Decoder, e: np.ndarray) -> DecoderOutput:
    """Map one embedding to valuation and market-size parameters.

    Positivity of the scale comes from softplus plus a fixed floor; shape
    weights are squashed into [-ALPHA_BOUND, ALPHA_BOUND] to keep the
    expansion's normalizing constant well-conditioned.
    """
    out, _, _, _ = _decode_with_caches(decoder, e)
    return out


def _decode_with_caches(decoder: Decoder, e: np.ndarray):
    e = np.asarray(e, dtype=float)
    if e.shape != (decoder.config.q,):
        raise DimensionError(
            f"embedding has shape {e.shape}, expected ({decoder.config.q},)"
        )
    trunk_out, trunk_cache = forward(decoder.trunk_spec, decoder.trunk_state, e)
    raw_v, cache_v = forward(decoder.head_v_spec, decoder.head_v_state, trunk_out)
    raw_n, cache_n = forward(decoder.head_n_spec, decoder.head_n_state, trunk_out)
    kappa = decoder.config.kappa
    valuation = ValuationParams(
        mu=float(raw_v[0]),
        sigma=_softplus(raw_v[1]) + SIGMA_FLOOR,
        alphas=ALPHA_BOUND * np.tanh(raw_v[2 : 2 + kappa]),
    )
    market = MarketSizeParams(logits=raw_n, n_min=decoder.config.n_min)
    output = DecoderOutput(valuation=valuation, market_size=market)
    caches = (trunk_cache, cache_v, cache_n)
    raws = (raw_v, raw_n)
    return output, caches, raws, trunk_out


def _link_gradient(raw_v: np.ndarray, kappa: int, d_theta_v: np.ndarray) -> np.ndarray:
    """Pull the loss gradient on (mu, sigma, alphas) back through the links."""
    out = d_theta_v.copy()
    out[1] *= sigmoid(raw_v[1])
    t = np.tanh(raw_v[2 : 2 + kappa])
    out[2:] *= ALPHA_BOUND * (1.0 - t * t)
    return out


def stage2_loss(pred: BidPrediction, observed_log_bids: np.ndarray) -> float:
    """MSE between observed log bids at ranks 2..j and predicted expectations.

    The top rank never participates: the winning bid reveals only the
    runner-up's valuation plus an increment.
    """
    observed = np.asarray(observed_log_bids, dtype=float)
    if observed.shape != pred.expected_log_bids.shape:
        raise DimensionError(
            f"observed bids {observed.shape} vs predicted ranks {pred.expected_log_bids.shape}"
        )
    return float(np.mean((observed - pred.expected_log_bids) ** 2))


def _stage2_loss_and_grad(pred: BidPrediction, observed: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred.expected_log_bids - observed
    return float(np.mean(diff**2)), 2.0 * diff / diff.shape[0]


def sample_loss_gradients(
    decoder: Decoder,
    e: np.ndarray,
    observed: np.ndarray,
    quad_config: QuadratureConfig = QuadratureConfig(),
    censoring: str = "lowest",
) -> tuple[float, list[NetworkState], np.ndarray]:
    """Loss, decoder gradients (trunk, head_v, head_n), and embedding gradient
    for one listing: pricing Jacobian composed with network backprop."""
    out, caches, raws, _ = _decode_with_caches(decoder, e)
    pred, jac = predict_and_gradient(
        out.valuation, out.market_size, decoder.config.j_max, quad_config, censoring
    )
    loss, dpred = _stage2_loss_and_grad(pred, np.asarray(observed, dtype=float))
    grads, d_embedding = _pull_back(decoder, caches, raws, jac.T @ dpred)
    return loss, grads, d_embedding


def bid_rank_value_and_gradient(
    decoder: Decoder,
    e: np.ndarray,
    rank: int = 2,
    quad_config: QuadratureConfig = QuadratureConfig(),
    censoring: str = "lowest",
) -> tuple[float, np.ndarray]:
    """One rank's expected log bid and its gradient w.r.t. the embedding."""
    if rank < 2 or rank > decoder.config.j_max:
        raise ConfigError(f"rank must lie in 2..{decoder.config.j_max}, got {rank}")
    out, caches, raws, _ = _decode_with_caches(decoder, e)
    pred, jac = predict_and_gradient(
        out.valuation, out.market_size, decoder.config.j_max, quad_config, censoring
    )
    dpred = np.zeros(decoder.config.j_max - 1)
    dpred[rank - 2] = 1.0
    _, d_embedding = _pull_back(decoder, caches, raws, jac.T @ dpred)
    return float(pred.expected_log_bids[rank - 2]), d_embedding


def embedding_bid_function(decoder: Decoder, rank: int = 2,
                           quad_config: QuadratureConfig = QuadratureConfig(),
                           censoring: str = "lowest"):
    """Scalar function of the embedding: one rank's expected log bid.

    Exposes value and gradient callables suitable for path-integral
    attribution.
    """
    from .attribution import FunctionWithGradient

    def value(e):
        out = decode_params(decoder, e)
        pred = expected_order_stats_unconditional(
            out.valuation, out.market_size, decoder.config.j_max, quad_config, censoring
        )
        return float(pred.expected_log_bids[rank - 2])

    def gradient(e):
        return bid_rank_value_and_gradient(decoder, e, rank, quad_config, censoring)[1]

    return FunctionWithGradient(value, gradient)


def feature_bid_function(encoder: Encoder, decoder: Decoder, rank: int = 2,
                         quad_config: QuadratureConfig = QuadratureConfig(),
                         censoring: str = "lowest"):
    """Scalar function of the normalized feature vector: encoder composed with
    the decoder and pricing; gradient flows back through the encoder."""
    from .attribution import FunctionWithGradient

    def value(x):
        e, _ = forward(encoder.spec, encoder.state, x)
        out = decode_params(decoder, e)
        pred = expected_order_stats_unconditional(
            out.valuation, out.market_size, decoder.config.j_max, quad_config, censoring
        )
        return float(pred.expected_log_bids[rank - 2])

    def gradient(x):
        e, cache = forward(encoder.spec, encoder.state, x)
        _, d_embedding = bid_rank_value_and_gradient(decoder, e, rank, quad_config, censoring)
        _, d_input = backward(encoder.spec, encoder.state, cache, d_embedding)
        return d_input

    return FunctionWithGradient(value, gradient)


def _pull_back(decoder: Decoder, caches, raws, dtheta: np.ndarray):
    """Propagate a gradient on (mu, sigma, alphas, logits) into the decoder."""
    kappa = decoder.config.kappa
    d_raw_v = _link_gradient(raws[0], kappa, dtheta[: 2 + kappa])
    d_raw_n = dtheta[2 + kappa :]
    trunk_cache, cache_v, cache_n = caches
    gv, d_trunk_v = backward(decoder.head_v_spec, decoder.head_v_state, cache_v, d_raw_v)
    gn, d_trunk_n = backward(decoder.head_n_spec, decoder.head_n_state, cache_n, d_raw_n)
    gt, d_embedding = backward(
        decoder.trunk_spec, decoder.trunk_state, trunk_cache, d_trunk_v + d_trunk_n
    )
    return [gt, gv, gn], d_embedding


class TrainingDiverged(NumericalError):
    """Raised when the loss goes non-finite; carries the last good decoder."""

    def __init__(self, message: str, last_good: "Decoder", history):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class Stage2Result:
    decoder: Decoder
    history: list[tuple[int, int, float]]
    metadata: dict
    encoder: Encoder | None = None  # populated by direct training

    def predict_embedding(self, e: np.ndarray,
                          quad: QuadratureConfig = QuadratureConfig(),
                          censoring: str = "lowest") -> tuple[DecoderOutput, BidPrediction]:
        return predict_from_embedding(self.decoder, e, quad, censoring)


def predict_from_embedding(decoder: Decoder, e: np.ndarray,
                           quad: QuadratureConfig = QuadratureConfig(),
                           censoring: str = "lowest") -> tuple[DecoderOutput, BidPrediction]:
    out = decode_params(decoder, e)
    pred = expected_order_stats_unconditional(
        out.valuation, out.market_size, decoder.config.j_max, quad, censoring
    )
    return out, pred


def predict_listing(source, decoder: Decoder, record: AuctionRecord,
                    quad: QuadratureConfig = QuadratureConfig(),
                    censoring: str = "lowest") -> tuple[DecoderOutput, BidPrediction]:
    """Predict one listing from either an Encoder or an id -> embedding map."""
    if isinstance(source, Encoder):
        e = source.encode(record.features)
    else:
        try:
            e = source[record.listing_id]
        except KeyError:
            raise DataError(f"no embedding for listing {record.listing_id}") from None
    return predict_from_embedding(decoder, e, quad, censoring)


def observed_log_bids(record: AuctionRecord, j_max: int) -> np.ndarray:
    """Log bids at ranks 2..j_max; raises RecordExcluded when absent."""
    if record.excluded or record.n_bidders < j_max:
        raise RecordExcluded(f"{record.listing_id}: needs >= {j_max} bids")
    return np.log(record.final_bids[1:j_max])


def _collect_training_rows(records, j_max):
    rows = []
    for r in records:
        try:
            rows.append((r, observed_log_bids(r, j_max)))
        except RecordExcluded:
            continue
    if not rows:
        raise DataError("no records satisfy the inclusion criteria")
    return rows


def train_stage2(
    embeddings: dict[str, np.ndarray],
    records: list[AuctionRecord],
    opt_config: OptimizerConfig = OptimizerConfig(),
    *,
    decoder_config: DecoderConfig | None = None,
    quad_config: QuadratureConfig = QuadratureConfig(),
    censoring: str = "lowest",
    batch_size: int = 32,
    epochs: int = 5,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
) -> Stage2Result:
    """Train the decoder over frozen embeddings.

    Every included record must have an embedding. The embedding table is
    treated as constant data: nothing propagates back into it.
    """
    rows = _collect_training_rows(records, (decoder_config or DecoderConfig()).j_max)
    missing = [r.listing_id for r, _ in rows if r.listing_id not in embeddings]
    if missing:
        raise DataError(f"missing embeddings for {len(missing)} listings, e.g. {missing[:3]}")
    q = np.asarray(embeddings[rows[0][0].listing_id]).shape[0]
    config = decoder_config or DecoderConfig(q=q)
    if config.q != q:
        raise DimensionError(f"decoder expects q={config.q}, embeddings have q={q}")
    table = {r.listing_id: np.asarray(embeddings[r.listing_id], dtype=float) for r, _ in rows}
    return _train_structural(
        rows=rows,
        embed=lambda record: (table[record.listing_id], None),
        encoder=None,
        opt_config=opt_config,
        config=config,
        quad_config=quad_config,
        censoring=censoring,
        batch_size=batch_size,
        epochs=epochs,
        noise_sigma=noise_sigma,
        seed=seed,
        mode="stage2",
    )


def train_direct(
    records: list[AuctionRecord],
    opt_config: OptimizerConfig = OptimizerConfig(),
    *,
    schema: FeatureSchema | None = None,
    encoder_q: int = 64,
    encoder_hidden: int = 128,
    decoder_config: DecoderConfig | None = None,
    quad_config: QuadratureConfig = QuadratureConfig(),
    censoring: str = "lowest",
    batch_size: int = 32,
    epochs: int = 5,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
) -> Stage2Result:
    """Joint training of a fresh encoder and the decoder from the structural
    loss alone, with no outcome-encoding stage in between."""
    config = decoder_config or DecoderConfig(q=encoder_q)
    if config.q != encoder_q:
        raise DimensionError("decoder q must match encoder output dim")
    rows = _collect_training_rows(records, config.j_max)
    schema = schema or FeatureSchema()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    encoder = Encoder.initialize(schema=schema, q=encoder_q, hidden=encoder_hidden, rng=rng)
    return _train_structural(
        rows=rows,
        embed=None,
        encoder=encoder,
        opt_config=opt_config,
        config=config,
        quad_config=quad_config,
        censoring=censoring,
        batch_size=batch_size,
        epochs=epochs,
        noise_sigma=noise_sigma,
        seed=seed,
        mode="direct",
    )


def _train_structural(rows, embed, encoder, opt_config, config, quad_config,
                      censoring, batch_size, epochs, noise_sigma, seed, mode):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    decoder = Decoder.initialize(config, rng)
    # start the location output at the mean observed price-setting bid and
    # the scale output near the low end of its range; AdamW-style steps move
    # biases by about the learning rate per step, far too slow to cover a
    # 10-log-dollar offset inside a desk-scale budget
    mean_log_b2 = float(np.mean([obs[0] for _, obs in rows]))
    decoder.head_v_state.biases[-1][0] = mean_log_b2
    decoder.head_v_state.biases[-1][1] = -1.0

    opt, _, warmup_clamped = resolve_schedule(opt_config, len(rows), batch_size, epochs)
    opt_states = [AdamState.for_state(s) for s in decoder.states()]
    enc_opt = AdamState.for_state(encoder.state) if encoder is not None else None

    feature_vectors = None
    if encoder is not None:
        feature_vectors = [encoder.schema.vector(r.features) for r, _ in rows]

    history: list[tuple[int, int, float]] = []
    last_good = decoder.copy()
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(rows))
        for start in range(0, len(rows), batch_size):
            batch = order[start : start + batch_size]
            step += 1
            grads = [_zeros_like(s) for s in decoder.states()]
            enc_grads = _zeros_like(encoder.state) if encoder is not None else None
            batch_loss = 0.0
            for i in batch:
                record, clean_obs = rows[i]
                observed = clean_obs + rng.normal(scale=noise_sigma, size=clean_obs.shape)
                if encoder is not None:
                    e, enc_cache = forward(encoder.spec, encoder.state, feature_vectors[i])
                else:
                    e, _ = embed(record)
                    enc_cache = None
                loss, sample_grads, d_embedding = sample_loss_gradients(
                    decoder, e, observed, quad_config, censoring
                )
                batch_loss += loss
                for acc, g in zip(grads, sample_grads):
                    _accumulate(acc, g)
                if encoder is not None:
                    ge, _ = backward(encoder.spec, encoder.state, enc_cache, d_embedding)
                    _accumulate(enc_grads, ge)
            scale = 1.0 / batch.shape[0]
            batch_loss *= scale
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"{mode} loss diverged at epoch {epoch} step {step}",
                    last_good, history,
                )
            for g in grads:
                _scale(g, scale)
            for state, g, opt_state in zip(decoder.states(), grads, opt_states):
                adamw_step(state, g, opt_state, opt, step)
            if encoder is not None:
                _scale(enc_grads, scale)
                adamw_step(encoder.state, enc_grads, enc_opt, opt, step)
            history.append((epoch, step, batch_loss))
            last_good = decoder.copy()

    metadata = {
        "mode": mode,
        "seed": seed,
        "epochs": epochs,
        "batch_size": batch_size,
        "noise_sigma": noise_sigma,
        "n_train": len(rows),
        "warmup_steps": opt.warmup_steps,
        "warmup_clamped": warmup_clamped,
        "total_steps": opt.total_steps,
        "max_lr": opt.max_lr,
        "kappa": config.kappa,
        "n_min": config.n_min,
        "n_max": config.n_max,
        "j_max": config.j_max,
        "quad_points": quad_config.points,
        "quad_scheme": quad_config.scheme,
        "censoring": censoring,
        "mu_bias_init": mean_log_b2,
    }
    return Stage2Result(decoder=decoder, history=history, metadata=metadata,
                        encoder=encoder)
