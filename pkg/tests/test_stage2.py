import numpy as np
import pytest

from auctiondemand.density import MarketSizeParams, ValuationParams, market_size_pmf
from auctiondemand.encoder import Encoder, ListingFeatures
from auctiondemand.errors import ConfigError, DataError, DimensionError
from auctiondemand.nn import OptimizerConfig, zeros_like_state
from auctiondemand.pricing import (
    QuadratureConfig,
    expected_order_stats_unconditional,
    parameter_vector,
)
from auctiondemand.simulator import (
    DEFAULT_MAP,
    AuctionRecord,
    ReservePolicy,
    simulate_auction,
)
from auctiondemand.stage2 import (
    Decoder,
    DecoderConfig,
    bid_rank_value_and_gradient,
    decode_params,
    observed_log_bids,
    predict_from_embedding,
    predict_listing,
    sample_loss_gradients,
    stage2_loss,
    train_direct,
    train_stage2,
)

FAST_OPT = OptimizerConfig(max_lr=1e-2, warmup_steps=20, total_steps=10_000)
FAST_QUAD = QuadratureConfig(points=128)

FEATURES = ListingFeatures(60_000, 300, 10, "borealis", "coupe", False)


def make_decoder(q=8, kappa=2, n_min=1, n_max=12, hidden=(8, 6), j_max=4, seed=0):
    cfg = DecoderConfig(q=q, kappa=kappa, n_min=n_min, n_max=n_max, hidden=hidden, j_max=j_max)
    return Decoder.initialize(cfg, np.random.default_rng(seed))


def softplus_inv(y):
    return float(np.log(np.expm1(y)))


def simulate_identical_listings(count, seed):
    vp, mp = DEFAULT_MAP.primitives(FEATURES)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        rec = simulate_auction(
            f"L{i:05d}", FEATURES, (vp, mp), ReservePolicy(), 250.0, rng
        )
        if not rec.excluded:
            records.append(rec)
    return (vp, mp), records


class TestDecodeParams:
    def test_zero_weight_decoder(self):
        dec = make_decoder()
        for state in dec.states():
            for arr in state.arrays():
                arr[...] = 0.0
        out = decode_params(dec, np.zeros(8))
        assert out.valuation.mu == 0.0
        assert out.valuation.sigma == pytest.approx(np.log(2.0) + 1e-3, abs=1e-9)
        np.testing.assert_array_equal(out.valuation.alphas, np.zeros(2))
        np.testing.assert_allclose(market_size_pmf(out.market_size), 1.0 / 12, atol=1e-12)

    def test_sigma_always_positive(self):
        rng = np.random.default_rng(1)
        for seed in range(20):
            dec = make_decoder(seed=seed)
            out = decode_params(dec, rng.normal(size=8) * 10)
            assert out.valuation.sigma > 0

    def test_deterministic(self):
        dec = make_decoder(seed=3)
        e = np.random.default_rng(0).normal(size=8)
        a = decode_params(dec, e)
        b = decode_params(dec, e)
        assert a.valuation.mu == b.valuation.mu
        np.testing.assert_array_equal(a.market_size.logits, b.market_size.logits)

    def test_dimension_mismatch(self):
        dec = make_decoder()
        with pytest.raises(DimensionError):
            decode_params(dec, np.zeros(5))


class TestStage2Loss:
    def prediction(self, values):
        from auctiondemand.pricing import BidPrediction

        values = np.asarray(values, dtype=float)
        return BidPrediction(
            ranks=tuple(range(2, 2 + values.shape[0])),
            expected_log_bids=values,
            rank1_advisory=float(values[0] + 0.1),
        )

    def test_perfect(self):
        pred = self.prediction([10.0, 9.8, 9.7, 9.6])
        assert stage2_loss(pred, np.array([10.0, 9.8, 9.7, 9.6])) == 0.0

    def test_single_rank_off(self):
        pred = self.prediction([10.0, 9.8, 9.7, 9.6])
        obs = np.array([10.0, 9.8, 9.7, 9.1])
        assert stage2_loss(pred, obs) == pytest.approx(0.25 / 4, abs=1e-12)

    def test_two_listing_batch_hand_mean(self):
        p1 = self.prediction([10.0, 9.8])
        p2 = self.prediction([8.0, 7.9])
        o1 = np.array([10.1, 9.7])
        o2 = np.array([8.2, 7.9])
        hand = 0.5 * ((0.01 + 0.01) / 2 + (0.04 + 0.0) / 2)
        got = 0.5 * (stage2_loss(p1, o1) + stage2_loss(p2, o2))
        assert got == pytest.approx(hand, abs=1e-12)

    def test_shape_mismatch(self):
        pred = self.prediction([10.0, 9.8])
        with pytest.raises(DimensionError):
            stage2_loss(pred, np.array([10.0, 9.8, 9.7]))


class TestEndToEndGradient:
    def test_matches_finite_differences_tiny_config(self):
        dec = make_decoder(q=4, kappa=1, n_min=1, n_max=3, hidden=(5, 4), j_max=3, seed=11)
        rng = np.random.default_rng(7)
        e = rng.normal(size=4)
        observed = np.array([0.4, 0.1])
        quad = QuadratureConfig(points=64)

        _, grads, _ = sample_loss_gradients(dec, e, observed, quad)
        got = np.concatenate([a.ravel() for g in grads for a in g.arrays()])

        arrays = [a for s in dec.states() for a in s.arrays()]
        flat0 = np.concatenate([a.ravel() for a in arrays])

        def loss_at(flat):
            pos = 0
            for a in arrays:
                a[...] = flat[pos : pos + a.size].reshape(a.shape)
                pos += a.size
            return sample_loss_gradients(dec, e, observed, quad)[0]

        h = 1e-4
        want = np.empty_like(flat0)
        for k in range(flat0.size):
            up, down = flat0.copy(), flat0.copy()
            up[k] += h
            down[k] -= h
            want[k] = (loss_at(up) - loss_at(down)) / (2 * h)
        loss_at(flat0)
        denom = max(1e-8, float(np.max(np.abs(want))))
        assert np.max(np.abs(got - want)) / denom < 2e-2

    def test_embedding_gradient_matches_finite_differences(self):
        dec = make_decoder(q=4, kappa=1, n_min=1, n_max=3, hidden=(5, 4), j_max=3, seed=2)
        rng = np.random.default_rng(3)
        e = rng.normal(size=4)
        quad = QuadratureConfig(points=64)
        value, grad = bid_rank_value_and_gradient(dec, e, rank=2, quad_config=quad)
        h = 1e-5
        for k in range(4):
            up, down = e.copy(), e.copy()
            up[k] += h
            down[k] -= h
            vu = bid_rank_value_and_gradient(dec, up, 2, quad)[0]
            vd = bid_rank_value_and_gradient(dec, down, 2, quad)[0]
            assert grad[k] == pytest.approx((vu - vd) / (2 * h), rel=2e-3, abs=1e-6)


class TestTrainStage2:
    def test_recovers_expected_bids_for_identical_listings(self):
        (vp, mp), records = simulate_identical_listings(120, seed=5)
        emb = np.full(8, 0.5)
        table = {r.listing_id: emb for r in records}
        cfg = DecoderConfig(q=8, kappa=2, n_min=1, n_max=40, hidden=(8, 6), j_max=5)
        result = train_stage2(
            table, records, FAST_OPT, decoder_config=cfg, quad_config=FAST_QUAD,
            epochs=16, noise_sigma=0.01, seed=1,
        )
        _, pred = predict_from_embedding(result.decoder, emb)
        truth_pred = expected_order_stats_unconditional(vp, mp, 5, QuadratureConfig(points=2048))
        np.testing.assert_allclose(
            pred.expected_log_bids, truth_pred.expected_log_bids, atol=0.05
        )

    def test_embeddings_frozen(self):
        _, records = simulate_identical_listings(40, seed=9)
        rng = np.random.default_rng(0)
        table = {r.listing_id: rng.normal(size=8) for r in records}
        copies = {k: v.copy() for k, v in table.items()}
        cfg = DecoderConfig(q=8, kappa=1, n_min=1, n_max=40, hidden=(6, 4), j_max=5)
        train_stage2(table, records, FAST_OPT, decoder_config=cfg,
                     quad_config=FAST_QUAD, epochs=2, seed=0)
        for k in table:
            np.testing.assert_array_equal(table[k], copies[k])

    def test_same_seed_reproducible(self):
        _, records = simulate_identical_listings(40, seed=9)
        emb = np.linspace(-1, 1, 8)
        table = {r.listing_id: emb for r in records}
        cfg = DecoderConfig(q=8, kappa=1, n_min=1, n_max=40, hidden=(6, 4), j_max=5)
        kwargs = dict(decoder_config=cfg, quad_config=FAST_QUAD, epochs=2, seed=44)
        a = train_stage2(table, records, FAST_OPT, **kwargs)
        b = train_stage2(table, records, FAST_OPT, **kwargs)
        assert a.history[-1][2] == b.history[-1][2]

    def test_missing_embedding_rejected(self):
        _, records = simulate_identical_listings(40, seed=9)
        table = {r.listing_id: np.zeros(8) for r in records[:-1]}
        cfg = DecoderConfig(q=8, kappa=1, n_min=1, n_max=40, hidden=(6, 4), j_max=5)
        with pytest.raises(DataError):
            train_stage2(table, records, FAST_OPT, decoder_config=cfg)


class TestTrainDirect:
    def test_runs_and_matches_step_axis(self):
        _, records = simulate_identical_listings(60, seed=12)
        cfg = DecoderConfig(q=8, kappa=1, n_min=1, n_max=40, hidden=(6, 4), j_max=5)
        direct = train_direct(
            records, FAST_OPT, encoder_q=8, encoder_hidden=16,
            decoder_config=cfg, quad_config=FAST_QUAD, epochs=2, seed=3,
        )
        table = {r.listing_id: np.zeros(8) for r in records}
        frozen = train_stage2(
            table, records, FAST_OPT, decoder_config=cfg,
            quad_config=FAST_QUAD, epochs=2, seed=3,
        )
        assert [row[1] for row in direct.history] == [row[1] for row in frozen.history]
        assert all(np.isfinite(row[2]) for row in direct.history)
        assert direct.encoder is not None
        assert direct.metadata["mode"] == "direct"

    def test_encoder_weights_move(self):
        _, records = simulate_identical_listings(60, seed=12)
        cfg = DecoderConfig(q=8, kappa=1, n_min=1, n_max=40, hidden=(6, 4), j_max=5)
        direct = train_direct(
            records, FAST_OPT, encoder_q=8, encoder_hidden=16,
            decoder_config=cfg, quad_config=FAST_QUAD, epochs=1, seed=3,
        )
        fresh = Encoder.initialize(
            schema=direct.encoder.schema, q=8, hidden=16,
            rng=np.random.default_rng(np.random.SeedSequence([3, 404])),
        )
        moved = any(
            not np.array_equal(a, b)
            for a, b in zip(direct.encoder.state.arrays(), fresh.state.arrays())
        )
        assert moved

    def test_same_seed_determinism(self):
        _, records = simulate_identical_listings(40, seed=2)
        cfg = DecoderConfig(q=8, kappa=1, n_min=1, n_max=40, hidden=(6, 4), j_max=5)
        kwargs = dict(encoder_q=8, encoder_hidden=16, decoder_config=cfg,
                      quad_config=FAST_QUAD, epochs=1, seed=8)
        a = train_direct(records, FAST_OPT, **kwargs)
        b = train_direct(records, FAST_OPT, **kwargs)
        assert a.history == b.history


class TestPredictListing:
    def test_equals_manual_composition(self):
        dec = make_decoder(q=8, kappa=2, n_min=1, n_max=12, j_max=4, seed=1)
        rng = np.random.default_rng(4)
        e = rng.normal(size=8)
        _, records = simulate_identical_listings(5, seed=20)
        rec = records[0]
        table = {rec.listing_id: e}
        out, pred = predict_listing(table, dec, rec)
        out2 = decode_params(dec, e)
        pred2 = expected_order_stats_unconditional(out2.valuation, out2.market_size, 4)
        assert out.valuation.mu == out2.valuation.mu
        np.testing.assert_array_equal(pred.expected_log_bids, pred2.expected_log_bids)

    def test_missing_embedding(self):
        dec = make_decoder()
        _, records = simulate_identical_listings(5, seed=20)
        with pytest.raises(DataError):
            predict_listing({}, dec, records[0])

    def test_oracle_parameter_injection_matches_pricing(self):
        # rig the decoder to emit one fixed parameter set through its links
        vp = ValuationParams(mu=10.2, sigma=0.3, alphas=[0.2, -0.1])
        logits = -((np.arange(1, 13.0) - 6.0) ** 2) / 8.0
        dec = make_decoder(q=8, kappa=2, n_min=1, n_max=12, j_max=4, seed=0)
        for state in dec.states():
            for arr in state.arrays():
                arr[...] = 0.0
        dec.head_v_state.biases[-1][...] = [
            vp.mu, softplus_inv(vp.sigma - 1e-3),
            np.arctanh(vp.alphas[0] / 2.0), np.arctanh(vp.alphas[1] / 2.0),
        ]
        dec.head_n_state.biases[-1][...] = logits
        _, pred = predict_from_embedding(dec, np.zeros(8))
        mp = MarketSizeParams(logits=logits, n_min=1)
        want = expected_order_stats_unconditional(vp, mp, 4)
        np.testing.assert_allclose(pred.expected_log_bids, want.expected_log_bids, atol=3e-3)

    def test_observed_log_bids_guard(self):
        _, records = simulate_identical_listings(5, seed=20)
        rec = records[0]
        with pytest.raises(ConfigError if rec.n_bidders >= 5 else Exception):
            bid_rank_value_and_gradient(make_decoder(j_max=4), np.zeros(8), rank=9)
        bids = observed_log_bids(rec, 5)
        assert bids.shape == (4,)
        assert np.all(np.isfinite(bids))
