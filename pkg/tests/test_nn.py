import numpy as np
import pytest

from auctiondemand.errors import ConfigError, DimensionError, FormatError
from auctiondemand.nn import (
    AdamState,
    NetworkSpec,
    NetworkState,
    OptimizerConfig,
    adamw_step,
    backward,
    forward,
    init_state,
    layer_norm,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    silu,
    zeros_like_state,
)


def flatten_params(state):
    return np.concatenate([a.ravel() for a in state.arrays()])


def set_params(state, flat):
    pos = 0
    for a in state.arrays():
        a[...] = flat[pos : pos + a.size].reshape(a.shape)
        pos += a.size


def numeric_gradient(spec, state, x, output_grad, h=1e-5):
    """Central finite differences of sum(output * output_grad) w.r.t. params."""
    flat0 = flatten_params(state)
    out = np.empty_like(flat0)
    work = state.copy()
    for i in range(flat0.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            flat = flat0.copy()
            flat[i] += sign * h
            set_params(work, flat)
            y, _ = forward(spec, work, x)
            if slot == 0:
                up = float(y @ output_grad)
            else:
                down = float(y @ output_grad)
        out[i] = (up - down) / (2 * h)
    set_params(work, flat0)
    return out


class TestActivations:
    def test_silu_zero(self):
        assert silu(0.0) == 0.0

    def test_silu_saturates(self):
        assert silu(20.0) == pytest.approx(20.0, abs=1e-7)

    def test_silu_at_one(self):
        assert silu(1.0) == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-12)


class TestLayerNorm:
    def test_standardizes(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=32)
        out = layer_norm(x, np.ones(32), np.zeros(32))
        assert abs(out.mean()) < 1e-9
        assert out.var() == pytest.approx(1.0, abs=1e-4)

    def test_constant_input_is_zeroed(self):
        out = layer_norm(np.full(8, 3.7), np.ones(8), np.zeros(8))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_two_point_example(self):
        out = layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)


class TestForward:
    def test_zero_network(self):
        spec = NetworkSpec((3, 2), ("identity",), (False,))
        state = zeros_like_state(spec)
        y, _ = forward(spec, state, np.array([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal(y, np.zeros(2))

    def test_identity_weights(self):
        spec = NetworkSpec((4, 4), ("identity",), (False,))
        state = zeros_like_state(spec)
        state.weights[0][...] = np.eye(4)
        x = np.array([0.5, -1.0, 2.0, 0.0])
        y, _ = forward(spec, state, x)
        np.testing.assert_array_equal(y, x)

    def test_hand_computed_two_layer(self):
        spec = NetworkSpec((2, 3, 1), ("silu", "identity"), (False, False))
        state = zeros_like_state(spec)
        state.weights[0][...] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
        state.biases[0][...] = [0.1, -0.2, 0.0]
        state.weights[1][...] = [[1.0, 2.0, -1.0]]
        state.biases[1][...] = [0.5]
        x = np.array([0.3, 0.7])

        def ref_silu(t):
            return t / (1.0 + np.exp(-t))

        hidden = ref_silu(np.array([0.4, 0.5, 1.0]))
        expect = hidden @ np.array([1.0, 2.0, -1.0]) + 0.5
        y, _ = forward(spec, state, x)
        assert y[0] == pytest.approx(expect, abs=1e-12)

    def test_shape_mismatch(self):
        spec = NetworkSpec((3, 2), ("identity",), (False,))
        state = zeros_like_state(spec)
        with pytest.raises(DimensionError):
            forward(spec, state, np.zeros(4))


class TestBackward:
    SPECS = [
        NetworkSpec((3, 5, 2), ("silu", "identity"), (True, False)),
        NetworkSpec((4, 4, 4), ("sigmoid", "silu"), (False, True)),
        NetworkSpec((2, 8, 1), ("silu", "sigmoid"), (True, False)),
        NetworkSpec.mlp((5, 6, 3)),
    ]

    def test_matches_finite_differences(self):
        for spec in self.SPECS:
            for seed in range(10):
                rng = np.random.default_rng(seed)
                state = init_state(spec, rng)
                x = rng.normal(size=spec.layer_dims[0])
                g_out = rng.normal(size=spec.layer_dims[-1])
                _, cache = forward(spec, state, x)
                grads, _ = backward(spec, state, cache, g_out)
                got = flatten_params(grads)
                want = numeric_gradient(spec, state, x, g_out)
                denom = max(1e-8, float(np.max(np.abs(want))))
                assert np.max(np.abs(got - want)) / denom < 1e-3

    def test_input_gradient_matches_finite_differences(self):
        spec = NetworkSpec((4, 6, 2), ("silu", "identity"), (True, False))
        rng = np.random.default_rng(3)
        state = init_state(spec, rng)
        x = rng.normal(size=4)
        g_out = rng.normal(size=2)
        _, cache = forward(spec, state, x)
        _, gx = backward(spec, state, cache, g_out)
        h = 1e-6
        num = np.empty(4)
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            num[i] = ((forward(spec, state, xp)[0] - forward(spec, state, xm)[0]) @ g_out) / (2 * h)
        np.testing.assert_allclose(gx, num, rtol=1e-5, atol=1e-8)

    def test_zero_output_grad(self):
        spec = NetworkSpec((3, 3), ("silu",), (True,))
        state = init_state(spec, np.random.default_rng(0))
        _, cache = forward(spec, state, np.ones(3))
        grads, gx = backward(spec, state, cache, np.zeros(3))
        assert all(np.all(a == 0) for a in grads.arrays())
        np.testing.assert_array_equal(gx, np.zeros(3))

    def test_linear_layer_outer_product(self):
        spec = NetworkSpec((3, 2), ("identity",), (False,))
        state = init_state(spec, np.random.default_rng(1))
        x = np.array([1.0, 2.0, -1.0])
        g_out = np.array([0.5, -0.25])
        _, cache = forward(spec, state, x)
        grads, _ = backward(spec, state, cache, g_out)
        np.testing.assert_allclose(grads.weights[0], np.outer(g_out, x), atol=1e-14)

    def test_stale_cache_rejected(self):
        spec_a = NetworkSpec((3, 2), ("identity",), (False,))
        spec_b = NetworkSpec((3, 2), ("silu",), (False,))
        state = init_state(spec_a, np.random.default_rng(0))
        _, cache = forward(spec_a, state, np.ones(3))
        with pytest.raises(DimensionError):
            backward(spec_b, state, cache, np.ones(2))


class TestOptimizer:
    def scalar_setup(self):
        spec = NetworkSpec((1, 1), ("identity",), (False,))
        state = zeros_like_state(spec)
        grads = zeros_like_state(spec)
        return spec, state, grads

    def test_zero_gradient_no_decay(self):
        _, state, grads = self.scalar_setup()
        state.weights[0][...] = 1.5
        config = OptimizerConfig(max_lr=0.1, weight_decay=0.0, warmup_steps=1, total_steps=10)
        opt = AdamState.for_state(state)
        adamw_step(state, grads, opt, config, step=1)
        assert state.weights[0][0, 0] == 1.5

    def test_first_step_moves_by_lr(self):
        _, state, grads = self.scalar_setup()
        grads.weights[0][...] = 1.0
        config = OptimizerConfig(max_lr=0.1, weight_decay=0.0, warmup_steps=1, total_steps=10)
        opt = AdamState.for_state(state)
        adamw_step(state, grads, opt, config, step=1)
        assert state.weights[0][0, 0] == pytest.approx(-0.1, abs=1e-6)

    def test_decay_only_is_multiplicative(self):
        _, state, grads = self.scalar_setup()
        state.weights[0][...] = 2.0
        config = OptimizerConfig(max_lr=0.1, weight_decay=0.5, warmup_steps=1, total_steps=100)
        opt = AdamState.for_state(state)
        value = 2.0
        for step in range(1, 6):
            adamw_step(state, grads, opt, config, step)
            value *= 1.0 - lr_schedule(step, config) * 0.5
            assert state.weights[0][0, 0] == pytest.approx(value, rel=1e-12)

    def test_schedule_endpoints(self):
        config = OptimizerConfig(max_lr=3e-5, warmup_steps=300, total_steps=1000)
        assert lr_schedule(0, config) == 0.0
        assert lr_schedule(300, config) == 3e-5
        assert lr_schedule(1000, config) == 0.0
        assert lr_schedule(650, config) == pytest.approx(1.5e-5)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(warmup_steps=10, total_steps=10)
        with pytest.raises(ConfigError):
            OptimizerConfig(beta1=1.0)


class TestDeterminism:
    def test_same_seed_same_init(self):
        spec = NetworkSpec.mlp((6, 8, 2))
        a = init_state(spec, np.random.default_rng(123))
        b = init_state(spec, np.random.default_rng(123))
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = NetworkSpec.mlp((3, 4, 2))
        state = init_state(spec, np.random.default_rng(9))
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, {"net": (spec, state)}, meta={"purpose": "test", "q": 4})
        loaded, meta = load_checkpoint(path)
        assert meta == {"purpose": "test", "q": 4}
        spec2, state2 = loaded["net"]
        assert spec2 == spec
        for a, b in zip(state.arrays(), state2.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_multi_network_bundle(self, tmp_path):
        rng = np.random.default_rng(2)
        nets = {
            "trunk": (NetworkSpec.mlp((4, 3)), None),
            "head": (NetworkSpec((3, 2), ("identity",), (False,)), None),
        }
        nets = {k: (s, init_state(s, rng)) for k, (s, _) in nets.items()}
        path = tmp_path / "bundle.ckpt"
        save_checkpoint(path, nets, meta={})
        loaded, _ = load_checkpoint(path)
        assert set(loaded) == {"trunk", "head"}

    def test_truncated_file_rejected(self, tmp_path):
        spec = NetworkSpec((2, 2), ("identity",), (False,))
        state = init_state(spec, np.random.default_rng(0))
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, {"net": (spec, state)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint\n")
        with pytest.raises(FormatError):
            load_checkpoint(path)
