"""Minimal dense-network machinery in numpy.

Layers apply affine -> optional LayerNorm -> activation. The module owns
exact reverse-mode gradients, an AdamW-style optimizer with decoupled weight
decay, a linear warmup/decay schedule, and a versioned binary checkpoint
format. Everything is float64 and deterministic given a seeded generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

ACTIVATIONS = ("silu", "identity", "sigmoid")

LAYER_NORM_EPS = 1e-5

_CHECKPOINT_MAGIC = b"NNCK"
_CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def silu(x):
    """x * sigmoid(x); smooth, zero at zero, approaches identity for large x."""
    x = np.asarray(x, dtype=float)
    out = x * sigmoid(x)
    return out if out.shape else float(out)


def _silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def layer_norm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Normalize to zero mean / unit variance (eps-guarded), then affine."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 2:
        raise DimensionError("layer_norm needs vectors of length >= 2")
    centered = x - x.mean()
    inv_std = 1.0 / np.sqrt(centered.var() + LAYER_NORM_EPS)
    return gain * (centered * inv_std) + offset


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: dims per layer boundary, activation and LayerNorm flags
    per layer."""

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    layer_norm: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "layer_norm", tuple(bool(f) for f in self.layer_norm))
        if len(self.layer_dims) < 2:
            raise ConfigError("need at least input and output dims")
        n = self.n_layers
        if len(self.activations) != n or len(self.layer_norm) != n:
            raise ConfigError("activations/layer_norm must have one entry per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        if any(d < 1 for d in self.layer_dims):
            raise ConfigError("layer dims must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @classmethod
    def mlp(cls, dims, hidden_activation="silu", final_activation="identity",
            hidden_layer_norm=True) -> "NetworkSpec":
        """Hidden layers share activation/LayerNorm; the last layer is plain."""
        n = len(dims) - 1
        acts = tuple([hidden_activation] * (n - 1) + [final_activation])
        ln = tuple([hidden_layer_norm] * (n - 1) + [False])
        return cls(tuple(dims), acts, ln)


@dataclass
class NetworkState:
    """Parameter arrays; also used as the container for their gradients."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_gains: list[np.ndarray | None]
    ln_offsets: list[np.ndarray | None]

    def arrays(self):
        """All parameter arrays in a fixed deterministic order."""
        for group in (self.weights, self.biases, self.ln_gains, self.ln_offsets):
            for arr in group:
                if arr is not None:
                    yield arr

    def copy(self) -> "NetworkState":
        return NetworkState(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [g.copy() if g is not None else None for g in self.ln_gains],
            [o.copy() if o is not None else None for o in self.ln_offsets],
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_state(spec: NetworkSpec, rng: np.random.Generator) -> NetworkState:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, unit gains."""
    weights, biases, gains, offsets = [], [], [], []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
        if spec.layer_norm[i]:
            gains.append(np.ones(fan_out))
            offsets.append(np.zeros(fan_out))
        else:
            gains.append(None)
            offsets.append(None)
    return NetworkState(weights, biases, gains, offsets)


def zeros_like_state(spec: NetworkSpec) -> NetworkState:
    state = init_state(spec, np.random.default_rng(0))
    for arr in state.arrays():
        arr[...] = 0.0
    return state


@dataclass
class ForwardCache:
    spec: NetworkSpec
    inputs: list[np.ndarray]
    pre_act: list[np.ndarray]
    ln_xhat: list[np.ndarray | None]
    ln_inv_std: list[float | None]


def forward(spec: NetworkSpec, state: NetworkState, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Single forward pass; returns output and the cache backward consumes."""
    h = np.asarray(x, dtype=float)
    if h.ndim != 1 or h.shape[0] != spec.layer_dims[0]:
        raise DimensionError(
            f"input has shape {h.shape}, expected ({spec.layer_dims[0]},)"
        )
    cache = ForwardCache(spec, [], [], [], [])
    for i in range(spec.n_layers):
        cache.inputs.append(h)
        a = state.weights[i] @ h + state.biases[i]
        if spec.layer_norm[i]:
            if a.shape[0] < 2:
                raise DimensionError("layer_norm needs layer width >= 2")
            centered = a - a.mean()
            inv_std = 1.0 / np.sqrt(centered.var() + LAYER_NORM_EPS)
            xhat = centered * inv_std
            s = state.ln_gains[i] * xhat + state.ln_offsets[i]
            cache.ln_xhat.append(xhat)
            cache.ln_inv_std.append(float(inv_std))
        else:
            s = a
            cache.ln_xhat.append(None)
            cache.ln_inv_std.append(None)
        cache.pre_act.append(s)
        act = spec.activations[i]
        if act == "silu":
            h = s * sigmoid(s)
        elif act == "sigmoid":
            h = sigmoid(s)
        else:
            h = s
    return h, cache


def backward(spec: NetworkSpec, state: NetworkState, cache: ForwardCache,
             output_grad: np.ndarray) -> tuple[NetworkState, np.ndarray]:
    """Exact reverse-mode gradients for one cached forward pass.

    Returns (parameter gradients in a same-shaped container, input gradient).
    """
    if cache.spec != spec or len(cache.inputs) != spec.n_layers:
        raise DimensionError("cache does not match this network spec")
    grads = zeros_like_state(spec)
    g = np.asarray(output_grad, dtype=float)
    if g.shape != (spec.layer_dims[-1],):
        raise DimensionError(
            f"output_grad has shape {g.shape}, expected ({spec.layer_dims[-1]},)"
        )
    for i in reversed(range(spec.n_layers)):
        s = cache.pre_act[i]
        act = spec.activations[i]
        if act == "silu":
            g = g * _silu_grad(s)
        elif act == "sigmoid":
            sg = sigmoid(s)
            g = g * sg * (1.0 - sg)
        if spec.layer_norm[i]:
            xhat = cache.ln_xhat[i]
            inv_std = cache.ln_inv_std[i]
            grads.ln_gains[i][...] = g * xhat
            grads.ln_offsets[i][...] = g
            gx = g * state.ln_gains[i]
            g = inv_std * (gx - gx.mean() - xhat * np.mean(gx * xhat))
        grads.weights[i][...] = np.outer(g, cache.inputs[i])
        grads.biases[i][...] = g
        g = state.weights[i].T @ g
    return grads, g


@dataclass(frozen=True)
class OptimizerConfig:
    max_lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 300
    total_steps: int = 1000

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("betas must lie in (0, 1)")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


def lr_schedule(step: int, config: OptimizerConfig) -> float:
    """Linear 0 -> max_lr over the warmup, then linear max_lr -> 0."""
    if step < 0 or step > config.total_steps:
        raise ConfigError(f"step {step} outside [0, {config.total_steps}]")
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return config.max_lr * (step / config.warmup_steps)
    span = config.total_steps - config.warmup_steps
    return config.max_lr * ((config.total_steps - step) / span)


@dataclass
class AdamState:
    """First/second moment accumulators, aligned with ``state.arrays()``."""

    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_state(cls, state: NetworkState) -> "AdamState":
        return cls(
            [np.zeros_like(a) for a in state.arrays()],
            [np.zeros_like(a) for a in state.arrays()],
        )


def adamw_step(state: NetworkState, grads: NetworkState, opt_state: AdamState,
               config: OptimizerConfig, step: int) -> NetworkState:
    """One decoupled-weight-decay adaptive-moment update, in place.

    ``step`` is the 1-based update counter; it drives both the schedule and
    the bias correction.
    """
    lr = lr_schedule(step, config)
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1**step
    corr2 = 1.0 - b2**step
    for param, grad, m, v in zip(state.arrays(), grads.arrays(), opt_state.m, opt_state.v):
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / corr1
        v_hat = v / corr2
        param -= lr * (m_hat / (np.sqrt(v_hat) + config.epsilon) + config.weight_decay * param)
    return state


# ---------------------------------------------------------------------------
# Checkpoints: one file can hold several named networks plus metadata.
# Layout: b"NNCK v<version> <header_bytes>\n", a JSON header, then row-major
# float64 little-endian parameter blobs in header order.
# ---------------------------------------------------------------------------


def _state_blob_entries(name: str, spec: NetworkSpec, state: NetworkState):
    for i in range(spec.n_layers):
        yield (f"{name}/w{i}", state.weights[i])
        yield (f"{name}/b{i}", state.biases[i])
        if spec.layer_norm[i]:
            yield (f"{name}/g{i}", state.ln_gains[i])
            yield (f"{name}/o{i}", state.ln_offsets[i])


def save_checkpoint(path, networks: dict[str, tuple[NetworkSpec, NetworkState]],
                    meta: dict | None = None) -> None:
    entries = []
    blobs = []
    header_nets = []
    for name, (spec, state) in networks.items():
        header_nets.append(
            {
                "name": name,
                "layer_dims": list(spec.layer_dims),
                "activations": list(spec.activations),
                "layer_norm": list(spec.layer_norm),
            }
        )
        for label, arr in _state_blob_entries(name, spec, state):
            entries.append({"label": label, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8"))
    header = {
        "meta": meta or {},
        "networks": header_nets,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC + b" v%d %d\n" % (_CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob.tobytes())


def load_checkpoint(path) -> tuple[dict[str, tuple[NetworkSpec, NetworkState]], dict]:
    with open(path, "rb") as fh:
        first = fh.readline()
        parts = first.split()
        if len(parts) != 3 or parts[0] != _CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a network checkpoint")
        if parts[1] != b"v%d" % _CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {parts[1]!r}")
        header = json.loads(fh.read(int(parts[2])).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(f"{path}: truncated blob for {entry['label']}")
            arrays[entry["label"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after declared blobs")

    networks = {}
    for net in header["networks"]:
        spec = NetworkSpec(
            tuple(net["layer_dims"]), tuple(net["activations"]), tuple(net["layer_norm"])
        )
        state = zeros_like_state(spec)
        name = net["name"]
        for i in range(spec.n_layers):
            state.weights[i][...] = arrays[f"{name}/w{i}"]
            state.biases[i][...] = arrays[f"{name}/b{i}"]
            if spec.layer_norm[i]:
                state.ln_gains[i][...] = arrays[f"{name}/g{i}"]
                state.ln_offsets[i][...] = arrays[f"{name}/o{i}"]
        networks[name] = (spec, state)
    return networks, header["meta"]
