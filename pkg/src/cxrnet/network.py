"""Dense-connectivity convolutional classifier.

A network is a flat, insertion-ordered mapping of named parameter tensors
plus non-trainable batch-norm running statistics ("buffers"). Build and
forward walk the same architecture plan, so parameter names are the only
coupling between them.

Layout: stem (conv 7x7/2 pad 3, BN, ReLU, max pool 3x3/2 pad 1), dense
blocks whose layers are BN-ReLU-conv1x1-BN-ReLU-conv3x3 with channel
concatenation, compressing transitions (BN-ReLU-conv1x1-avg pool 2x2/2)
between blocks, then BN-ReLU-global average pool-linear-softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    TensorError,
    batch_norm,
    concat_channels,
    conv2d,
    global_avg_pool,
    linear,
    parameter,
    pool,
    relu,
    softmax,
)


class ConfigError(ValueError):
    """Invalid network configuration or unknown preset name."""


@dataclass(frozen=True)
class DenseNetConfig:
    init_features: int = 64
    growth_rate: int = 32
    block_layers: tuple[int, ...] = (6, 12, 24, 16)
    compression: float = 0.5
    bottleneck_factor: int = 4
    input_channels: int = 3
    input_size: int = 320
    num_classes: int = 2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(n) for n in self.block_layers))
        for label, value in (
            ("init_features", self.init_features),
            ("growth_rate", self.growth_rate),
            ("bottleneck_factor", self.bottleneck_factor),
            ("input_channels", self.input_channels),
            ("input_size", self.input_size),
        ):
            if int(value) != value or value < 1:
                raise ConfigError(f"{label} must be a positive integer, got {value!r}")
        if not self.block_layers or any(n < 1 for n in self.block_layers):
            raise ConfigError(f"block_layers must be nonempty positive counts, got {self.block_layers!r}")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must be in (0, 1], got {self.compression!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes!r}")
        if self.bn_eps <= 0 or not 0.0 <= self.bn_momentum < 1.0:
            raise ConfigError("bn_eps must be positive and bn_momentum in [0, 1)")
        # Stem halves twice, each transition halves once.
        factor = self.reduction_factor
        if self.input_size % factor != 0:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by the network's "
                f"downsampling factor {factor}"
            )

    @property
    def reduction_factor(self) -> int:
        return 4 * 2 ** (len(self.block_layers) - 1)


PRESETS: dict[str, DenseNetConfig] = {
    "densenet121-paper": DenseNetConfig(),
    "tiny": DenseNetConfig(
        init_features=8,
        growth_rate=4,
        block_layers=(2, 2),
        compression=0.5,
        bottleneck_factor=4,
        input_channels=1,
        input_size=32,
        num_classes=2,
    ),
}


def preset_config(name: str) -> DenseNetConfig:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown preset {name!r} (known: {known})") from None


def _plan(config: DenseNetConfig) -> Iterator[tuple[str, str, tuple]]:
    """Yield (kind, name, meta) for every parameterized module, build order.

    conv meta = (out_ch, in_ch, kernel); bn meta = (channels,);
    linear meta = (in_features, out_features).
    """
    c = config.init_features
    yield "conv", "stem.conv", (c, config.input_channels, 7)
    yield "bn", "stem.bn", (c,)
    last = len(config.block_layers)
    for b, n_layers in enumerate(config.block_layers, start=1):
        for layer in range(1, n_layers + 1):
            mid = config.bottleneck_factor * config.growth_rate
            prefix = f"block{b}.layer{layer}"
            yield "bn", f"{prefix}.bn1", (c,)
            yield "conv", f"{prefix}.conv1", (mid, c, 1)
            yield "bn", f"{prefix}.bn2", (mid,)
            yield "conv", f"{prefix}.conv2", (config.growth_rate, mid, 3)
            c += config.growth_rate
        if b < last:
            out = int(config.compression * c)
            yield "bn", f"transition{b}.bn", (c,)
            yield "conv", f"transition{b}.conv", (out, c, 1)
            c = out
    yield "bn", "final_bn", (c,)
    yield "linear", "head", (c, config.num_classes)


def penultimate_channels(config: DenseNetConfig) -> int:
    """Channel count entering global average pooling (1024 for the default)."""
    for kind, _, meta in _plan(config):
        if kind == "linear":
            return meta[0]
    raise AssertionError("plan ended without a head")


def parameter_shapes(config: DenseNetConfig) -> tuple[dict[str, tuple[int, ...]], dict[str, tuple[int, ...]]]:
    """Expected (trainable, buffer) array shapes keyed by name, build order."""
    params: dict[str, tuple[int, ...]] = {}
    buffers: dict[str, tuple[int, ...]] = {}
    for kind, name, meta in _plan(config):
        if kind == "conv":
            oc, ic, k = meta
            params[f"{name}.weight"] = (oc, ic, k, k)
        elif kind == "bn":
            (c,) = meta
            params[f"{name}.gamma"] = (c,)
            params[f"{name}.beta"] = (c,)
            buffers[f"{name}.running_mean"] = (c,)
            buffers[f"{name}.running_var"] = (c,)
        else:
            fin, fout = meta
            params["head.weight"] = (fin, fout)
            params["head.bias"] = (fout,)
    return params, buffers


@dataclass
class Network:
    config: DenseNetConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    seed: int


def build_network(config: DenseNetConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> Network:
    """Seeded random initialization: He-normal conv kernels, BN gamma 1 /
    beta 0, linear weights uniform within +/-1/sqrt(fan_in), zero bias."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for kind, name, meta in _plan(config):
        if kind == "conv":
            oc, ic, k = meta
            std = math.sqrt(2.0 / (ic * k * k))
            w = rng.normal(0.0, std, size=(oc, ic, k, k)).astype(dtype)
            params[f"{name}.weight"] = parameter(w, f"{name}.weight")
        elif kind == "bn":
            (c,) = meta
            params[f"{name}.gamma"] = parameter(np.ones(c, dtype=dtype), f"{name}.gamma")
            params[f"{name}.beta"] = parameter(np.zeros(c, dtype=dtype), f"{name}.beta")
            buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
            buffers[f"{name}.running_var"] = np.ones(c, dtype=dtype)
        else:
            fin, fout = meta
            bound = 1.0 / math.sqrt(fin)
            w = rng.uniform(-bound, bound, size=(fin, fout)).astype(dtype)
            params["head.weight"] = parameter(w, "head.weight")
            params["head.bias"] = parameter(np.zeros(fout, dtype=dtype), "head.bias")
    return Network(config, params, buffers, seed)


def zero_network(config: DenseNetConfig, dtype=DEFAULT_DTYPE) -> Network:
    """All-zero skeleton with the right names and shapes; checkpoint loading
    overwrites every array."""
    param_shapes, buffer_shapes = parameter_shapes(config)
    params = {name: parameter(np.zeros(shape, dtype=dtype), name) for name, shape in param_shapes.items()}
    buffers = {name: np.zeros(shape, dtype=dtype) for name, shape in buffer_shapes.items()}
    return Network(config, params, buffers, 0)


class ParameterCount(NamedTuple):
    trainable: int
    non_trainable: int


def count_parameters(network: Network) -> ParameterCount:
    trainable = sum(t.data.size for t in network.params.values())
    non_trainable = sum(a.size for a in network.buffers.values())
    return ParameterCount(trainable, non_trainable)


class ForwardResult(NamedTuple):
    probs: Tensor
    buffers: dict[str, np.ndarray]
    feature_shape: tuple[int, int, int]


def forward(network: Network, batch, mode: str = "eval") -> ForwardResult:
    """Class probabilities for an N x C x S x S batch.

    Train mode normalizes with batch statistics and returns advanced running
    stats in the result; the network itself is never mutated. feature_shape
    is the (C, H, W) of the stack entering global average pooling.
    """
    if mode not in ("train", "eval"):
        raise TensorError(f"forward mode must be 'train' or 'eval', got {mode!r}")
    cfg = network.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4:
        raise TensorError(f"expected an NCHW batch, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != cfg.input_channels:
        raise TensorError(f"batch has {c} channels, config expects {cfg.input_channels}")
    if (h, w) != (cfg.input_size, cfg.input_size):
        raise TensorError(f"batch spatial size {h}x{w}, config expects {cfg.input_size}x{cfg.input_size}")
    p = network.params
    want = p["stem.conv.weight"].dtype
    if x.dtype != want:
        x = Tensor(x.data.astype(want), parents=(x,), backward=None)

    training = mode == "train"
    new_buffers = dict(network.buffers)

    def bn(name: str, t: Tensor) -> Tensor:
        res = batch_norm(
            t,
            p[f"{name}.gamma"],
            p[f"{name}.beta"],
            network.buffers[f"{name}.running_mean"],
            network.buffers[f"{name}.running_var"],
            training=training,
            eps=cfg.bn_eps,
            momentum=cfg.bn_momentum,
        )
        new_buffers[f"{name}.running_mean"] = res.running_mean
        new_buffers[f"{name}.running_var"] = res.running_var
        return res.out

    cur = conv2d(x, p["stem.conv.weight"], stride=2, padding=3)
    cur = pool(relu(bn("stem.bn", cur)), "max", 3, 2, padding=1)
    last = len(cfg.block_layers)
    for b, n_layers in enumerate(cfg.block_layers, start=1):
        for layer in range(1, n_layers + 1):
            prefix = f"block{b}.layer{layer}"
            t = relu(bn(f"{prefix}.bn1", cur))
            t = conv2d(t, p[f"{prefix}.conv1.weight"])
            t = relu(bn(f"{prefix}.bn2", t))
            t = conv2d(t, p[f"{prefix}.conv2.weight"], padding=1)
            cur = concat_channels([cur, t])
        if b < last:
            t = relu(bn(f"transition{b}.bn", cur))
            t = conv2d(t, p[f"transition{b}.conv.weight"])
            cur = pool(t, "avg", 2, 2)
    cur = relu(bn("final_bn", cur))
    feature_shape = cur.shape[1:]
    probs = softmax(linear(global_avg_pool(cur), p["head.weight"], p["head.bias"]))
    return ForwardResult(probs, new_buffers, feature_shape)
