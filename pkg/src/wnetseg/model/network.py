"""The W-shaped autoencoder: two U-shaped fully convolutional networks.

The encoder U maps an image to a K-way softmax field of the same spatial
size; the decoder U maps that field back to an image.  Each U has
``depth + 1`` contracting modules joined by 2x2 max-pooling (channels double
per level) and ``depth`` expansive modules joined by stride-2 transposed
convolutions (channels halve), with the output of every contracting module
concatenated onto the input of the expansive module at the same level.

A module is two 3x3 convolutions, each followed by ReLU and then batch
normalization, with dropout on the module output while training.  Modules use
depthwise-separable convolutions except the first and last module of each U.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np

from .layers import (
    BatchNorm,
    Context,
    Conv3x3,
    Dropout,
    MaxPool2,
    Pointwise,
    ReLU,
    SeparableConv3x3,
    Sequential,
    UpConv2,
    softmax,
    softmax_backward,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WNetConfig:
    input_size: int = 64
    in_channels: int = 3
    k: int = 8
    depth: int = 3
    base_channels: int = 8
    # 1-based module numbers (over both Us) that use dense convolutions;
    # None selects the first and last module of each U
    dense_modules: tuple[int, ...] | None = None
    # drop probability (a keep probability of 0.65)
    dropout: float = 0.35
    # read ``dropout`` as a keep probability instead of a drop probability
    dropout_is_keep: bool = False
    batch_norm: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 0 or self.base_channels < 1 or self.k < 1 or self.in_channels < 1:
            raise ConfigError(f"invalid network shape in {self}")
        if self.input_size < 1 or self.input_size % (2**self.depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2**self.depth}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ConfigError(f"dropout {self.dropout} gives an invalid drop probability")

    @classmethod
    def full_scale(cls, **overrides) -> "WNetConfig":
        """The full-scale configuration: 224 px input, four pooling levels, 64 channels."""
        return cls(input_size=224, depth=4, base_channels=64, **overrides)

    @property
    def modules_per_u(self) -> int:
        return 2 * self.depth + 1

    @property
    def module_count(self) -> int:
        return 2 * self.modules_per_u

    @property
    def drop_probability(self) -> float:
        return 1.0 - self.dropout if self.dropout_is_keep else self.dropout

    def dense_module_set(self) -> set[int]:
        if self.dense_modules is not None:
            return set(self.dense_modules)
        m = self.modules_per_u
        return {1, m, m + 1, 2 * m}

    def conv_layer_count(self) -> int:
        """Convolution layers in the whole network (3x3, transposed and 1x1 heads)."""
        return 2 * self.module_count + 2 * self.depth + 2

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "WNetConfig":
        d = dict(d)
        if d.get("dense_modules") is not None:
            d["dense_modules"] = tuple(d["dense_modules"])
        return cls(**d)


def conv_block(name, cin, cout, separable, batch_norm, drop_p) -> Sequential:
    layers = []
    for j, (a, b) in enumerate(((cin, cout), (cout, cout)), start=1):
        conv = SeparableConv3x3 if separable else Conv3x3
        layers.append(conv(f"{name}.conv{j}", a, b))
        layers.append(ReLU())
        if batch_norm:
            layers.append(BatchNorm(f"{name}.bn{j}", b))
    if drop_p > 0:
        layers.append(Dropout(drop_p))
    return Sequential(layers)


class UNet:
    def __init__(self, prefix, cin, cout, config: WNetConfig, first_module: int):
        d, base = config.depth, config.base_channels
        dense = config.dense_module_set()
        drop = config.drop_probability
        self.prefix, self.depth = prefix, d
        num = first_module
        self.down = []
        for level in range(d + 1):
            a = cin if level == 0 else base * 2 ** (level - 1)
            self.down.append(
                conv_block(f"{prefix}.m{num}", a, base * 2**level, num not in dense,
                           config.batch_norm, drop)
            )
            num += 1
        self.pool = MaxPool2()
        self.up = {}
        self.upblocks = {}
        for level in reversed(range(d)):
            ch = base * 2**level
            self.up[level] = UpConv2(f"{prefix}.up{level}", 2 * ch, ch)
            self.upblocks[level] = conv_block(
                f"{prefix}.m{num}", 2 * ch, ch, num not in dense, config.batch_norm, drop
            )
            num += 1
        self.head = Pointwise(f"{prefix}.head", base, cout)

    def layers(self):
        yield from self.down
        for level in reversed(range(self.depth)):
            yield self.up[level]
            yield self.upblocks[level]
        yield self.head

    def param_names(self):
        return [n for layer in self.layers() for n in layer.param_names()]

    def init(self, rng, dtype):
        params = {}
        for layer in self.layers():
            params.update(layer.init(rng, dtype))
        return params

    def init_state(self, dtype):
        state = {}
        for layer in self.layers():
            state.update(layer.init_state(dtype))
        return state

    def forward(self, params, x, ctx):
        cache = {}
        skips = {}
        h = x
        for level, block in enumerate(self.down):
            if level > 0:
                h, cache[("pool", level)] = self.pool.forward(params, h, ctx)
            h, cache[("down", level)] = block.forward(params, h, ctx)
            skips[level] = h
        for level in reversed(range(self.depth)):
            h, cache[("up", level)] = self.up[level].forward(params, h, ctx)
            skip = skips[level]
            h = np.concatenate([skip, h], axis=-1)
            h, cache[("upblock", level)] = self.upblocks[level].forward(params, h, ctx)
        y, cache["head"] = self.head.forward(params, h, ctx)
        return y, cache

    def backward(self, params, dy, cache, grads):
        dh = self.head.backward(params, dy, cache["head"], grads)
        dskips = {}
        for level in range(self.depth):
            dcat = self.upblocks[level].backward(params, dh, cache[("upblock", level)], grads)
            ch = dcat.shape[-1] // 2
            dskips[level] = dcat[..., :ch]
            dh = self.up[level].backward(params, dcat[..., ch:], cache[("up", level)], grads)
        for level in reversed(range(self.depth + 1)):
            if level in dskips:
                dh = dh + dskips[level]
            dh = self.down[level].backward(params, dh, cache[("down", level)], grads)
            if level > 0:
                dh = self.pool.backward(params, dh, cache[("pool", level)], grads)
        return dh


class Architecture:
    def __init__(self, config: WNetConfig):
        self.config = config
        self.encoder = UNet("enc", config.in_channels, config.k, config, 1)
        self.decoder = UNet("dec", config.k, config.in_channels, config, config.modules_per_u + 1)


@dataclass
class NetworkParams:
    """Parameter tensors and batch-norm running statistics of one network.

    Names starting with ``enc.`` belong to the encoder, ``dec.`` to the
    decoder; the two sets partition ``params``.
    """

    config: WNetConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)

    @cached_property
    def arch(self) -> Architecture:
        return Architecture(self.config)

    @property
    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("enc.")]

    @property
    def decoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("dec.")]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.config,
            {n: v.copy() for n, v in self.params.items()},
            {n: v.copy() for n, v in self.state.items()},
        )

    def with_config(self, **changes) -> "NetworkParams":
        """Same tensors under a config differing only in non-shape fields."""
        return NetworkParams(replace(self.config, **changes), self.params, self.state)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def build(config: WNetConfig, rng: np.random.Generator) -> NetworkParams:
    arch = Architecture(config)
    dtype = np.dtype(config.dtype)
    params = {**arch.encoder.init(rng, dtype), **arch.decoder.init(rng, dtype)}
    state = {**arch.encoder.init_state(dtype), **arch.decoder.init_state(dtype)}
    return NetworkParams(config, params, state)


def _as_batch(net: NetworkParams, x, channels: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    size = net.config.input_size
    if x.ndim != 4 or x.shape[1:] != (size, size, channels):
        raise ValueError(
            f"expected input of shape (N, {size}, {size}, {channels}), got {x.shape}; "
            f"resize images to {size}x{size} first"
        )
    return x.astype(net.config.dtype, copy=False), single


def forward_encode(net: NetworkParams, x, training=False, rng=None):
    """Soft segmentation of an image or a batch, plus the cache for backward."""
    xb, single = _as_batch(net, x, net.config.in_channels)
    ctx = Context(training=training, rng=rng, state=net.state)
    logits, cache = net.arch.encoder.forward(net.params, xb, ctx)
    p = softmax(logits)
    out = p[0] if single else p
    return out, (cache, p, single)


def backward_encode(net: NetworkParams, dp, cache) -> dict[str, np.ndarray]:
    enc_cache, p, single = cache
    dp = np.asarray(dp, dtype=p.dtype)
    if single:
        dp = dp[None]
    grads = {}
    dz = softmax_backward(p, dp)
    net.arch.encoder.backward(net.params, dz, enc_cache, grads)
    return grads


def forward_decode(net: NetworkParams, p, training=False, rng=None):
    pb, single = _as_batch(net, p, net.config.k)
    ctx = Context(training=training, rng=rng, state=net.state)
    recon, cache = net.arch.decoder.forward(net.params, pb, ctx)
    return (recon[0] if single else recon), (cache, single)


def backward_decode(net: NetworkParams, drecon, cache):
    """Gradient with respect to the decoder input and the decoder parameters."""
    dec_cache, single = cache
    drecon = np.asarray(drecon, dtype=net.config.dtype)
    if single:
        drecon = drecon[None]
    grads = {}
    dp = net.arch.decoder.backward(net.params, drecon, dec_cache, grads)
    return (dp[0] if single else dp), grads


def count_conv_layers(net_or_config) -> int:
    """Count convolution layers in a built architecture by walking its graph."""
    config = net_or_config.config if isinstance(net_or_config, NetworkParams) else net_or_config
    arch = Architecture(config)
    total = 0
    for u in (arch.encoder, arch.decoder):
        for layer in u.layers():
            if isinstance(layer, Sequential):
                total += sum(isinstance(l, (Conv3x3, SeparableConv3x3)) for l in layer.layers)
            elif isinstance(layer, (UpConv2, Pointwise)):
                total += 1
    return total
