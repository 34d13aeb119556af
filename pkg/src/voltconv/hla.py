"""Hybrid local attention block.

Two attention signals gate the input elementwise: a squeeze-excite style
global branch produces one coefficient per channel (clamped so no channel
exceeds the per-sample channel mean), and a local branch produces one
coefficient per position through a second-order Volterra convolution
(3x3, stride 1, padding 1) followed by batchnorm and a sigmoid.  The two
are fused with y = a + b - a*b, which keeps y strictly inside
(max(a, b), 1) for coefficients in (0, 1), and the block output is x * y.

The combine formula is used deterministically; there is no stochastic
sampling anywhere in the block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    Var,
    affine,
    as_var,
    global_avg_pool,
    minimum,
    relu,
    sigmoid,
    volterra_conv,
)
from .container import AttentionSection, load_kernels, save_kernels
from .geometry import ConvGeometry
from .positions import count_terms
from .unique import init_volterra_layer


@dataclass(frozen=True)
class HlaConfig:
    channels: int
    reduction_ratio: int
    use_input_batchnorm: bool = False

    def __post_init__(self):
        if not 1 <= self.reduction_ratio <= self.channels:
            raise ValueError("need channels >= reduction_ratio >= 1")
        if self.channels % self.reduction_ratio:
            raise ValueError("channels must be divisible by reduction_ratio")


class BatchNorm:
    """Per-channel batchnorm over (batch, c, h, w).

    Training mode normalizes with biased batch statistics and folds them
    into the running estimates with momentum 0.1 (running variance uses
    the unbiased estimate, the usual inference convention); eval mode
    normalizes with the running estimates.
    """

    momentum = 0.1
    eps = 1e-5

    def __init__(self, channels: int):
        self.channels = channels
        self.gamma = Var(np.ones(channels))
        self.beta = Var(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Var, training: bool) -> Var:
        c = self.channels
        if x.value.shape[1] != c:
            raise ValueError(
                f"input has {x.value.shape[1]} channels, batchnorm has {c}"
            )
        gamma = self.gamma.reshape(1, c, 1, 1)
        beta = self.beta.reshape(1, c, 1, 1)
        if training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            diff = x - mu
            var = (diff * diff).mean(axis=(0, 2, 3), keepdims=True)
            inv = (var + self.eps).power(-0.5)
            y = gamma * (diff * inv) + beta
            count = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]
            correction = count / max(count - 1, 1)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu.value.reshape(c))
            self.running_var = ((1 - m) * self.running_var
                                + m * correction * var.value.reshape(c))
            return y
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = as_var((inv).reshape(1, c, 1, 1))
        mean = as_var(self.running_mean.reshape(1, c, 1, 1))
        return gamma * ((x - mean) * scale) + beta

    def trainables(self) -> list[Var]:
        return [self.gamma, self.beta]


class HlaParams:
    """All parameters of one block; trainable leaves are tape Vars."""

    def __init__(self, config: HlaConfig, rng: np.random.Generator):
        self.config = config
        c = config.channels
        hidden = c // config.reduction_ratio
        self.reduce_w = Var(rng.uniform(-1, 1, (hidden, c)) / np.sqrt(c))
        self.reduce_b = Var(np.zeros(hidden))
        self.expand_w = Var(rng.uniform(-1, 1, (c, hidden)) / np.sqrt(hidden))
        self.expand_b = Var(np.zeros(c))
        seed_layer = init_volterra_layer(
            _local_geometry(c, 3, 3), out_channels=c, order=2, rng=rng
        )
        self.conv_weights = tuple(Var(w) for w in seed_layer.weights)
        self.conv_bias = Var(seed_layer.bias)
        self.bn = BatchNorm(c)
        self.input_bn = BatchNorm(c) if config.use_input_batchnorm else None

    def trainables(self) -> list[Var]:
        out = [self.reduce_w, self.reduce_b, self.expand_w, self.expand_b,
               *self.conv_weights, self.conv_bias]
        out += self.bn.trainables()
        if self.input_bn is not None:
            out += self.input_bn.trainables()
        return out


def _local_geometry(channels: int, h: int, w: int) -> ConvGeometry:
    return ConvGeometry(kernel_h=3, kernel_w=3, stride_h=1, stride_w=1,
                        pad_h=1, pad_w=1, in_channels=channels, in_h=h,
                        in_w=w)


def channel_mean_clamp(a):
    """Cap each coefficient at the mean over channels (the last axis).

    Works on arrays and on tape nodes; batched inputs clamp per sample.
    """
    if isinstance(a, Var):
        m = a.mean(axis=a.value.ndim - 1, keepdims=True)
        return minimum(a, m)
    a = np.asarray(a, dtype=np.float64)
    return np.minimum(a, a.mean(axis=-1, keepdims=True))


def shake_combine(a, b):
    """y = a + b - a*b; maps (0,1) x (0,1) strictly into (max(a,b), 1)."""
    return a + b - a * b


def se_branch(x: Var, params: HlaParams, training: bool = False) -> Var:
    """Global channel attention: pool, reduce, rectify, expand, squash,
    then clamp at the per-sample channel mean.  Output shape (batch, c)."""
    if x.value.shape[1] != params.config.channels:
        raise ValueError("input channels do not match block parameters")
    pooled = global_avg_pool(x)
    hidden = relu(affine(pooled, params.reduce_w, params.reduce_b))
    a = sigmoid(affine(hidden, params.expand_w, params.expand_b))
    return channel_mean_clamp(a)


def local_branch(x: Var, params: HlaParams, training: bool = False) -> Var:
    """Positionwise attention via a second-order Volterra convolution that
    preserves the spatial shape.  Output shape matches the input."""
    b, c, h, w = x.value.shape
    if c != params.config.channels:
        raise ValueError("input channels do not match block parameters")
    t = x
    if params.input_bn is not None:
        t = params.input_bn.forward(t, training)
    t = volterra_conv(t, params.conv_weights, params.conv_bias,
                      _local_geometry(c, h, w), order=2)
    t = params.bn.forward(t, training)
    return sigmoid(t)


def hla_forward(x: Var, params: HlaParams, training: bool = False,
                override_branches=None) -> Var:
    """x gated by the fused attention coefficients.

    `override_branches` substitutes raw (a, b') coefficient arrays for the
    two branches; it exists for tests that pin the gate values.
    """
    if override_branches is None:
        a = se_branch(x, params, training)
        bp = local_branch(x, params, training)
    else:
        a, bp = (as_var(v) for v in override_branches)
    batch, c = a.value.shape[0], a.value.shape[1]
    y = shake_combine(a.reshape(batch, c, 1, 1), bp)
    return x * y


def save_hla(path, params: HlaParams) -> None:
    """Store the block in the kernel container: Volterra kernels in the
    main section, SE and batchnorm parameters in the extra section."""
    cfg = params.config
    bn = params.bn
    ib = params.input_bn
    extra = AttentionSection(
        channels=cfg.channels, reduction_ratio=cfg.reduction_ratio,
        use_input_batchnorm=cfg.use_input_batchnorm,
        reduce_w=params.reduce_w.value, reduce_b=params.reduce_b.value,
        expand_w=params.expand_w.value, expand_b=params.expand_b.value,
        bn_gamma=bn.gamma.value, bn_beta=bn.beta.value,
        bn_mean=bn.running_mean, bn_var=bn.running_var,
        in_bn_gamma=None if ib is None else ib.gamma.value,
        in_bn_beta=None if ib is None else ib.beta.value,
        in_bn_mean=None if ib is None else ib.running_mean,
        in_bn_var=None if ib is None else ib.running_var,
    )
    n = cfg.channels * 9
    save_kernels(path, n=n, order=2,
                 weights=tuple(w.value for w in params.conv_weights),
                 bias=params.conv_bias.value, extra=extra)


def load_hla(path) -> HlaParams:
    """Rebuild a block from its container."""
    bundle = load_kernels(path)
    if bundle.extra is None:
        raise ValueError("container has no attention section")
    sec = bundle.extra
    if bundle.n != sec.channels * 9 or bundle.order != 2:
        raise ValueError("kernel section does not describe a 3x3 "
                         "second-order local branch")
    cfg = HlaConfig(channels=sec.channels,
                    reduction_ratio=sec.reduction_ratio,
                    use_input_batchnorm=sec.use_input_batchnorm)
    params = HlaParams(cfg, np.random.default_rng(0))
    params.reduce_w = Var(sec.reduce_w)
    params.reduce_b = Var(sec.reduce_b)
    params.expand_w = Var(sec.expand_w)
    params.expand_b = Var(sec.expand_b)
    params.conv_weights = tuple(Var(w) for w in bundle.weights)
    params.conv_bias = Var(bundle.bias)
    params.bn.gamma = Var(sec.bn_gamma)
    params.bn.beta = Var(sec.bn_beta)
    params.bn.running_mean = sec.bn_mean.copy()
    params.bn.running_var = sec.bn_var.copy()
    if cfg.use_input_batchnorm:
        params.input_bn.gamma = Var(sec.in_bn_gamma)
        params.input_bn.beta = Var(sec.in_bn_beta)
        params.input_bn.running_mean = sec.in_bn_mean.copy()
        params.input_bn.running_var = sec.in_bn_var.copy()
    return params


def expected_param_count(config: HlaConfig) -> int:
    """Closed-form parameter total of one block (excluding running stats)."""
    c = config.channels
    hidden = c // config.reduction_ratio
    n = c * 9
    conv = c * (count_terms(n, 1) + count_terms(n, 2)) + c
    se = hidden * c + hidden + c * hidden + c
    bn = 2 * c * (2 if config.use_input_batchnorm else 1)
    return conv + se + bn
