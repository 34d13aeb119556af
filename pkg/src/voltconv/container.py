"""Binary save/load for Volterra convolution kernels.

Layout (all integers little-endian, all floats IEEE 754 binary64
little-endian, no padding between fields):

    offset  size  field
    0       4     magic, the bytes b"VOLK"
    4       4     format version, uint32, currently 1
    8       4     n (flattened patch length), uint32
    12      4     r (max order), uint32
    16      4     out_channels, uint32
    20      8*r   per-order term counts, uint64 each (order 1 first)
    ...     4     extra-section flag, uint32: 0 none, 1 attention block

    weights: for each order j = 1..r, then for each output channel oc in
    ascending order, count_j float64 values in position-table row order.
    biases: out_channels float64 values.

    extra section (flag == 1): uint32 channels, uint32 reduction_ratio,
    uint32 input_batchnorm flag, then float64 blocks in this order:
    reduce matrix (channels/ratio * channels, row-major), reduce bias
    (channels/ratio), expand matrix (channels * channels/ratio), expand
    bias (channels), post-conv batchnorm gamma, beta, running mean,
    running variance (channels each), and, only when the input-batchnorm
    flag is 1, the same four vectors for the input batchnorm.

Per-order counts in the header are redundant with (n, r) and exist as a
corruption check; loaders verify them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import ConvGeometry
from .positions import count_terms
from .unique import VolterraConvLayer

_MAGIC = b"VOLK"
_VERSION = 1


class ContainerFormatError(ValueError):
    """The byte stream does not follow the documented container layout."""


@dataclass(frozen=True)
class KernelBundle:
    """Deserialized kernel set; geometry is supplied by the caller when
    rebuilding a layer (the container stores only the flattened n)."""

    n: int
    order: int
    out_channels: int
    weights: tuple[np.ndarray, ...]
    bias: np.ndarray
    extra: "AttentionSection | None"


@dataclass(frozen=True)
class AttentionSection:
    """SE and batchnorm parameters riding along with an attention block's
    Volterra kernels."""

    channels: int
    reduction_ratio: int
    use_input_batchnorm: bool
    reduce_w: np.ndarray
    reduce_b: np.ndarray
    expand_w: np.ndarray
    expand_b: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    in_bn_gamma: np.ndarray | None = None
    in_bn_beta: np.ndarray | None = None
    in_bn_mean: np.ndarray | None = None
    in_bn_var: np.ndarray | None = None


def _f64_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_kernels(path, n: int, order: int, weights, bias,
                 extra: AttentionSection | None = None) -> None:
    """Write one kernel set (and optional attention section) to `path`."""
    out_channels = bias.shape[0]
    counts = [count_terms(n, j) for j in range(1, order + 1)]
    for j, w in enumerate(weights, start=1):
        if w.shape != (out_channels, counts[j - 1]):
            raise ValueError(
                f"order-{j} weights have shape {w.shape}, expected "
                f"({out_channels}, {counts[j - 1]})"
            )
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<IIII", _VERSION, n, order, out_channels)
    blob += struct.pack(f"<{order}Q", *counts)
    blob += struct.pack("<I", 0 if extra is None else 1)
    for w in weights:
        for oc in range(out_channels):
            blob += _f64_bytes(w[oc])
    blob += _f64_bytes(bias)
    if extra is not None:
        blob += struct.pack("<III", extra.channels, extra.reduction_ratio,
                            1 if extra.use_input_batchnorm else 0)
        hidden = extra.channels // extra.reduction_ratio
        fields = [
            (extra.reduce_w, (hidden, extra.channels)),
            (extra.reduce_b, (hidden,)),
            (extra.expand_w, (extra.channels, hidden)),
            (extra.expand_b, (extra.channels,)),
            (extra.bn_gamma, (extra.channels,)),
            (extra.bn_beta, (extra.channels,)),
            (extra.bn_mean, (extra.channels,)),
            (extra.bn_var, (extra.channels,)),
        ]
        if extra.use_input_batchnorm:
            fields += [
                (extra.in_bn_gamma, (extra.channels,)),
                (extra.in_bn_beta, (extra.channels,)),
                (extra.in_bn_mean, (extra.channels,)),
                (extra.in_bn_var, (extra.channels,)),
            ]
        for a, shape in fields:
            if a is None or a.shape != shape:
                raise ValueError(
                    f"attention field has shape "
                    f"{None if a is None else a.shape}, expected {shape}"
                )
            blob += _f64_bytes(a)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise ContainerFormatError(
                f"truncated container: wanted {count} bytes at offset "
                f"{self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def ints(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_kernels(path) -> KernelBundle:
    """Read a kernel container back; verifies header and per-order counts."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != _MAGIC:
        raise ContainerFormatError("bad magic; not a kernel container")
    version, n, order, out_channels = rd.ints("<IIII")
    if version != _VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    if n < 1 or order < 1 or out_channels < 1:
        raise ContainerFormatError("header dimensions must be positive")
    counts = rd.ints(f"<{order}Q")
    expected = tuple(count_terms(n, j) for j in range(1, order + 1))
    if counts != expected:
        raise ContainerFormatError(
            f"per-order counts {counts} disagree with n={n}: {expected}"
        )
    (flag,) = rd.ints("<I")
    if flag not in (0, 1):
        raise ContainerFormatError(f"unknown extra-section flag {flag}")
    weights = []
    for j in range(1, order + 1):
        w = np.stack([rd.floats(counts[j - 1]) for _ in range(out_channels)])
        weights.append(w)
    bias = rd.floats(out_channels)
    extra = None
    if flag:
        channels, ratio, in_bn = rd.ints("<III")
        if ratio < 1 or channels % ratio:
            raise ContainerFormatError(
                f"channels {channels} not divisible by reduction {ratio}"
            )
        hidden = channels // ratio
        reduce_w = rd.floats(hidden * channels).reshape(hidden, channels)
        reduce_b = rd.floats(hidden)
        expand_w = rd.floats(channels * hidden).reshape(channels, hidden)
        expand_b = rd.floats(channels)
        bn = [rd.floats(channels) for _ in range(4)]
        in_stats = [rd.floats(channels) for _ in range(4)] if in_bn else \
            [None] * 4
        extra = AttentionSection(
            channels=channels, reduction_ratio=ratio,
            use_input_batchnorm=bool(in_bn),
            reduce_w=reduce_w, reduce_b=reduce_b,
            expand_w=expand_w, expand_b=expand_b,
            bn_gamma=bn[0], bn_beta=bn[1], bn_mean=bn[2], bn_var=bn[3],
            in_bn_gamma=in_stats[0], in_bn_beta=in_stats[1],
            in_bn_mean=in_stats[2], in_bn_var=in_stats[3],
        )
    if rd.pos != len(rd.data):
        raise ContainerFormatError(
            f"{len(rd.data) - rd.pos} trailing bytes at offset {rd.pos}"
        )
    return KernelBundle(n=n, order=order, out_channels=out_channels,
                        weights=tuple(weights), bias=bias, extra=extra)


def save_layer(path, layer: VolterraConvLayer,
               extra: AttentionSection | None = None) -> None:
    save_kernels(path, layer.n, layer.order, layer.weights, layer.bias,
                 extra=extra)


def layer_from_bundle(bundle: KernelBundle,
                      geometry: ConvGeometry) -> VolterraConvLayer:
    """Rebuild a convolution layer; the geometry's patch length must match
    the container's n."""
    if geometry.patch_len != bundle.n:
        raise ValueError(
            f"geometry patch length {geometry.patch_len} != container n "
            f"{bundle.n}"
        )
    return VolterraConvLayer(
        geometry=geometry, out_channels=bundle.out_channels,
        order=bundle.order, weights=bundle.weights, bias=bundle.bias,
    )
