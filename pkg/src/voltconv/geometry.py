"""Patch extraction and accumulation for 2D convolution.

Tensors are plain float64 numpy arrays in row-major layout, shaped
(batch, channels, height, width).  im2col flattens every receptive field
into one row of a patch matrix; col2im_accumulate is its adjoint and sums
patch-space gradients back onto input locations.

Layout contracts (everything downstream indexes against these):

* patch rows are ordered batch-major, then output-row, then output-column;
* elements within a row are ordered channel-major, then kernel-row, then
  kernel-column;
* padding is zero-valued and its gradient contributions are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class ConvGeometry:
    """Static description of one convolution: kernel, stride, padding and
    the input plane it applies to."""

    kernel_h: int
    kernel_w: int
    stride_h: int
    stride_w: int
    pad_h: int
    pad_w: int
    in_channels: int
    in_h: int
    in_w: int

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride_h", "stride_w",
                     "in_channels", "in_h", "in_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("pad_h", "pad_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError(
                f"kernel {self.kernel_h}x{self.kernel_w} does not fit the "
                f"padded {self.in_h}x{self.in_w} input"
            )

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1

    @property
    def patch_len(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w


@dataclass(frozen=True)
class PatchMatrix:
    """Receptive fields as rows: (batch * out_h * out_w, patch_len)."""

    data: np.ndarray
    geometry: ConvGeometry

    @property
    def n_patches(self) -> int:
        return self.data.shape[0]

    @property
    def patch_len(self) -> int:
        return self.data.shape[1]


def square_geometry(channels: int, size: int, kernel: int, stride: int = 1,
                    padding: int = 0) -> ConvGeometry:
    """Shorthand for the common square-everything case."""
    return ConvGeometry(
        kernel_h=kernel, kernel_w=kernel, stride_h=stride, stride_w=stride,
        pad_h=padding, pad_w=padding, in_channels=channels, in_h=size,
        in_w=size,
    )


def im2col(x: np.ndarray, geom: ConvGeometry) -> PatchMatrix:
    """Flatten every receptive field of x into one row.

    x has shape (batch, in_channels, in_h, in_w); the result has
    batch * out_h * out_w rows of length in_channels * kernel_h * kernel_w.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (geom.in_channels, geom.in_h, geom.in_w):
        raise ValueError(
            f"input shape {x.shape} does not match geometry "
            f"(batch, {geom.in_channels}, {geom.in_h}, {geom.in_w})"
        )
    if geom.pad_h or geom.pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (geom.pad_h, geom.pad_h),
                       (geom.pad_w, geom.pad_w)))
    # windows: (batch, channels, out positions along h, along w, kh, kw)
    windows = sliding_window_view(x, (geom.kernel_h, geom.kernel_w),
                                  axis=(2, 3))
    windows = windows[:, :, ::geom.stride_h, ::geom.stride_w]
    batch = x.shape[0]
    rows = (
        windows.transpose(0, 2, 3, 1, 4, 5)
        .reshape(batch * geom.out_h * geom.out_w, geom.patch_len)
    )
    return PatchMatrix(data=np.ascontiguousarray(rows), geometry=geom)


def col2im_accumulate(patches: PatchMatrix, geom: ConvGeometry,
                      batch: int) -> np.ndarray:
    """Adjoint of im2col: sum patch-space values onto input locations.

    Accumulation runs in a fixed kernel-offset order (one strided slice-add
    per (kernel-row, kernel-column) pair), so results are deterministic.
    """
    data = np.asarray(patches.data, dtype=np.float64)
    expected_rows = batch * geom.out_h * geom.out_w
    if data.shape != (expected_rows, geom.patch_len):
        raise ValueError(
            f"patch matrix shape {data.shape} inconsistent with batch "
            f"{batch} and geometry ({expected_rows}, {geom.patch_len})"
        )
    grid = data.reshape(batch, geom.out_h, geom.out_w, geom.in_channels,
                        geom.kernel_h, geom.kernel_w)
    padded = np.zeros(
        (batch, geom.in_channels, geom.in_h + 2 * geom.pad_h,
         geom.in_w + 2 * geom.pad_w)
    )
    span_h = geom.stride_h * (geom.out_h - 1) + 1
    span_w = geom.stride_w * (geom.out_w - 1) + 1
    for ky in range(geom.kernel_h):
        for kx in range(geom.kernel_w):
            padded[:, :, ky:ky + span_h:geom.stride_h,
                   kx:kx + span_w:geom.stride_w] += (
                grid[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
    if geom.pad_h or geom.pad_w:
        padded = padded[:, :, geom.pad_h:geom.pad_h + geom.in_h,
                        geom.pad_w:geom.pad_w + geom.in_w]
    return np.ascontiguousarray(padded)
