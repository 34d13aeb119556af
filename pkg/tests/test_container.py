"""Kernel container format tests, including a golden byte-level fixture."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from voltconv.container import (
    AttentionSection,
    ContainerFormatError,
    layer_from_bundle,
    load_kernels,
    save_kernels,
    save_layer,
)
from voltconv.geometry import square_geometry
from voltconv.unique import conv2d_forward, init_volterra_layer


def test_golden_bytes_minimal_kernel(tmp_path):
    # n=2, r=1, one output channel, no extra section: every byte is
    # predictable from the documented layout.
    path = tmp_path / "k.volk"
    save_kernels(path, n=2, order=1,
                 weights=(np.array([[1.5, -2.0]]),),
                 bias=np.array([0.25]))
    got = path.read_bytes()
    expected = (
        b"VOLK"
        + struct.pack("<IIII", 1, 2, 1, 1)
        + struct.pack("<Q", 2)
        + struct.pack("<I", 0)
        + struct.pack("<2d", 1.5, -2.0)
        + struct.pack("<d", 0.25)
    )
    assert got == expected


def test_round_trip_plain_kernels(tmp_path):
    rng = np.random.default_rng(0)
    n, order, oc = 5, 3, 4
    from voltconv.positions import count_terms
    weights = tuple(
        rng.normal(size=(oc, count_terms(n, j))) for j in range(1, order + 1)
    )
    bias = rng.normal(size=oc)
    path = tmp_path / "k.volk"
    save_kernels(path, n, order, weights, bias)
    bundle = load_kernels(path)
    assert (bundle.n, bundle.order, bundle.out_channels) == (n, order, oc)
    assert bundle.extra is None
    for a, b in zip(bundle.weights, weights):
        npt.assert_array_equal(a, b)
    npt.assert_array_equal(bundle.bias, bias)
    # regenerating from the loaded bundle is byte-identical
    path2 = tmp_path / "k2.volk"
    save_kernels(path2, bundle.n, bundle.order, bundle.weights, bundle.bias)
    assert path.read_bytes() == path2.read_bytes()


def test_layer_round_trip_preserves_outputs(tmp_path):
    rng = np.random.default_rng(1)
    geom = square_geometry(2, 4, 3, padding=1)
    layer = init_volterra_layer(geom, out_channels=3, order=2, rng=rng)
    x = rng.normal(size=(2, 2, 4, 4))
    before, _ = conv2d_forward(x, layer)
    path = tmp_path / "layer.volk"
    save_layer(path, layer)
    rebuilt = layer_from_bundle(load_kernels(path), geom)
    after, _ = conv2d_forward(x, rebuilt)
    npt.assert_array_equal(before, after)


def test_layer_geometry_mismatch(tmp_path):
    rng = np.random.default_rng(2)
    geom = square_geometry(2, 4, 3)
    layer = init_volterra_layer(geom, out_channels=2, order=2, rng=rng)
    path = tmp_path / "layer.volk"
    save_layer(path, layer)
    with pytest.raises(ValueError):
        layer_from_bundle(load_kernels(path), square_geometry(3, 4, 3))


@pytest.mark.parametrize("with_input_bn", [False, True])
def test_attention_section_round_trip(tmp_path, with_input_bn):
    rng = np.random.default_rng(3)
    c, ratio = 8, 4
    hidden = c // ratio

    def stats():
        return (rng.normal(size=c), rng.normal(size=c),
                rng.normal(size=c), np.abs(rng.normal(size=c)) + 0.5)

    bn = stats()
    in_bn = stats() if with_input_bn else (None, None, None, None)
    extra = AttentionSection(
        channels=c, reduction_ratio=ratio,
        use_input_batchnorm=with_input_bn,
        reduce_w=rng.normal(size=(hidden, c)), reduce_b=rng.normal(size=hidden),
        expand_w=rng.normal(size=(c, hidden)), expand_b=rng.normal(size=c),
        bn_gamma=bn[0], bn_beta=bn[1], bn_mean=bn[2], bn_var=bn[3],
        in_bn_gamma=in_bn[0], in_bn_beta=in_bn[1],
        in_bn_mean=in_bn[2], in_bn_var=in_bn[3],
    )
    from voltconv.positions import count_terms
    n, order, oc = 4, 2, c
    weights = tuple(
        rng.normal(size=(oc, count_terms(n, j))) for j in (1, 2)
    )
    path = tmp_path / "hla.volk"
    save_kernels(path, n, order, weights, rng.normal(size=oc), extra=extra)
    loaded = load_kernels(path).extra
    assert loaded is not None
    assert loaded.channels == c and loaded.reduction_ratio == ratio
    assert loaded.use_input_batchnorm is with_input_bn
    npt.assert_array_equal(loaded.reduce_w, extra.reduce_w)
    npt.assert_array_equal(loaded.expand_b, extra.expand_b)
    npt.assert_array_equal(loaded.bn_var, extra.bn_var)
    if with_input_bn:
        npt.assert_array_equal(loaded.in_bn_mean, extra.in_bn_mean)
    else:
        assert loaded.in_bn_mean is None


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.volk"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ContainerFormatError):
        load_kernels(path)


def test_rejects_truncation_with_offset(tmp_path):
    path = tmp_path / "k.volk"
    save_kernels(path, n=3, order=2,
                 weights=(np.zeros((2, 3)), np.zeros((2, 6))),
                 bias=np.zeros(2))
    data = path.read_bytes()
    cut = tmp_path / "cut.volk"
    cut.write_bytes(data[:len(data) - 10])
    with pytest.raises(ContainerFormatError, match="offset"):
        load_kernels(cut)


def test_rejects_trailing_garbage(tmp_path):
    path = tmp_path / "k.volk"
    save_kernels(path, n=2, order=1, weights=(np.zeros((1, 2)),),
                 bias=np.zeros(1))
    bloated = tmp_path / "b.volk"
    bloated.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(ContainerFormatError, match="trailing"):
        load_kernels(bloated)


def test_rejects_count_mismatch(tmp_path):
    path = tmp_path / "k.volk"
    save_kernels(path, n=2, order=1, weights=(np.zeros((1, 2)),),
                 bias=np.zeros(1))
    data = bytearray(path.read_bytes())
    # per-order count field sits right after the 20-byte fixed header
    data[20:28] = struct.pack("<Q", 7)
    broken = tmp_path / "broken.volk"
    broken.write_bytes(bytes(data))
    with pytest.raises(ContainerFormatError, match="counts"):
        load_kernels(broken)


def test_rejects_unknown_version(tmp_path):
    path = tmp_path / "k.volk"
    save_kernels(path, n=2, order=1, weights=(np.zeros((1, 2)),),
                 bias=np.zeros(1))
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    bad = tmp_path / "v99.volk"
    bad.write_bytes(bytes(data))
    with pytest.raises(ContainerFormatError, match="version"):
        load_kernels(bad)


def test_save_validates_weight_shapes(tmp_path):
    with pytest.raises(ValueError):
        save_kernels(tmp_path / "x.volk", n=3, order=1,
                     weights=(np.zeros((1, 4)),), bias=np.zeros(1))
