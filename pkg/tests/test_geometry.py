"""Patch extraction tests, anchored on a brute-force loop oracle."""

import numpy as np
import numpy.testing as npt
import pytest

from voltconv.geometry import (
    ConvGeometry,
    PatchMatrix,
    col2im_accumulate,
    im2col,
    square_geometry,
)


def slow_im2col(x, geom):
    """Reference: explicit loops over batch, output position, channel,
    kernel offset, reading zero outside the input."""
    batch = x.shape[0]
    rows = np.zeros((batch * geom.out_h * geom.out_w, geom.patch_len))
    row = 0
    for b in range(batch):
        for oy in range(geom.out_h):
            for ox in range(geom.out_w):
                col = 0
                for c in range(geom.in_channels):
                    for ky in range(geom.kernel_h):
                        for kx in range(geom.kernel_w):
                            y = oy * geom.stride_h + ky - geom.pad_h
                            xx = ox * geom.stride_w + kx - geom.pad_w
                            if 0 <= y < geom.in_h and 0 <= xx < geom.in_w:
                                rows[row, col] = x[b, c, y, xx]
                            col += 1
                row += 1
    return rows


def slow_coverage(geom):
    """How many receptive fields read each input pixel."""
    counts = np.zeros((geom.in_h, geom.in_w))
    for oy in range(geom.out_h):
        for ox in range(geom.out_w):
            for ky in range(geom.kernel_h):
                for kx in range(geom.kernel_w):
                    y = oy * geom.stride_h + ky - geom.pad_h
                    x = ox * geom.stride_w + kx - geom.pad_w
                    if 0 <= y < geom.in_h and 0 <= x < geom.in_w:
                        counts[y, x] += 1
    return counts


GEOMETRIES = [
    square_geometry(1, 1, 1),
    square_geometry(1, 4, 2),
    square_geometry(3, 5, 3, stride=2, padding=1),
    square_geometry(2, 6, 3, stride=1, padding=1),
    ConvGeometry(kernel_h=2, kernel_w=3, stride_h=2, stride_w=1, pad_h=0,
                 pad_w=2, in_channels=2, in_h=5, in_w=4),
    ConvGeometry(kernel_h=3, kernel_w=1, stride_h=1, stride_w=3, pad_h=2,
                 pad_w=0, in_channels=1, in_h=3, in_w=7),
]


def test_im2col_identity_geometry():
    got = im2col(np.array([[[[5.0]]]]), square_geometry(1, 1, 1))
    npt.assert_array_equal(got.data, [[5.0]])


def test_im2col_single_full_patch():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    got = im2col(x, square_geometry(1, 2, 2))
    npt.assert_array_equal(got.data, [[1, 2, 3, 4]])


def test_im2col_hand_enumerated_three_by_three():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    got = im2col(x, square_geometry(1, 3, 2))
    npt.assert_array_equal(
        got.data,
        [[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]],
    )


@pytest.mark.parametrize("geom", GEOMETRIES)
@pytest.mark.parametrize("batch", [1, 3])
def test_im2col_matches_loop_oracle(geom, batch):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, geom.in_channels, geom.in_h, geom.in_w))
    npt.assert_array_equal(im2col(x, geom).data, slow_im2col(x, geom))


def test_patch_row_and_element_ordering():
    # batch-major rows, channel-major elements: checked on a value-coded
    # input where every pixel is uniquely identifiable.
    geom = square_geometry(2, 3, 2)
    x = np.zeros((2, 2, 3, 3))
    for b in range(2):
        for c in range(2):
            for y in range(3):
                for w in range(3):
                    x[b, c, y, w] = 1000 * b + 100 * c + 10 * y + w
    got = im2col(x, geom).data
    assert got.shape == (2 * 2 * 2, 8)
    # row 0: batch 0, output (0,0); elements c0 row-major then c1
    npt.assert_array_equal(got[0], [0, 1, 10, 11, 100, 101, 110, 111])
    # row 3: batch 0, output (1,1)
    npt.assert_array_equal(got[3], [11, 12, 21, 22, 111, 112, 121, 122])
    # row 4: batch 1, output (0,0)
    npt.assert_array_equal(got[4], [1000, 1001, 1010, 1011,
                                    1100, 1101, 1110, 1111])


def test_padding_reads_zero():
    geom = square_geometry(1, 2, 3, stride=1, padding=1)
    x = np.ones((1, 1, 2, 2))
    got = im2col(x, geom).data
    # corner patch touches 5 padded pixels
    assert got[0, 0] == 0 and got[0, 4] == 1
    assert got.sum() == slow_im2col(x, geom).sum()


def test_col2im_single_patch_is_reshape():
    geom = square_geometry(1, 2, 2)
    pm = PatchMatrix(data=np.array([[1.0, 2.0, 3.0, 4.0]]), geometry=geom)
    got = col2im_accumulate(pm, geom, batch=1)
    npt.assert_array_equal(got, [[[[1, 2], [3, 4]]]])


def test_col2im_overlap_counts():
    geom = square_geometry(1, 3, 2)
    pm = PatchMatrix(data=np.ones((4, 4)), geometry=geom)
    got = col2im_accumulate(pm, geom, batch=1)
    npt.assert_array_equal(got[0, 0], [[1, 2, 1], [2, 4, 2], [1, 2, 1]])


def test_col2im_zero_in_zero_out():
    geom = square_geometry(2, 4, 3, padding=1)
    pm = PatchMatrix(data=np.zeros((16, 18)), geometry=geom)
    npt.assert_array_equal(col2im_accumulate(pm, geom, 1),
                           np.zeros((1, 2, 4, 4)))


@pytest.mark.parametrize("geom", GEOMETRIES)
@pytest.mark.parametrize("batch", [1, 2])
def test_adjoint_identity(geom, batch):
    rng = np.random.default_rng(42)
    x = rng.normal(size=(batch, geom.in_channels, geom.in_h, geom.in_w))
    g = rng.normal(size=(batch * geom.out_h * geom.out_w, geom.patch_len))
    lhs = float((im2col(x, geom).data * g).sum())
    back = col2im_accumulate(PatchMatrix(data=g, geometry=geom), geom, batch)
    rhs = float((x * back).sum())
    npt.assert_allclose(lhs, rhs, rtol=1e-12)


@pytest.mark.parametrize("geom", GEOMETRIES)
def test_ones_accumulate_to_coverage_counts(geom):
    x = np.zeros((1, geom.in_channels, geom.in_h, geom.in_w))
    pm = im2col(x, geom)
    ones = PatchMatrix(data=np.ones_like(pm.data), geometry=geom)
    got = col2im_accumulate(ones, geom, batch=1)
    expected = slow_coverage(geom)
    for c in range(geom.in_channels):
        npt.assert_array_equal(got[0, c], expected)


def test_round_trip_identity_kernel():
    rng = np.random.default_rng(3)
    geom = square_geometry(3, 5, 1)
    x = rng.normal(size=(2, 3, 5, 5))
    pm = im2col(x, geom)
    npt.assert_array_equal(col2im_accumulate(pm, geom, 2), x)


def test_col2im_is_deterministic():
    geom = square_geometry(2, 6, 3, padding=1)
    rng = np.random.default_rng(9)
    g = PatchMatrix(data=rng.normal(size=(36, 18)), geometry=geom)
    a = col2im_accumulate(g, geom, 1)
    b = col2im_accumulate(g, geom, 1)
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch_raises():
    geom = square_geometry(1, 3, 2)
    with pytest.raises(ValueError):
        im2col(np.zeros((1, 2, 3, 3)), geom)
    with pytest.raises(ValueError):
        im2col(np.zeros((1, 1, 4, 3)), geom)
    with pytest.raises(ValueError):
        col2im_accumulate(PatchMatrix(data=np.zeros((3, 4)), geometry=geom),
                          geom, batch=1)


def test_geometry_validation():
    with pytest.raises(ValueError):
        square_geometry(1, 3, 2, stride=0)
    with pytest.raises(ValueError):
        square_geometry(1, 3, 2, padding=-1)
    with pytest.raises(ValueError):
        square_geometry(1, 2, 4)  # kernel larger than padded input
    assert square_geometry(1, 2, 4, padding=1).out_h == 1


def test_out_dims_floor_rule():
    geom = ConvGeometry(kernel_h=2, kernel_w=2, stride_h=3, stride_w=3,
                        pad_h=0, pad_w=0, in_channels=1, in_h=6, in_w=7)
    assert (geom.out_h, geom.out_w) == (2, 2)
    x = np.random.default_rng(1).normal(size=(1, 1, 6, 7))
    npt.assert_array_equal(im2col(x, geom).data, slow_im2col(x, geom))
