import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covct.errors import ParameterError, ShapeError
from covct.wavelet import (
    SubbandSet,
    dwt2_haar,
    enhance_image,
    idwt2_haar,
    minmax_rescale,
    to_grayscale,
)


def haar_matrix(n):
    """Orthonormal one-axis analysis matrix: low-pass rows first, then high-pass rows."""
    a = np.zeros((n, n))
    r = 1 / math.sqrt(2)
    for k in range(n // 2):
        a[k, 2 * k] = a[k, 2 * k + 1] = r
        a[n // 2 + k, 2 * k] = r
        a[n // 2 + k, 2 * k + 1] = -r
    return a


def test_constant_image():
    s = dwt2_haar(np.full((2, 2), 3.0))
    assert s.ll.item() == pytest.approx(6.0)
    assert s.lh.item() == s.hl.item() == s.hh.item() == 0.0


def test_hand_example_exact():
    s = dwt2_haar(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert (s.ll.item(), s.lh.item(), s.hl.item(), s.hh.item()) == (5.0, -2.0, -1.0, 0.0)
    back = idwt2_haar(SubbandSet(np.array([[5.0]]), np.array([[-2.0]]), np.array([[-1.0]]), np.array([[0.0]])))
    np.testing.assert_array_equal(back, [[1, 2], [3, 4]])


def test_matches_matrix_form():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 8))
    y = haar_matrix(6) @ x @ haar_matrix(8).T
    s = dwt2_haar(x)
    np.testing.assert_allclose(s.ll, y[:3, :4], atol=1e-14)
    np.testing.assert_allclose(s.hl, y[:3, 4:], atol=1e-14)
    np.testing.assert_allclose(s.lh, y[3:, :4], atol=1e-14)
    np.testing.assert_allclose(s.hh, y[3:, 4:], atol=1e-14)


def test_energy_conserved_on_random_8x8():
    x = np.random.default_rng(1).standard_normal((8, 8))
    s = dwt2_haar(x)
    energy = sum(float(np.sum(b**2)) for b in (s.ll, s.lh, s.hl, s.hh))
    assert abs(energy - np.sum(x**2)) / np.sum(x**2) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_perfect_reconstruction_f64(h2, w2, seed):
    x = np.random.default_rng(seed).standard_normal((2 * h2, 2 * w2))
    assert np.abs(idwt2_haar(dwt2_haar(x)) - x).max() < 1e-10


def test_perfect_reconstruction_f32():
    rng = np.random.default_rng(2)
    x = rng.random((32, 32)).astype(np.float32)
    rec = idwt2_haar(dwt2_haar(x))
    assert rec.dtype == np.float32
    assert np.abs(rec - x).max() < 1e-5


def test_zero_subbands_give_zero_image():
    z = np.zeros((3, 3))
    assert not idwt2_haar(SubbandSet(z, z, z, z)).any()


def test_mismatched_subbands_rejected():
    with pytest.raises(ShapeError):
        SubbandSet(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))


def test_empty_image_rejected():
    with pytest.raises(ShapeError):
        dwt2_haar(np.zeros((0, 4)))


def test_odd_extent_is_edge_padded():
    x = np.arange(15.0).reshape(3, 5)
    s = dwt2_haar(x)
    assert s.ll.shape == (2, 3)
    padded = np.pad(x, ((0, 1), (0, 1)), mode="edge")
    np.testing.assert_allclose(idwt2_haar(s), padded, atol=1e-12)


def test_batched_transform_matches_per_image():
    x = np.random.default_rng(3).standard_normal((2, 3, 4, 6))
    s = dwt2_haar(x)
    np.testing.assert_array_equal(s.hh[1, 2], dwt2_haar(x[1, 2]).hh)


# ------------------------------------------------------------- enhancement


def enhance_oracle(x):
    """LL(LL1) and HH(HH1) reconstructions built step by step from the primitives."""
    b1 = dwt2_haar(x)
    zero1 = np.zeros_like(b1.ll)

    b2 = dwt2_haar(b1.ll)
    z2 = np.zeros_like(b2.ll)
    ll1_only = idwt2_haar(SubbandSet(b2.ll, z2, z2, z2))
    image_a = idwt2_haar(SubbandSet(ll1_only, zero1, zero1, zero1))

    b2 = dwt2_haar(b1.hh)
    hh1_only = idwt2_haar(SubbandSet(z2, z2, z2, b2.hh))
    image_b = idwt2_haar(SubbandSet(zero1, zero1, zero1, hh1_only))

    fused = image_a + image_b
    return (fused - fused.min()) / (fused.max() - fused.min())


def test_enhance_matches_composition_oracle():
    x = np.random.default_rng(4).random((16, 16))
    np.testing.assert_allclose(enhance_image(x), enhance_oracle(x), atol=1e-12)


def test_enhance_constant_image_maps_to_zero():
    out = enhance_image(np.full((8, 8), 0.3))
    assert not out.any()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.sampled_from([4, 8, 12]), st.sampled_from([4, 8, 16])),
              elements=st.floats(-1e3, 1e3)))
def test_enhance_range(x):
    out = enhance_image(x)
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_enhance_pads_and_crops_indivisible_input(caplog):
    x = np.random.default_rng(5).random((10, 14))
    with caplog.at_level("WARNING"):
        out = enhance_image(x)
    assert out.shape == (10, 14)
    assert "padding" in caplog.text


def test_enhance_level_range():
    with pytest.raises(ParameterError):
        enhance_image(np.zeros((8, 8)), levels=4)


def test_grayscale_luminance_and_minmax():
    rgb = np.zeros((1, 1, 3))
    rgb[0, 0] = [1.0, 0.5, 0.25]
    assert to_grayscale(rgb).item() == pytest.approx(0.299 + 0.5 * 0.587 + 0.25 * 0.114)
    np.testing.assert_array_equal(minmax_rescale(np.array([2.0, 4.0, 3.0])), [0.0, 1.0, 0.5])
    assert not minmax_rescale(np.full(3, 5.0)).any()
