import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from landmark_srt.tensor_core import (
    OutOfBoundsError,
    bilinear_sample,
    bilinear_sample_jacobian,
    format_flow,
    format_pf2,
    parse_flow,
    parse_pf2,
    read_pf2,
    sample,
    spatial_gradient,
    write_pf2,
)


def ramp(h, w, a=1.0, b=0.0, c=0.0):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return a * xs + b * ys + c


def test_constant_field():
    f = np.full((8, 8), 7.0)
    assert bilinear_sample(f, (3.25, 4.75)) == 7.0


def test_linear_ramp_exact():
    assert bilinear_sample(ramp(4, 5), (2.5, 0.0)) == pytest.approx(2.5, abs=1e-15)


def test_four_term_formula():
    f = np.random.default_rng(0).random((5, 5))
    # f[row, col]; p = (x=1.3, y=2.7)
    expected = (0.3 * 0.7 * f[3, 2] + 0.7 * 0.7 * f[3, 1]
                + 0.3 * 0.3 * f[2, 2] + 0.7 * 0.3 * f[2, 1])
    assert bilinear_sample(f, (1.3, 2.7)) == pytest.approx(expected, rel=1e-12)


def test_integer_coordinates_reproduce_samples():
    f = np.random.default_rng(1).random((6, 9))
    for r in range(6):
        for c in range(9):
            assert bilinear_sample(f, (c, r)) == f[r, c]


def test_out_of_bounds_signal():
    f = np.zeros((4, 4))
    with pytest.raises(OutOfBoundsError):
        bilinear_sample(f, (3.5, 1.0))
    with pytest.raises(OutOfBoundsError):
        bilinear_sample(f, (1.0, -0.01))
    with pytest.raises(OutOfBoundsError):
        bilinear_sample_jacobian(f, (-1.0, 1.0))


def test_padding_modes():
    f = np.arange(9.0).reshape(3, 3)
    assert sample(f, 5.0, 1.0, padding="border") == f[1, 2]
    assert sample(f, 5.0, 1.0, padding="zeros") == 0.0
    # half a pixel off the right edge: half of the edge value
    assert sample(f, 2.5, 1.0, padding="zeros") == pytest.approx(0.5 * f[1, 2])


@settings(max_examples=200, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
       x=st.floats(0, 6), y=st.floats(0, 4))
def test_exact_on_affine_fields(a, b, c, x, y):
    f = ramp(5, 7, a, b, c)
    assert bilinear_sample(f, (x, y)) == pytest.approx(a * x + b * y + c, abs=1e-9)


def test_jacobian_ramp_and_constant():
    assert bilinear_sample_jacobian(ramp(5, 5), (1.7, 2.2)) == pytest.approx((1.0, 0.0))
    assert bilinear_sample_jacobian(np.full((5, 5), 3.0), (1.7, 2.2)) == (0.0, 0.0)


def central_diff(f, x, y, h=1e-5):
    gx = (bilinear_sample(f, (x + h, y)) - bilinear_sample(f, (x - h, y))) / (2 * h)
    gy = (bilinear_sample(f, (x, y + h)) - bilinear_sample(f, (x, y - h))) / (2 * h)
    return gx, gy


def test_jacobian_matches_finite_differences_1000_pairs():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        h, w = rng.integers(3, 9, size=2)
        f = rng.normal(size=(h, w))
        # stay at least 1e-3 away from cell boundaries
        x = rng.integers(0, w - 1) + rng.uniform(1e-3, 1 - 1e-3)
        y = rng.integers(0, h - 1) + rng.uniform(1e-3, 1 - 1e-3)
        ana = np.array(bilinear_sample_jacobian(f, (x, y)))
        num = np.array(central_diff(f, x, y))
        np.testing.assert_allclose(ana, num, rtol=1e-4, atol=1e-7)


def test_jacobian_cell_boundary_tie_break():
    f = np.zeros((3, 3))
    f[1, 2] = 1.0
    # at x = 1 the cell [1, 2] (containing x + 1e-9) is used
    assert bilinear_sample_jacobian(f, (1.0, 1.0))[0] == 1.0


def test_spatial_gradient_linear_and_constant():
    gx, gy = spatial_gradient(ramp(6, 7, 2.0, 3.0))
    np.testing.assert_allclose(gx[1:-1, 1:-1], 2.0)
    np.testing.assert_allclose(gy[1:-1, 1:-1], 3.0)
    gx, gy = spatial_gradient(np.full((4, 4), 9.0))
    assert not gx.any() and not gy.any()


def test_spatial_gradient_direct_formula():
    f = np.random.default_rng(3).random((7, 7))
    gx, gy = spatial_gradient(f)
    for r in range(1, 6):
        for c in range(1, 6):
            assert gx[r, c] == (f[r, c + 1] - f[r, c - 1]) / 2
            assert gy[r, c] == (f[r + 1, c] - f[r - 1, c]) / 2
    # replicated border
    assert gx[3, 0] == (f[3, 1] - f[3, 0]) / 2


def test_spatial_gradient_too_small():
    with pytest.raises(ValueError):
        spatial_gradient(np.zeros((2, 5)))


def test_pf2_round_trip_bit_exact(tmp_path):
    f = np.random.default_rng(4).normal(size=(5, 3)) * 1e3
    f[0, 0] = 1 / 3
    text = format_pf2(f)
    assert text.splitlines()[0] == "PF2 3 5"
    back = parse_pf2(text.splitlines())
    assert np.array_equal(back, f)
    write_pf2(tmp_path / "a.pf2", f)
    assert np.array_equal(read_pf2(tmp_path / "a.pf2"), f)


def test_flow_round_trip():
    rng = np.random.default_rng(5)
    u, v = rng.normal(size=(2, 4, 6))
    uu, vv = parse_flow(format_flow(u, v))
    assert np.array_equal(u, uu) and np.array_equal(v, vv)
