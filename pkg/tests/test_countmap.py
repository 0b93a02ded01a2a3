import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from redcount.countmap import (CountGeometry, DotAnnotation, build_gaussian_target, build_target, load_count_map_csv,
                               output_shape, pad_image, recover_count, redundancy_factor, save_count_map_csv,
                               save_count_map_png, subsample_stride, window_sums)


def brute_force_target(ann, r):
    """Count points in every r x r window, straight from the definition."""
    h, w = ann.height + r - 1, ann.width + r - 1
    out = np.zeros((h, w), dtype=np.int64)
    for x, y in ann.points:
        # padded coordinates are (x + r - 1, y + r - 1); window (i, j) covers rows i..i+r-1
        py, px = y + r - 1, x + r - 1
        out[max(0, py - r + 1):py + 1, max(0, px - r + 1):px + 1] += 1
    return out


@st.composite
def annotations(draw, max_side=64):
    w = draw(st.integers(1, max_side))
    h = draw(st.integers(1, max_side))
    n = draw(st.integers(0, 40))
    xs = draw(st.lists(st.integers(0, w - 1), min_size=n, max_size=n))
    ys = draw(st.lists(st.integers(0, h - 1), min_size=n, max_size=n))
    return DotAnnotation(width=w, height=h, points=np.array(list(zip(xs, ys)), dtype=np.int64).reshape(-1, 2))


def test_single_point_every_window():
    ann = DotAnnotation(width=5, height=5, points=[(2, 2)])
    t = build_target(ann, CountGeometry(r=4))
    assert t.shape == (8, 8)
    assert t.sum() == 16
    assert set(np.unique(t)) == {0, 1}
    # windows covering pixel (2,2) start at padded rows/cols 2..5
    assert t[2:6, 2:6].all() and t.sum() == t[2:6, 2:6].sum()


def test_empty_annotation_gives_zero_map():
    t = build_target(DotAnnotation(10, 7), CountGeometry(r=8))
    assert t.shape == (14, 17) and not t.any()
    assert recover_count(t, CountGeometry(r=8)) == 0


def test_corner_points_are_counted_r_squared_times():
    ann = DotAnnotation(width=6, height=4, points=[(0, 0), (5, 3)])
    t = build_target(ann, CountGeometry(r=32))
    assert t.sum() == 2 * 32 * 32


@settings(max_examples=60, deadline=None)
@given(annotations(), st.sampled_from([1, 2, 4, 8, 16, 32]))
def test_target_sum_identity(ann, r):
    g = CountGeometry(r)
    t = build_target(ann, g)
    assert t.dtype.kind == "i"
    assert int(t.sum()) == r * r * ann.count
    got = recover_count(t, g)
    assert got == ann.count and isinstance(got, int)


@settings(max_examples=60, deadline=None)
@given(annotations(max_side=24), st.sampled_from([2, 4, 8]))
def test_target_matches_brute_force(ann, r):
    np.testing.assert_array_equal(build_target(ann, CountGeometry(r)), brute_force_target(ann, r))


@settings(max_examples=60, deadline=None)
@given(annotations(max_side=40), st.sampled_from([(8, 1), (8, 2), (8, 4), (8, 8), (16, 4), (32, 16), (32, 32)]))
def test_strided_recovery_exact(ann, rs):
    # with offset-0 subsampling every point lies in exactly (r/s)^2 kept windows
    r, s = rs
    g = CountGeometry(r, s)
    t = build_target(ann, g)
    assert t.shape == output_shape((ann.height, ann.width), g)
    assert recover_count(t, g) == ann.count


def test_redundancy_factor():
    assert redundancy_factor(CountGeometry(32, 1)) == 1024
    assert redundancy_factor(CountGeometry(32, 8)) == 16
    assert redundancy_factor(CountGeometry(32, 32)) == 1


def test_stride_must_divide_r():
    with pytest.raises(ValueError, match="does not divide"):
        CountGeometry(32, 5)
    with pytest.raises(ValueError):
        CountGeometry(0, 1)


def test_recover_count_float_map_and_negatives():
    g = CountGeometry(2)
    assert recover_count(np.array([[1.0, 1.0], [1.0, 1.0]]), g) == pytest.approx(1.0)
    assert recover_count(np.array([[-4.0]]), g) == pytest.approx(-1.0)  # no clamping


def test_non_divisible_integer_sum_gives_fraction():
    assert recover_count(np.array([[3]]), CountGeometry(2)) == 0.75


def test_output_shape():
    g = CountGeometry(32)
    assert output_shape(256, g) == 287
    assert output_shape((64, 96), g) == (95, 127)
    assert output_shape(256, CountGeometry(32, 8)) == 36


def test_pad_image_2d_and_3d():
    g = CountGeometry(4)
    assert pad_image(np.ones((5, 6)), g).shape == (11, 12)
    p = pad_image(np.ones((3, 5, 6)), g)
    assert p.shape == (3, 11, 12) and p.sum() == 90
    with pytest.raises(ValueError):
        pad_image(np.ones(3), g)


def test_window_sums_against_loops(rng):
    a = rng.integers(0, 5, size=(9, 7))
    r = 3
    expect = np.array([[a[i:i + r, j:j + r].sum() for j in range(5)] for i in range(7)])
    np.testing.assert_array_equal(window_sums(a, r), expect)


def test_subsample_offset_zero():
    m = np.arange(36).reshape(6, 6)
    np.testing.assert_array_equal(subsample_stride(m, 4), [[0, 4], [24, 28]])


def test_out_of_bounds_points_rejected():
    with pytest.raises(ValueError, match="outside"):
        DotAnnotation(width=4, height=4, points=[(4, 0)])


def test_dot_map_round_trip_with_duplicates():
    ann = DotAnnotation(width=5, height=3, points=[(1, 1), (1, 1), (4, 2)])
    dots = ann.dot_map()
    assert dots[1, 1] == 2 and dots.sum() == 3
    back = DotAnnotation.from_dot_map(dots)
    assert back.count == 3
    assert ann.duplicates() == [(1, 1, 2)]


def test_dot_map_with_174_dots():
    rng = np.random.default_rng(4)
    dots = np.zeros(256 * 256, dtype=np.int64)
    dots[rng.choice(256 * 256, size=174, replace=False)] = 1
    assert DotAnnotation.from_dot_map(dots.reshape(256, 256)).count == 174


def test_csv_round_trip(tmp_path):
    ann = DotAnnotation(width=9, height=4, points=[(0, 0), (8, 3), (2, 1)])
    ann.to_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "x,y"
    back = DotAnnotation.from_csv(tmp_path / "a.csv", 9, 4)
    np.testing.assert_array_equal(back.points, ann.points)


def test_gaussian_target_mass():
    ann = DotAnnotation(width=64, height=64, points=[(32, 32), (20, 40)])
    d = build_gaussian_target(ann, sigma=2.0)
    assert d.sum() == pytest.approx(2.0, abs=1e-6)
    # a corner point keeps the one-sided mass of the separable kernel, squared
    edge = build_gaussian_target(DotAnnotation(16, 16, [(0, 0)]), sigma=2.0)
    x = np.arange(-8, 9)
    k = np.exp(-x**2 / 8.0)
    k /= k.sum()
    assert edge.sum() == pytest.approx(k[8:].sum() ** 2, rel=1e-9)


def test_count_map_exports(tmp_path, rng):
    m = rng.uniform(0, 3, size=(7, 5))
    save_count_map_csv(m, tmp_path / "m.csv")
    np.testing.assert_allclose(load_count_map_csv(tmp_path / "m.csv"), m, rtol=1e-8)
    meta = save_count_map_png(m, tmp_path / "m.png")
    px = np.array(Image.open(tmp_path / "m.png"))
    assert px.shape == (7, 5) and px.dtype == np.uint16
    assert json.loads((tmp_path / "m.png.json").read_text()) == meta
    np.testing.assert_allclose(px * meta["scale"], m, atol=meta["scale"])
