import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiepose.errors import InvalidInputError
from hiepose.flow import (FlowVector, PyramidParams, as_gray, gaussian_pyramid,
                          lucas_kanade_at_points, propagate_pose)
from hiepose.synth import texture

from helpers import make_pose
from oracles import conv_decimate


def shifted_pair(seed, dx, dy, size=128, margin=16):
    """``next`` equals ``prev`` moved by (dx, dy) pixels."""
    big = texture(np.random.default_rng(seed), size + 2 * margin, size + 2 * margin)
    prev = big[margin:margin + size, margin:margin + size]
    nxt = big[margin - dy:margin - dy + size, margin - dx:margin - dx + size]
    return prev, nxt


def interior_grid(size=128, border=24, step=8):
    g = np.arange(border, size - border + 1, step, dtype=np.float64)
    xx, yy = np.meshgrid(g, g)
    return np.column_stack([xx.ravel(), yy.ravel()])


# -- pyramid ---------------------------------------------------------------------

def test_pyramid_single_level_is_input(rng):
    img = rng.random((9, 7))
    pyr = gaussian_pyramid(img, 1)
    assert len(pyr) == 1
    np.testing.assert_array_equal(pyr[0], img)


def test_pyramid_constant_image():
    for level in gaussian_pyramid(np.full((37, 21), 0.3), 4):
        np.testing.assert_allclose(level, 0.3, atol=1e-9)


def test_pyramid_ramp_matches_direct_convolution():
    img = np.add.outer(np.arange(16.0), 2 * np.arange(16.0)) / 48.0
    pyr = gaussian_pyramid(img, 3)
    assert [p.shape for p in pyr] == [(16, 16), (8, 8), (4, 4)]
    np.testing.assert_allclose(pyr[1], conv_decimate(img), atol=1e-12)
    np.testing.assert_allclose(pyr[2], conv_decimate(conv_decimate(img)), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 70), st.integers(4, 70), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_pyramid_dims_and_range(h, w, levels, seed):
    img = np.random.default_rng(seed).random((h, w))
    pyr = gaussian_pyramid(img, levels)
    for k, p in enumerate(pyr):
        hh, ww = h, w
        for _ in range(k):
            hh, ww = hh // 2, ww // 2
        assert p.shape == (hh, ww)
        assert p.min() >= 0.0 and p.max() <= 1.0


def test_pyramid_too_small():
    with pytest.raises(InvalidInputError):
        gaussian_pyramid(np.zeros((3, 40)), 3)
    with pytest.raises(InvalidInputError):
        gaussian_pyramid(np.zeros((8, 8)), 0)


def test_as_gray_luma():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0] = 1.0
    np.testing.assert_allclose(as_gray(rgb), 0.299)
    with pytest.raises(InvalidInputError):
        as_gray(np.full((2, 2), np.nan))


# -- Lucas-Kanade -------------------------------------------------------------------

def test_lk_zero_motion():
    prev, _ = shifted_pair(1, 0, 0)
    params = PyramidParams()
    flows = lucas_kanade_at_points(prev, prev, interior_grid(), params)
    valid = [f for f in flows if f.valid]
    assert len(valid) > 0.9 * len(flows)
    for f in valid:
        assert abs(f.dx) <= params.epsilon and abs(f.dy) <= params.epsilon


def test_lk_integer_translation():
    prev, nxt = shifted_pair(2, 3, -2)
    flows = lucas_kanade_at_points(prev, nxt, interior_grid())
    valid = [f for f in flows if f.valid]
    assert len(valid) > 0.9 * len(flows)
    err = [np.hypot(f.dx - 3, f.dy + 2) for f in valid]
    assert np.mean(np.array(err) < 0.1) >= 0.95


def test_lk_textureless_region_invalid():
    img = np.full((64, 64), 0.5)
    flows = lucas_kanade_at_points(img, img, [(32.0, 32.0)])
    assert flows == [FlowVector(0.0, 0.0, False)]


def test_lk_point_outside_invalid():
    prev, nxt = shifted_pair(3, 1, 1)
    flows = lucas_kanade_at_points(prev, nxt, [(-5.0, 10.0), (500.0, 3.0)])
    assert not any(f.valid for f in flows)


def test_lk_size_mismatch():
    with pytest.raises(InvalidInputError):
        lucas_kanade_at_points(np.zeros((32, 32)), np.zeros((32, 40)), [(1.0, 1.0)])


def test_lk_empty_points():
    img = np.zeros((32, 32))
    assert lucas_kanade_at_points(img, img, np.zeros((0, 2))) == []


@pytest.mark.parametrize("dx,dy", [(4, 1), (-2, 5), (6, -6)])
def test_lk_antisymmetric(dx, dy):
    prev, nxt = shifted_pair(4, dx, dy)
    pts = interior_grid(step=16)
    fwd = lucas_kanade_at_points(prev, nxt, pts)
    back_pts = pts + [dx, dy]
    bwd = lucas_kanade_at_points(nxt, prev, back_pts)
    n_ok = 0
    for f, b in zip(fwd, bwd):
        if f.valid and b.valid:
            n_ok += 1
            assert abs(f.dx + b.dx) < 0.2 and abs(f.dy + b.dy) < 0.2
    assert n_ok > 0.8 * len(pts)


def test_lk_shared_pyramids_give_same_answer():
    prev, nxt = shifted_pair(5, 2, 2)
    params = PyramidParams()
    pts = interior_grid(step=24)
    a = lucas_kanade_at_points(prev, nxt, pts, params)
    b = lucas_kanade_at_points(None, None, pts, params,
                               gaussian_pyramid(prev, 3), gaussian_pyramid(nxt, 3))
    assert a == b


def test_pyramid_params_validation():
    with pytest.raises(InvalidInputError):
        PyramidParams(levels=0)
    with pytest.raises(InvalidInputError):
        PyramidParams(epsilon=0)


# -- propagation ------------------------------------------------------------------------

def test_propagate_zero_and_uniform_flow():
    p = make_pose([[1, 2], [3, 4], [5, 6]], joint_score=0.8)
    same = propagate_pose(p, [FlowVector(0.0, 0.0, True)] * 3)
    np.testing.assert_array_equal(same.keypoints, p.keypoints)
    moved = propagate_pose(p, [FlowVector(5.0, 5.0, True)] * 3)
    np.testing.assert_array_equal(moved.xy, p.xy + 5)
    np.testing.assert_array_equal(moved.scores, p.scores)


def test_propagate_mixed_validity():
    p = make_pose([[1, 2], [3, 4]], joint_score=0.8)
    out = propagate_pose(p, [FlowVector(1.0, -1.0, True), FlowVector(9.0, 9.0, False)])
    np.testing.assert_array_equal(out.keypoints, [[2, 1, 0.8], [3, 4, 0.0]])
    kept = propagate_pose(p, [FlowVector(1.0, -1.0, True), FlowVector(9.0, 9.0, False)], 0.5)
    assert kept.scores[1] == pytest.approx(0.4)


def test_propagate_length_mismatch():
    with pytest.raises(InvalidInputError):
        propagate_pose(make_pose([[0, 0]]), [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=3),
       st.lists(st.booleans(), min_size=3, max_size=3))
def test_propagate_forward_then_back_is_identity(deltas, valid):
    p = make_pose([[10, 20], [-4, 7.5], [100, 0.25]])
    fwd = [FlowVector(dx, dy, v) for (dx, dy), v in zip(deltas, valid)]
    bwd = [FlowVector(-dx, -dy, v) for (dx, dy), v in zip(deltas, valid)]
    out = propagate_pose(propagate_pose(p, fwd), bwd)
    for j, v in enumerate(valid):
        if v:
            np.testing.assert_allclose(out.xy[j], p.xy[j], atol=1e-9)
