import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from r2l.bev import GridSpec, project_polar, rotate_cloud
from r2l.worldgen import Pose2D, PointCloud

SPEC = GridSpec(w_azi=225, h_rng=50, m=80.0)


def _cloud(points):
    return PointCloud(np.asarray(points, dtype=np.float64), "lidar", Pose2D(0, 0, 0))


def reference_grid(points, spec: GridSpec) -> np.ndarray:
    """Point-by-point evaluation of the polar mapping."""
    grid = np.zeros((spec.h_rng, spec.w_azi), dtype=np.int64)
    for x, y, _ in points:
        r = math.sqrt(x * x + y * y)
        if r >= spec.m:
            continue
        t = math.atan2(y, x)
        if spec.fov >= 2 * math.pi:
            col = math.floor(0.5 * (1.0 - t / math.pi) * spec.w_azi) % spec.w_azi
        else:
            half = spec.fov / 2
            if not -half <= t <= half:
                continue
            col = min(max(math.floor(0.5 * (1.0 - t / half) * spec.w_azi), 0), spec.w_azi - 1)
        grid[math.floor(r / spec.m * spec.h_rng), col] += 1
    return grid


def test_hand_evaluated_cells():
    g = project_polar(_cloud([[40.0, 0.0, 1.0]]), SPEC).cells
    assert g[25, 112] == 1 and g.sum() == 1
    g = project_polar(_cloud([[0.0, -40.0, 0.0]]), SPEC).cells
    assert g[25, 168] == 1 and g.sum() == 1


def test_out_of_range_discarded():
    g = project_polar(_cloud([[85.0, 0.0, 0.0], [80.0, 0.0, 0.0], [10.0, 0.0, 0.0]]), SPEC).cells
    assert g.sum() == 1


def test_bearing_minus_pi_wraps_to_column_zero():
    # atan2 returns +pi on the negative x axis; u = 0 -> column 0
    g = project_polar(_cloud([[-10.0, 0.0, 0.0]]), SPEC).cells
    assert g[:, 0].sum() == 1


def test_empty_cloud():
    assert project_polar(_cloud(np.zeros((0, 3))), SPEC).cells.sum() == 0


@pytest.mark.parametrize("spec", [SPEC, GridSpec(100, 100, 80.0, 2 * math.pi / 3), GridSpec(7, 3, 10.0)])
def test_matches_reference_on_random_points(spec):
    pts = np.random.default_rng(0).uniform(-90, 90, size=(100_000 if spec is SPEC else 20_000, 3))
    t0 = time.perf_counter()
    got = project_polar(_cloud(pts), spec).cells
    assert time.perf_counter() - t0 < 5.0
    assert np.array_equal(got, reference_grid(pts, spec))


def _bin_centre_cloud(rng, n, spec):
    cols = rng.integers(0, spec.w_azi, n)
    rows = rng.integers(0, spec.h_rng, n)
    u = cols + 0.5
    theta = math.pi * (1.0 - 2.0 * u / spec.w_azi)
    r = (rows + 0.5) / spec.h_rng * spec.m
    return np.stack([r * np.cos(theta), r * np.sin(theta), rng.normal(size=n)], axis=1)


@given(st.integers(0, 224), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_rotation_is_column_shift(k, seed):
    pts = _bin_centre_cloud(np.random.default_rng(seed), 300, SPEC)
    base = project_polar(_cloud(pts), SPEC).cells
    rotated = project_polar(rotate_cloud(_cloud(pts), k * 2 * math.pi / SPEC.w_azi), SPEC).cells
    # a counter-clockwise turn lowers u, i.e. moves mass to lower columns
    assert np.array_equal(rotated, np.roll(base, -k, axis=1))


@given(st.floats(-5, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_z_invariance_and_mass(dz, seed):
    pts = np.random.default_rng(seed).uniform(-100, 100, size=(500, 3))
    shifted = pts.copy()
    shifted[:, 2] += dz
    a = project_polar(_cloud(pts), SPEC).cells
    assert np.array_equal(a, project_polar(_cloud(shifted), SPEC).cells)
    assert a.sum() == int((np.hypot(pts[:, 0], pts[:, 1]) < 80).sum())


@given(st.floats(-math.pi, math.pi), st.floats(0, 79.9), st.floats(0, 79.9))
def test_range_monotone(theta, r1, r2):
    lo, hi = sorted((r1, r2))
    a = project_polar(_cloud([[lo * math.cos(theta), lo * math.sin(theta), 0]]), SPEC).cells
    b = project_polar(_cloud([[hi * math.cos(theta), hi * math.sin(theta), 0]]), SPEC).cells
    assert np.argwhere(a)[0][0] <= np.argwhere(b)[0][0]


def test_rotate_examples():
    c = _cloud([[1.0, 0.0, 3.0]])
    assert np.array_equal(rotate_cloud(c, 0.0).points, c.points)
    assert np.allclose(rotate_cloud(c, math.pi / 2).points, [[0.0, 1.0, 3.0]], atol=1e-12, rtol=0)
    pts = np.random.default_rng(2).normal(size=(50, 3)) * 30
    twice = rotate_cloud(rotate_cloud(_cloud(pts), math.pi), math.pi)
    assert np.abs(twice.points - pts).max() < 1e-12
    assert rotate_cloud(c, 0.3).pose.yaw == pytest.approx(-0.3)


def test_limited_fov_discards_and_spans_all_columns():
    spec = GridSpec(100, 100, 80.0, 2 * math.pi / 3)
    theta = np.linspace(-math.pi / 3, math.pi / 3, 5000)
    pts = np.stack([10 * np.cos(theta), 10 * np.sin(theta), 0 * theta], axis=1)
    g = project_polar(_cloud(pts), spec).cells
    assert g.sum() == 5000
    assert (g.sum(0) > 0).all()
    behind = project_polar(_cloud([[-10.0, 0.0, 0.0]]), spec).cells
    assert behind.sum() == 0


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(0, 10)
    with pytest.raises(ValueError):
        GridSpec(10, 10, fov=7.0)
    with pytest.raises(ValueError):
        GridSpec(10, 10, m=0.0)
    assert SPEC.shape == (50, 225)
