"""Occupancy cache semantics: decayed running max, thresholding, addressing."""

import numpy as np
import pytest

from radfield.occupancy import (CONSOLIDATE_CONDITIONS, DECAY, UPDATE_EVERY,
                                WARMUP_STEPS, OccupancyGrid)
from radfield.synth import AnalyticField, HEAD_CENTER, HEAD_RADIUS


def slab_density(axis, lo, hi, value=5.0):
    def fn(pts):
        inside = (pts[:, axis] >= lo) & (pts[:, axis] < hi)
        return np.where(inside, value, 0.0).astype(np.float32)
    return fn


def test_single_update_equals_density_at_centers():
    grid = OccupancyGrid(resolution=8, tau=0.01)
    fn = slab_density(0, 0.0, 0.5, value=3.0)
    grid.update(fn, rng=None)
    centers = grid._voxel_centers_jittered(None)
    expect = fn(centers).reshape(8, 8, 8)
    np.testing.assert_array_equal(grid.values, expect)
    np.testing.assert_array_equal(grid.bitfield, expect > 0.01)


def test_two_updates_take_decayed_pointwise_max():
    grid = OccupancyGrid(resolution=8)
    a = slab_density(0, 0.0, 0.5, value=2.0)
    b = slab_density(1, 0.5, 1.0, value=7.0)
    grid.update(a, rng=None)
    grid.update(b, rng=None)
    centers = grid._voxel_centers_jittered(None)
    expect = np.maximum(DECAY * a(centers).astype(np.float32),
                        b(centers)).reshape(8, 8, 8)
    np.testing.assert_array_equal(grid.values, expect)


def test_update_floors_at_decayed_previous():
    grid = OccupancyGrid(resolution=8)
    grid.update(slab_density(2, 0.0, 1.0, value=4.0), rng=None)
    before = grid.values.copy()
    zero = lambda p: np.zeros(p.shape[0], dtype=np.float32)
    grid.update(zero, rng=None)
    np.testing.assert_allclose(grid.values, DECAY * before, rtol=1e-6)
    assert grid.bitfield.all()   # 4.0 * 0.95 is still far above tau


def test_stale_mass_decays_below_threshold():
    grid = OccupancyGrid(resolution=4)
    grid.update(lambda p: np.full(p.shape[0], 5.0, dtype=np.float32), rng=None)
    zero = lambda p: np.zeros(p.shape[0], dtype=np.float32)
    for _ in range(200):
        grid.update(zero, rng=None)
    assert not grid.bitfield.any()


def test_recompute_is_pure_condition_max():
    grid = OccupancyGrid(resolution=8)
    a = slab_density(0, 0.0, 0.5, value=2.0)
    b = slab_density(1, 0.5, 1.0, value=7.0)
    grid.recompute([a, b], rng=None)
    centers = grid._voxel_centers_jittered(None)
    expect = np.maximum(a(centers), b(centers)).reshape(8, 8, 8)
    np.testing.assert_array_equal(grid.values, expect)


def test_recompute_discards_stale_mass():
    grid = OccupancyGrid(resolution=8)
    grid.update(slab_density(0, 0.0, 1.0, value=9.0), rng=None)
    assert grid.fraction_occupied() == 1.0
    grid.recompute([slab_density(0, 0.0, 0.25, value=9.0)], rng=None)
    assert grid.fraction_occupied() == pytest.approx(0.25)


def test_threshold_is_strict():
    grid = OccupancyGrid(resolution=4, tau=0.01)
    grid.update(lambda p: np.full(p.shape[0], 0.01, dtype=np.float32), rng=None)
    assert not grid.bitfield.any()
    grid.update(lambda p: np.full(p.shape[0], 0.010001, dtype=np.float32),
                rng=None)
    assert grid.bitfield.all()


def test_voxel_of_boundaries():
    grid = OccupancyGrid(resolution=64)
    pts = np.array([[0.0, 0.0, 0.0],
                    [0.5, 0.5, 0.5],
                    [1.0, 1.0, 1.0],
                    [0.999999, 0.0, 0.5]])
    v = grid.voxel_of(pts)
    assert v[0].tolist() == [0, 0, 0]
    assert v[1].tolist() == [32, 32, 32]
    assert v[2].tolist() == [63, 63, 63]   # 1.0 clamps into the last voxel
    assert v[3].tolist() == [63, 0, 32]


def test_occupied_at_vectorizes_over_leading_axes():
    grid = OccupancyGrid(resolution=8)
    grid.update(slab_density(0, 0.0, 0.5, value=5.0), rng=None)
    pts = np.random.default_rng(0).random((6, 7, 3))
    flags = grid.occupied_at(pts)
    assert flags.shape == (6, 7)
    np.testing.assert_array_equal(flags, pts[..., 0] < 0.5)


def test_jittered_update_covers_sphere():
    field = AnalyticField(mouth=0.0, eye=0.0)
    grid = OccupancyGrid(resolution=32)
    rng = np.random.default_rng(1)
    for _ in range(4):
        grid.update(lambda p: field(p)[0].astype(np.float32), rng=rng)
    assert grid.occupied_at(HEAD_CENTER[None, :])[0]
    assert not grid.occupied_at(np.array([[0.02, 0.02, 0.02]]))[0]
    # coverage close to the analytic sphere volume, padded by voxel dilation
    vol = 4.0 / 3.0 * np.pi * HEAD_RADIUS ** 3
    assert vol * 0.8 < grid.fraction_occupied() < vol * 1.6


def test_cadence_constants():
    assert UPDATE_EVERY == 16
    assert WARMUP_STEPS == 500
    assert CONSOLIDATE_CONDITIONS == 32
