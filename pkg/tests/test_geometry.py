import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoflow.errors import DimensionError, DomainError, ParameterError
from geoflow.geometry import (
    ConditioningInstance,
    PointCloud,
    SensorSet,
    build_conditioning,
    fill_distance,
    normalize_coords,
    quasi_uniform_sensors,
    remask,
    sample_sensors,
    separation_radius,
    uniform_grid,
)
from geoflow.studies import grid_fill_distances, loglog_slope


def line_cloud(m):
    return PointCloud(np.linspace(0, 1, m)[:, None])


class TestSampleSensors:
    def test_full_fraction(self):
        s = sample_sensors(line_cloud(10), 1.0, seed=1)
        np.testing.assert_array_equal(s.indices, np.arange(10))
        assert s.mask.sum() == 10

    def test_quarter_of_eight(self):
        a = sample_sensors(line_cloud(8), 0.25, seed=4)
        b = sample_sensors(line_cloud(8), 0.25, seed=4)
        assert len(a) == 2
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_seeds_differ(self):
        cloud = line_cloud(100)
        sets = {tuple(sample_sensors(cloud, 0.5, seed=s).indices) for s in range(20)}
        assert len(sets) == 20

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.01])
    def test_bad_fraction(self, f):
        with pytest.raises(ParameterError):
            sample_sensors(line_cloud(10), f, seed=0)

    @given(st.integers(1, 300), st.floats(0.01, 1.0))
    def test_cardinality_and_mask(self, m, f):
        s = sample_sensors(line_cloud(m), f, seed=m)
        assert len(s) == math.ceil(f * m)
        assert set(np.flatnonzero(s.mask)) == set(s.indices.tolist())


class TestFillDistance:
    def test_identical_sets(self):
        X = np.random.default_rng(0).uniform(size=(30, 2))
        assert fill_distance(X, X) == 0.0

    def test_midpoint(self):
        assert fill_distance(np.array([[0.0], [1.0]]), np.linspace(0, 1, 101)[:, None]) == pytest.approx(0.5)

    @pytest.mark.parametrize("m", [3, 5, 11, 17])
    def test_uniform_line(self, m):
        E = np.linspace(0, 1, 20 * (m - 1) + 1)[:, None]
        assert fill_distance(uniform_grid(m, 1), E) == pytest.approx(1 / (2 * (m - 1)), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            fill_distance(np.zeros((0, 2)), np.zeros((3, 2)))

    @pytest.mark.parametrize("dim,sides", [(1, [16, 64, 256, 1024]), (2, [4, 8, 16, 32]), (3, [3, 4, 6, 10])])
    def test_grid_rate(self, dim, sides):
        counts, hs = grid_fill_distances(dim, sides)
        assert abs(loglog_slope(counts, hs) + 1 / dim) <= 0.15


class TestSeparation:
    def test_two_points(self):
        assert separation_radius(np.array([[0.0], [1.0]])) == 0.5

    def test_grid(self):
        assert separation_radius(uniform_grid(11, 1)) == pytest.approx(0.05)

    def test_brute_force(self):
        X = np.random.default_rng(2).uniform(size=(60, 2))
        brute = min(np.linalg.norm(X[i] - X[j]) for i in range(60) for j in range(i + 1, 60))
        assert separation_radius(X) == 0.5 * brute

    def test_single_point(self):
        with pytest.raises(DomainError):
            separation_radius(np.zeros((1, 2)))

    @pytest.mark.parametrize("n", [4, 8, 16, 32])
    def test_grid_quasi_uniform(self, n):
        X = uniform_grid(n, 2)
        E = uniform_grid(4 * (n - 1) + 1, 2)
        assert fill_distance(X, E) / separation_radius(X) <= 4

    def test_fps_quasi_uniform(self):
        cloud = PointCloud(np.random.default_rng(0).uniform(-1, 1, size=(2000, 2)))
        for k in (16, 64, 256):
            s = quasi_uniform_sensors(cloud, k)
            X = cloud.coords[s.indices]
            assert fill_distance(X, cloud.coords) / separation_radius(X) <= 4


class TestConditioning:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.cloud = PointCloud(rng.uniform(-1, 1, (50, 2)))
        self.u = rng.normal(size=(50, 1))

    def test_noiseless_full(self):
        inst = build_conditioning(self.cloud, sample_sensors(self.cloud, 1.0, 0), self.u, 0.0, 0)
        np.testing.assert_array_equal(inst.obs, self.u)

    def test_empty_sensors(self):
        inst = build_conditioning(self.cloud, SensorSet.from_indices([], 50), self.u, 0.1, 0)
        assert np.all(inst.obs == 0)

    def test_half_normal_mean(self):
        cloud = PointCloud(np.zeros((10_000, 2)))
        u = np.zeros((10_000, 1))
        inst = build_conditioning(cloud, sample_sensors(cloud, 1.0, 0), u, 0.01, seed=9)
        assert np.mean(np.abs(inst.obs - u)) == pytest.approx(0.01 * math.sqrt(2 / math.pi), rel=0.03)

    def test_channel_scale(self):
        cloud = PointCloud(np.zeros((5000, 2)))
        inst = build_conditioning(cloud, sample_sensors(cloud, 1.0, 0), np.zeros((5000, 2)), 0.1, 1, channel_std=[1.0, 10.0])
        assert inst.obs[:, 1].std() / inst.obs[:, 0].std() == pytest.approx(10.0, rel=0.05)

    def test_zero_outside_mask(self):
        s = sample_sensors(self.cloud, 0.3, 2)
        inst = build_conditioning(self.cloud, s, self.u, 0.05, 3)
        assert np.all(inst.obs[s.mask == 0] == 0)

    def test_remask_idempotent(self):
        s = sample_sensors(self.cloud, 0.5, 2)
        inst = build_conditioning(self.cloud, s, self.u, 0.05, 3)
        np.testing.assert_array_equal(remask(inst, s).obs, inst.obs)

    def test_deterministic(self):
        s = sample_sensors(self.cloud, 0.5, 2)
        a = build_conditioning(self.cloud, s, self.u, 0.05, 3)
        b = build_conditioning(self.cloud, s, self.u, 0.05, 3)
        np.testing.assert_array_equal(a.obs, b.obs)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            build_conditioning(self.cloud, sample_sensors(self.cloud, 1.0, 0), self.u[:10], 0.0, 0)
        with pytest.raises(DimensionError):
            ConditioningInstance(np.zeros((4, 2)), np.ones(3), np.zeros((4, 1)))

    def test_bad_dimension(self):
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((3, 4)))


@settings(max_examples=30)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40))
def test_normalize_coords_unit_box(xs):
    pts = np.array(xs).reshape(-1, 1)
    out = normalize_coords(pts, pts.min(0), pts.max(0))
    assert np.all(out >= -1 - 1e-12) and np.all(out <= 1 + 1e-12)
