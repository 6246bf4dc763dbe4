#!/usr/bin/env python3
"""
Test suite for voxel downsampling
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from detector_errors import ParameterError
from downsampler import (
    DEFAULT_BANDS, BandSpec, band_counts, downsample_distance_aware, downsample_uniform, horizontal_range,
    voxel_keys,
)
from pointcloud_io import PointCloud


def _uniform_disk(seed, count=40_000, radius=60.0):
    """수평 면적 기준 균일 밀도의 원판 모양 클라우드"""
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(size=count))
    phi = rng.uniform(-np.pi, np.pi, count)
    positions = np.column_stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(-2.0, 2.0, count)])
    return PointCloud.from_arrays(positions, rng.uniform(size=count))


class TestBandSpec:
    """BandSpec 파싱/검증 테스트"""

    def test_parse_default(self):
        bands = BandSpec.parse(DEFAULT_BANDS)
        assert bands.edges == [0.8, 0.65, 0.5]
        assert str(bands) == DEFAULT_BANDS
        assert bands.lower_bounds() == [0.0, 20.0, 40.0]

    def test_assign(self):
        bands = BandSpec.parse(DEFAULT_BANDS)
        assert bands.assign(np.array([0.0, 10.0, 19.99, 20.0, 39.9, 40.0, 50.0])).tolist() == [0, 0, 0, 1, 1, 2, 2]

    @pytest.mark.parametrize("text", ["40:0.8,20:0.5", "20:0.5,inf:0.8", "20:0", "20-0.8", "a:0.8"])
    def test_invalid(self, text):
        with pytest.raises(ParameterError):
            BandSpec.parse(text)


class TestUniform:
    """균일 voxel 다운샘플링 테스트"""

    def test_single_point_unchanged(self):
        cloud = PointCloud([[1.2, -3.4, 0.5, 0.7]])
        assert np.array_equal(downsample_uniform(cloud, 0.8).data, cloud.data)

    def test_centroid(self):
        cloud = PointCloud([[0.0, 0.0, 0.0, 0.2], [0.1, 0.0, 0.0, 0.4]])
        reduced = downsample_uniform(cloud, 1.0)
        assert len(reduced) == 1
        assert reduced.data[0].tolist() == pytest.approx([0.05, 0.0, 0.0, 0.3])

    def test_size_matches_distinct_voxels(self):
        rng = np.random.default_rng(0)
        cloud = PointCloud.from_arrays(rng.uniform(-20, 20, (10_000, 3)), rng.uniform(size=10_000))
        keys = {tuple(k) for k in voxel_keys(cloud.positions, 0.8).tolist()}
        reduced = downsample_uniform(cloud, 0.8)
        assert len(reduced) == len(keys)

    def test_output_order_and_containment(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud.from_arrays(rng.uniform(-5, 5, (3000, 3)), rng.uniform(size=3000))
        reduced = downsample_uniform(cloud, 0.5)
        keys = voxel_keys(reduced.positions, 0.5)
        assert len({tuple(k) for k in keys.tolist()}) == len(reduced)
        assert np.array_equal(np.lexsort(keys.T[::-1]), np.arange(len(reduced)))

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        cloud = PointCloud.from_arrays(rng.uniform(-5, 5, (3000, 3)), rng.uniform(size=3000))
        once = downsample_uniform(cloud, 0.5)
        assert np.array_equal(downsample_uniform(once, 0.5).data, once.data)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud.from_arrays(rng.uniform(-5, 5, (2000, 3)), rng.uniform(size=2000))
        shuffled = cloud.subset(rng.permutation(len(cloud)))
        assert np.allclose(downsample_uniform(cloud, 0.7).data, downsample_uniform(shuffled, 0.7).data,
                           atol=1e-12)

    def test_empty_cloud(self):
        assert len(downsample_uniform(PointCloud(), 0.8)) == 0

    @pytest.mark.parametrize("edge", [0.0, -1.0, float("nan")])
    def test_invalid_edge(self, edge):
        with pytest.raises(ParameterError):
            downsample_uniform(PointCloud(), edge)


class TestDistanceAware:
    """거리 대역별 다운샘플링 테스트"""

    def test_single_band_equals_uniform(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud.from_arrays(rng.uniform(-10, 10, (5000, 3)), rng.uniform(size=5000))
        assert np.array_equal(downsample_distance_aware(cloud, BandSpec.parse(DEFAULT_BANDS)).data,
                              downsample_uniform(cloud, 0.8).data)

    def test_band_edges_applied(self):
        near = PointCloud([[9.7, 0.0, 0.0, 0.1], [10.2, 0.0, 0.0, 0.3]])
        far = PointCloud([[50.45, 0.0, 0.0, 0.1], [50.55, 0.0, 0.0, 0.3]])
        bands = BandSpec.parse(DEFAULT_BANDS)
        # 두 쌍 모두 0.8 voxel 에서는 같은 칸, 0.5 voxel 에서는 다른 칸
        assert len(downsample_distance_aware(near, bands)) == 1
        assert len(downsample_distance_aware(far, bands)) == 2

    def test_band_major_order_and_ranges(self):
        cloud = _uniform_disk(5, count=5000)
        bands = BandSpec.parse(DEFAULT_BANDS)
        reduced = downsample_distance_aware(cloud, bands)
        band_sizes = [len(downsample_uniform(cloud.subset(bands.assign(horizontal_range(cloud.positions)) == b), e))
                      for b, e in enumerate(bands.edges)]
        assert len(reduced) == sum(band_sizes)
        assert len(reduced) <= len(cloud)
        assert sum(band_counts(cloud, bands)) == len(cloud)
        output_bands = bands.assign(horizontal_range(reduced.positions))
        assert np.array_equal(output_bands, np.repeat(np.arange(len(band_sizes)), band_sizes))

    def test_centroid_stays_beyond_inner_band_edge(self):
        bands = BandSpec.parse(DEFAULT_BANDS)
        cloud = PointCloud([[20.0, 0.0, 0.0, 0.5], [19.99, 0.64, 0.0, 0.5]])
        assert bands.assign(horizontal_range(cloud.positions)).tolist() == [1, 1]
        reduced = downsample_distance_aware(cloud, bands)
        assert len(reduced) == 1
        assert horizontal_range(reduced.positions)[0] >= 20.0
        assert bands.assign(horizontal_range(reduced.positions)).tolist() == [1]
        assert reduced.reflectance[0] == pytest.approx(0.5)
        assert np.array_equal(voxel_keys(reduced.positions, 0.65)[0], voxel_keys(cloud.positions, 0.65)[0])

    @pytest.mark.parametrize("inner, band, edge", [(20.0, 1, 0.65), (40.0, 2, 0.5)])
    def test_ring_beyond_band_edge(self, inner, band, edge):
        rng = np.random.default_rng(int(inner))
        count = 4000
        r = inner + rng.uniform(0.0, 0.3, count)
        phi = rng.uniform(-np.pi, np.pi, count)
        positions = np.column_stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(-1.0, 1.0, count)])
        cloud = PointCloud.from_arrays(positions, rng.uniform(size=count))
        bands = BandSpec.parse(DEFAULT_BANDS)
        reduced = downsample_distance_aware(cloud, bands)
        assert np.all(bands.assign(horizontal_range(reduced.positions)) == band)
        source_keys = {tuple(k) for k in voxel_keys(cloud.positions, edge).tolist()}
        output_keys = [tuple(k) for k in voxel_keys(reduced.positions, edge).tolist()]
        assert len(set(output_keys)) == len(reduced) == len(source_keys)
        assert set(output_keys) == source_keys
        shuffled = cloud.subset(rng.permutation(count))
        assert np.allclose(downsample_distance_aware(shuffled, bands).data, reduced.data, atol=1e-12)

    def test_accepts_text_bands(self):
        cloud = _uniform_disk(6, count=500)
        assert np.array_equal(downsample_distance_aware(cloud, DEFAULT_BANDS).data,
                              downsample_distance_aware(cloud, BandSpec.parse(DEFAULT_BANDS)).data)

    def test_far_points_preserved(self):
        bands = BandSpec.parse(DEFAULT_BANDS)
        for seed in range(20):
            cloud = _uniform_disk(seed)
            aware = horizontal_range(downsample_distance_aware(cloud, bands).positions)
            uniform = horizontal_range(downsample_uniform(cloud, 0.8).positions)
            assert np.sum(aware > 40.0) >= np.sum(uniform > 40.0)
