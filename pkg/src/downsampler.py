#!/usr/bin/env python3
"""
Voxel Downsampler for gatdet
균일 voxel 다운샘플링과 거리 대역별 가변 voxel 다운샘플링
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from detector_errors import ParameterError
from pointcloud_io import PointCloud

logger = logging.getLogger("gatdet-downsample")

DEFAULT_BANDS = "20:0.8,40:0.65,inf:0.5"


@dataclass(frozen=True)
class BandSpec:
    """(상한 거리, voxel 크기) 목록; 마지막 항목이 나머지 거리 전체를 담당"""

    bands: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if not self.bands:
            raise ParameterError("band spec needs at least one band")
        thresholds = [t for t, _ in self.bands]
        edges = [e for _, e in self.bands]
        if any(e <= 0 or not math.isfinite(e) for e in edges):
            raise ParameterError(f"voxel edges must be positive: {edges}")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ParameterError(f"band thresholds must be strictly increasing: {thresholds}")
        if any(b > a for a, b in zip(edges, edges[1:])):
            raise ParameterError(f"voxel edges must not grow with range: {edges}")
        if thresholds[0] <= 0:
            raise ParameterError("band thresholds must be positive")

    @classmethod
    def parse(cls, text: str) -> "BandSpec":
        """"20:0.8,40:0.65,inf:0.5" 형식"""
        bands = []
        for item in text.split(","):
            threshold, sep, edge = item.strip().partition(":")
            if not sep:
                raise ParameterError(f"band '{item}' must look like 'range:edge'")
            try:
                bands.append((float(threshold), float(edge)))
            except ValueError:
                raise ParameterError(f"band '{item}' has a non-numeric value") from None
        return cls(tuple(bands))

    def __str__(self) -> str:
        return ",".join(f"{'inf' if math.isinf(t) else f'{t:g}'}:{e:g}" for t, e in self.bands)

    @property
    def edges(self) -> List[float]:
        return [edge for _, edge in self.bands]

    def lower_bounds(self) -> List[float]:
        return [0.0] + [threshold for threshold, _ in self.bands[:-1]]

    def assign(self, distances: np.ndarray) -> np.ndarray:
        """거리별 band id (마지막 band는 무한대까지)"""
        thresholds = np.array([t for t, _ in self.bands[:-1]], dtype=np.float64)
        return np.searchsorted(thresholds, distances, side="right")


def voxel_keys(positions: np.ndarray, edge: float) -> np.ndarray:
    return np.floor(positions / edge).astype(np.int64)


def _voxel_centroids(data: np.ndarray, edge: float, return_inverse: bool = False):
    """occupied voxel 별 평균 (x, y, z, reflectance), key 사전식 오름차순"""
    if data.shape[0] == 0:
        empty = np.zeros((0, 4))
        return (empty, np.zeros(0, dtype=np.int64)) if return_inverse else empty
    _, inverse, counts = np.unique(voxel_keys(data[:, :3], edge), axis=0, return_inverse=True,
                                   return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.stack([np.bincount(inverse, weights=data[:, column], minlength=counts.shape[0])
                     for column in range(4)], axis=1)
    centroids = sums / counts[:, None]
    return (centroids, inverse) if return_inverse else centroids


def downsample_uniform(cloud: PointCloud, edge: float) -> PointCloud:
    """voxel 당 하나의 centroid"""
    if not edge > 0 or not math.isfinite(edge):
        raise ParameterError(f"voxel edge must be positive, got {edge}")
    reduced = _voxel_centroids(cloud.data, edge)
    logger.debug(f"uniform downsample (edge {edge}): {len(cloud)} -> {reduced.shape[0]} points")
    return PointCloud(reduced, cloud.frame_id)


def horizontal_range(positions: np.ndarray) -> np.ndarray:
    return np.hypot(positions[:, 0], positions[:, 1])


def _pull_into_band(members: np.ndarray, centroids: np.ndarray, inverse: np.ndarray,
                    lower: float) -> int:
    """range < lower 인 centroid 를 가장 먼 member 쪽 선분 위 range == lower 지점으로 이동 (voxel 안에 남음)"""
    below = np.flatnonzero(horizontal_range(centroids) < lower)
    for voxel in below:
        inside = members[inverse == voxel]
        # 가장 먼 member, 동률이면 좌표 사전식 (입력 순서와 무관)
        order = np.lexsort((inside[:, 2], inside[:, 1], inside[:, 0], -horizontal_range(inside)))
        target = inside[order[0], :3]
        start = centroids[voxel, :3].copy()
        step = target - start
        a = step[0] ** 2 + step[1] ** 2
        b = 2.0 * (start[0] * step[0] + start[1] * step[1])
        c = start[0] ** 2 + start[1] ** 2 - lower ** 2
        t = min(1.0, (-b + math.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a))
        moved = start + t * step
        if math.hypot(moved[0], moved[1]) < lower:
            moved = target
        centroids[voxel, :3] = moved
    return int(below.size)


def downsample_distance_aware(cloud: PointCloud, bands: BandSpec) -> PointCloud:
    """band 별 균일 다운샘플링 후 band 순서대로 합침; 출력 점의 range 는 자기 band 구간 안"""
    if isinstance(bands, str):
        bands = BandSpec.parse(bands)
    band_ids = bands.assign(horizontal_range(cloud.positions))
    parts = []
    for band, (edge, lower) in enumerate(zip(bands.edges, bands.lower_bounds())):
        members = cloud.data[band_ids == band]
        centroids, inverse = _voxel_centroids(members, edge, return_inverse=True)
        if lower > 0 and centroids.shape[0]:
            pulled = _pull_into_band(members, centroids, inverse, lower)
            if pulled:
                logger.debug(f"band {band}: {pulled} centroids moved back across {lower:g} m")
        parts.append(centroids)
    reduced = np.vstack(parts) if parts else np.zeros((0, 4))
    logger.debug(f"distance-aware downsample ({bands}): {len(cloud)} -> {reduced.shape[0]} points")
    return PointCloud(reduced, cloud.frame_id)


def band_counts(cloud: PointCloud, bands: BandSpec) -> List[int]:
    ids = bands.assign(horizontal_range(cloud.positions))
    return [int(np.sum(ids == band)) for band in range(len(bands.bands))]
