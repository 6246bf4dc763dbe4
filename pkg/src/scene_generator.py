#!/usr/bin/env python3
"""
Synthetic Scene Generator for gatdet
seed 기반 합성 LiDAR 장면 (박스 표면 점, 지면, clutter) 생성
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from box_geometry import OBJECT_CLASSES, Box3D, bev_intersection_matrix, bev_corners, points_in_boxes
from detector_errors import ParameterError, SceneGenerationError
from pointcloud_io import LabeledObject, LabeledScene, PointCloud

logger = logging.getLogger("gatdet-scenes")

SURFACE_INSET = 0.002
CLUTTER_MARGIN = 0.1
PLACEMENT_MARGIN = 0.2
CLUTTER_CLUSTER_SIZE = 10

# (w, l, h) 범위
DEFAULT_SIZE_RANGES: Dict[str, Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]] = {
    "Car": ((1.5, 1.8), (3.6, 4.3), (1.4, 1.7)),
    "Pedestrian": ((0.5, 0.7), (0.6, 1.0), (1.6, 1.9)),
    "Cyclist": ((0.5, 0.7), (1.6, 1.9), (1.6, 1.8)),
}

# 로컬 좌표계 면: (법선 축, 부호)
_FACES = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0))


@dataclass
class SceneSpec:
    """합성 장면 파라미터"""

    object_count: Tuple[int, int] = (1, 3)
    class_mix: Dict[str, float] = field(default_factory=lambda: {"Car": 1.0})
    size_ranges: Dict[str, Tuple[Tuple[float, float], ...]] = field(
        default_factory=lambda: dict(DEFAULT_SIZE_RANGES))
    points_per_object: Tuple[int, int] = (40, 240)
    min_object_points: int = 12
    clutter_points: int = 60
    ground_points: int = 300
    sensor_range: float = 50.0
    placement_range: Tuple[float, float] = (5.0, 40.0)
    half_fov: float = math.pi / 4
    sensor_height: float = 1.73
    reference_range: float = 10.0
    max_retries: int = 100

    def validate(self):
        low, high = self.object_count
        if low < 0 or high < low:
            raise ParameterError(f"invalid object count range {self.object_count}")
        if not self.class_mix or any(w < 0 for w in self.class_mix.values()) or sum(self.class_mix.values()) <= 0:
            raise ParameterError(f"invalid class mix {self.class_mix}")
        for name in self.class_mix:
            if name not in OBJECT_CLASSES:
                raise ParameterError(f"unknown class '{name}' in class mix")
            if name not in self.size_ranges:
                raise ParameterError(f"no size range for class '{name}'")
        lo_points, hi_points = self.points_per_object
        if lo_points < 1 or hi_points < lo_points:
            raise ParameterError(f"invalid points-per-object range {self.points_per_object}")
        if self.min_object_points < 1 or self.min_object_points > hi_points:
            raise ParameterError("min_object_points must lie in [1, points_per_object max]")
        if self.clutter_points < 0 or self.ground_points < 0:
            raise ParameterError("point counts must be non-negative")
        near, far = self.placement_range
        if not 0 < near < far <= self.sensor_range:
            raise ParameterError(f"placement range {self.placement_range} must lie inside (0, sensor_range]")
        if not 0 < self.half_fov <= math.pi:
            raise ParameterError("half_fov must lie in (0, π]")
        if self.max_retries < 1:
            raise ParameterError("max_retries must be positive")

    def points_for_range(self, distance: float) -> int:
        """거리 제곱에 반비례하는 표면 점 개수"""
        low, high = self.points_per_object
        scaled = high * (self.reference_range / max(distance, 1e-6)) ** 2
        return int(np.clip(round(scaled), max(low, self.min_object_points), high))


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_visible_surface(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """원점에서 보이는 면에 count 개 점 샘플링 (2 mm 안쪽)"""
    rotation = _rotation(box.theta)
    half = np.array([box.l, box.w, box.h]) / 2.0
    center = box.center
    faces, weights = [], []
    for axis, sign in _FACES:
        normal_local = np.zeros(3)
        normal_local[axis] = sign
        normal = rotation @ normal_local
        face_center = center + rotation @ (normal_local * half)
        facing = -float(normal @ face_center) / max(np.linalg.norm(face_center), 1e-9)
        if facing <= 0:
            continue
        spans = [i for i in range(3) if i != axis]
        area = 4.0 * half[spans[0]] * half[spans[1]]
        faces.append((axis, sign, spans))
        weights.append(area * facing)
    if not faces:
        raise SceneGenerationError(f"no face of box at ({box.x:.2f}, {box.y:.2f}) is visible from the sensor")

    counts = rng.multinomial(count, np.array(weights) / np.sum(weights))
    local_points = []
    for (axis, sign, spans), face_count in zip(faces, counts):
        samples = np.zeros((face_count, 3))
        samples[:, axis] = sign * (half[axis] - SURFACE_INSET)
        for span in spans:
            samples[:, span] = rng.uniform(-half[span] + SURFACE_INSET, half[span] - SURFACE_INSET, face_count)
        local_points.append(samples)
    return np.vstack(local_points) @ rotation.T + center


def _sample_box(spec: SceneSpec, object_class: str, rng: np.random.Generator) -> Box3D:
    (w_lo, w_hi), (l_lo, l_hi), (h_lo, h_hi) = spec.size_ranges[object_class]
    w, l, h = rng.uniform(w_lo, w_hi), rng.uniform(l_lo, l_hi), rng.uniform(h_lo, h_hi)
    distance = rng.uniform(*spec.placement_range)
    azimuth = rng.uniform(-spec.half_fov, spec.half_fov)
    heading = rng.uniform(-math.pi, math.pi)
    return Box3D(distance * math.cos(azimuth), distance * math.sin(azimuth), -spec.sensor_height + h / 2.0,
                 l, w, h, heading)


def _place_boxes(spec: SceneSpec, classes: Sequence[str], rng: np.random.Generator) -> List[Box3D]:
    placed: List[Box3D] = []
    for object_class in classes:
        for _ in range(spec.max_retries):
            candidate = _sample_box(spec, object_class, rng)
            if np.max(np.hypot(*bev_corners(candidate.as_array()).T)) > spec.sensor_range:
                continue
            if placed:
                grown = candidate.as_array()
                grown[3:5] += 2.0 * PLACEMENT_MARGIN
                existing = np.array([box.as_array() for box in placed])
                if np.any(bev_intersection_matrix(grown, existing) > 0):
                    continue
            placed.append(candidate)
            break
        else:
            raise SceneGenerationError(
                f"could not place {object_class} #{len(placed) + 1} without overlap "
                f"after {spec.max_retries} retries")
    return placed


def _outside_boxes(points: np.ndarray, boxes: np.ndarray, margin: float, footprint_only: bool) -> np.ndarray:
    if boxes.shape[0] == 0 or points.shape[0] == 0:
        return np.ones(points.shape[0], dtype=bool)
    grown = boxes.copy()
    grown[:, 3:5] += 2.0 * margin
    if footprint_only:
        grown[:, 5] = np.inf
    return ~np.any(points_in_boxes(points, grown), axis=1)


def generate_scene(seed: Union[int, Sequence[int]], spec: Optional[SceneSpec] = None,
                   scene_id: Optional[str] = None) -> LabeledScene:
    """seed 가 같으면 같은 장면"""
    spec = spec or SceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)

    names = list(spec.class_mix.keys())
    probabilities = np.array([spec.class_mix[name] for name in names], dtype=np.float64)
    count = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    classes = [names[i] for i in rng.choice(len(names), size=count, p=probabilities / probabilities.sum())]
    boxes = _place_boxes(spec, classes, rng)

    parts = []
    for box in boxes:
        surface = sample_visible_surface(box, spec.points_for_range(math.hypot(box.x, box.y)), rng)
        parts.append(np.hstack([surface, rng.uniform(0.2, 0.9, (surface.shape[0], 1))]))
    box_array = np.array([box.as_array() for box in boxes]).reshape(-1, 7)

    if spec.ground_points:
        radius = rng.uniform(1.0, spec.sensor_range, spec.ground_points)
        azimuth = rng.uniform(-spec.half_fov, spec.half_fov, spec.ground_points)
        ground = np.column_stack([radius * np.cos(azimuth), radius * np.sin(azimuth),
                                  np.full(spec.ground_points, -spec.sensor_height),
                                  rng.uniform(0.0, 0.3, spec.ground_points)])
        parts.append(ground[_outside_boxes(ground[:, :3], box_array, 0.0, footprint_only=True)])

    if spec.clutter_points:
        clusters = max(1, spec.clutter_points // CLUTTER_CLUSTER_SIZE)
        radius = rng.uniform(spec.placement_range[0], spec.sensor_range, clusters)
        azimuth = rng.uniform(-spec.half_fov, spec.half_fov, clusters)
        centers = np.column_stack([radius * np.cos(azimuth), radius * np.sin(azimuth),
                                   rng.uniform(-spec.sensor_height + 0.3, 0.5, clusters)])
        members = rng.integers(0, clusters, spec.clutter_points)
        clutter = centers[members] + rng.normal(0.0, 0.3, (spec.clutter_points, 3))
        clutter = clutter[_outside_boxes(clutter, box_array, CLUTTER_MARGIN, footprint_only=False)]
        parts.append(np.hstack([clutter, rng.uniform(0.0, 1.0, (clutter.shape[0], 1))]))

    points = np.vstack(parts) if parts else np.zeros((0, 4))
    objects = [LabeledObject(name, box) for name, box in zip(classes, boxes)]
    scene_id = scene_id if scene_id is not None else f"scene_{seed if np.isscalar(seed) else '_'.join(map(str, seed))}"
    logger.debug(f"{scene_id}: {len(objects)} objects, {points.shape[0]} points")
    return LabeledScene(PointCloud(points, frame_id=scene_id), objects, scene_id)


def generate_dataset(seed: int, count: int, spec: Optional[SceneSpec] = None,
                     prefix: str = "scene") -> List[LabeledScene]:
    """장면 i 는 seed [seed, i] 로 독립 생성"""
    if count < 0:
        raise ParameterError("scene count must be non-negative")
    return [generate_scene([seed, index], spec, scene_id=f"{prefix}_{seed}_{index:05d}") for index in range(count)]
