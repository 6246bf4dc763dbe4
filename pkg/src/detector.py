#!/usr/bin/env python3
"""
Detector for gatdet
다운샘플 → 그래프 → GNN → anchor 디코딩 → 점수 threshold → NMS 추론 파이프라인
"""

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from box_geometry import (
    ANCHOR_ROTATIONS, ANCHOR_SIZES, OBJECT_CLASSES, Z_NORMS, Anchor, DetectionSet, decode_boxes,
    make_anchors, nms,
)
from cache_manager import CacheManager, cached_preprocessing, preprocessing_key
from checkpoint_store import load_checkpoint, verify_metadata
from detector_errors import CheckpointError, ParameterError
from downsampler import DEFAULT_BANDS, BandSpec, downsample_distance_aware
from gnn_model import GnnConfig, init_params, run_network
from graph_builder import DEFAULT_MAX_NEIGHBORS, DEFAULT_RADIUS, Graph, build_graph, graph_from_edges
from pointcloud_io import Calibration, LabeledScene, PointCloud, crop_to_frustum
from tensor_core import ParameterBinding, ParameterStore

logger = logging.getLogger("gatdet-detector")

DEFAULT_SCORE_THRESHOLD = 0.3
DEFAULT_NMS_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.6, "Cyclist": 0.6}
KITTI_IMAGE_SIZE = (1242, 375)


@dataclass
class AnchorConfig:
    """클래스별 anchor 크기 (w, l, h), 회전 변형, z 정규화 방식"""

    sizes: Dict[str, Tuple[float, float, float]] = field(default_factory=lambda: dict(ANCHOR_SIZES))
    rotations: Tuple[float, ...] = ANCHOR_ROTATIONS
    z_norm: str = "da"

    def validate(self):
        for name, size in self.sizes.items():
            if name not in OBJECT_CLASSES:
                raise ParameterError(f"anchor size given for unknown class '{name}'")
            if len(size) != 3 or min(size) <= 0:
                raise ParameterError(f"anchor size for {name} must be three positive values (w, l, h)")
        if not self.rotations:
            raise ParameterError("at least one anchor rotation is required")
        if self.z_norm not in Z_NORMS:
            raise ParameterError(f"z_norm must be one of {Z_NORMS}")

    def anchors_for(self, object_class: str) -> List[Anchor]:
        return make_anchors(object_class, self.sizes.get(object_class), self.rotations)

    def metadata(self, object_class: str) -> Dict[str, Any]:
        size = self.sizes.get(object_class, ANCHOR_SIZES.get(object_class))
        return {
            "size": [float(v) for v in size],
            "rotations": [float(r) for r in self.rotations],
            "z_norm": self.z_norm,
        }


@dataclass
class DetectorConfig:
    """학습/추론 공통 모델 구성과 추론 후처리 설정"""

    object_class: str = "Car"
    gnn: GnnConfig = field(default_factory=GnnConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    bands: str = DEFAULT_BANDS
    radius: float = DEFAULT_RADIUS
    max_neighbors: Optional[int] = DEFAULT_MAX_NEIGHBORS
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_thresholds: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_NMS_THRESHOLDS))
    nms_iou_kind: str = "bev"
    frustum: Optional[Tuple[int, int]] = None

    def validate(self):
        if self.object_class not in OBJECT_CLASSES:
            raise ParameterError(f"unknown object class '{self.object_class}'")
        self.anchors.validate()
        if self.gnn.num_anchors != len(self.anchors.rotations):
            raise ParameterError(
                f"gnn.num_anchors ({self.gnn.num_anchors}) must equal the number of anchor rotations "
                f"({len(self.anchors.rotations)})")
        BandSpec.parse(self.bands)
        if not self.radius > 0:
            raise ParameterError("graph radius must be positive")
        if self.max_neighbors is not None and self.max_neighbors < 1:
            raise ParameterError("max_neighbors must be at least 1")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ParameterError("score_threshold must lie in [0, 1]")
        for name, threshold in self.nms_thresholds.items():
            if not 0 < threshold <= 1:
                raise ParameterError(f"NMS threshold for {name} must lie in (0, 1]")
        if self.nms_iou_kind not in ("bev", "3d"):
            raise ParameterError("nms_iou_kind must be 'bev' or '3d'")
        if self.frustum is not None and min(self.frustum) <= 0:
            raise ParameterError("frustum image size must be positive")

    @property
    def nms_threshold(self) -> float:
        return self.nms_thresholds.get(self.object_class, 0.7)

    def anchor_list(self) -> List[Anchor]:
        return self.anchors.anchors_for(self.object_class)

    def model_metadata(self) -> Dict[str, Any]:
        """체크포인트에 기록되는 모델 구성 섹션"""
        return {
            "object_class": self.object_class,
            "gnn": self.gnn.to_dict(),
            "anchors": self.anchors.metadata(self.object_class),
            "downsample": {"bands": str(BandSpec.parse(self.bands))},
            "graph": {"radius": float(self.radius), "max_neighbors": self.max_neighbors},
        }


def checkpoint_metadata(config: DetectorConfig, steps: int, seed: int) -> Dict[str, Any]:
    metadata = config.model_metadata()
    metadata.update({"steps": int(steps), "seed": int(seed)})
    return metadata


@dataclass
class PreparedScene:
    """다운샘플된 점과 그 위의 그래프"""

    cloud: PointCloud
    graph: Graph
    timings: Dict[str, float] = field(default_factory=dict)


def prepare_cloud(cloud: PointCloud, config: DetectorConfig, cache: Optional[CacheManager] = None,
                  calib: Optional[Calibration] = None) -> PreparedScene:
    """frustum crop (calib 있을 때) → 거리별 다운샘플 → 반경 그래프"""
    timings: Dict[str, float] = {}
    started = time.perf_counter()
    if calib is not None and config.frustum is not None:
        cloud = crop_to_frustum(cloud, calib, *config.frustum)
    timings["frustum"] = time.perf_counter() - started

    bands = BandSpec.parse(config.bands)
    stage: Dict[str, float] = {}

    def compute():
        begin = time.perf_counter()
        reduced = downsample_distance_aware(cloud, bands)
        stage["downsample"] = time.perf_counter() - begin
        begin = time.perf_counter()
        graph = build_graph(reduced, config.radius, config.max_neighbors)
        stage["graph"] = time.perf_counter() - begin
        return reduced.data, graph.edges_u, graph.edges_v

    started = time.perf_counter()
    key = preprocessing_key(cloud.fingerprint(), str(bands), float(config.radius), config.max_neighbors,
                            config.frustum if calib is not None else None)
    points, edges_u, edges_v = cached_preprocessing(cache, key, compute)
    reduced = PointCloud(points, cloud.frame_id)
    graph = graph_from_edges(reduced.positions, edges_u, edges_v, float(config.radius), config.max_neighbors)
    if stage:
        timings.update(stage)
    else:
        timings["cache"] = time.perf_counter() - started
    return PreparedScene(reduced, graph, timings)


@dataclass
class DetectionResult:
    detections: DetectionSet
    timings: Dict[str, float]
    num_points: int = 0
    num_vertices: int = 0


class Detector:
    """학습된 파라미터로 장면별 3D 박스 검출"""

    def __init__(self, config: DetectorConfig, params: ParameterStore, cache: Optional[CacheManager] = None):
        config.validate()
        self.config = config
        self.params = params
        self.cache = cache
        self.anchors = config.anchor_list()
        self._templates = np.array([[a.l, a.w, a.h, a.theta] for a in self.anchors])

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], config: Optional[DetectorConfig] = None,
                        cache: Optional[CacheManager] = None) -> "Detector":
        """체크포인트 로드; 설정이 주어지면 모델 구성이 같은지 확인 (클래스는 체크포인트 값 사용)"""
        store, metadata = load_checkpoint(path)
        try:
            object_class = metadata["object_class"]
            gnn = GnnConfig.from_dict(metadata["gnn"])
            anchors_meta = metadata["anchors"]
        except (KeyError, TypeError, ParameterError) as e:
            raise CheckpointError(f"checkpoint metadata is incomplete: {e}") from None

        if config is None:
            config = DetectorConfig(
                object_class=object_class, gnn=gnn,
                anchors=AnchorConfig({object_class: tuple(anchors_meta["size"])},
                                     tuple(anchors_meta["rotations"]), anchors_meta["z_norm"]),
                bands=metadata.get("downsample", {}).get("bands", DEFAULT_BANDS),
                radius=metadata.get("graph", {}).get("radius", DEFAULT_RADIUS),
                max_neighbors=metadata.get("graph", {}).get("max_neighbors", DEFAULT_MAX_NEIGHBORS))
        else:
            if config.object_class != object_class:
                logger.info(f"using checkpoint class {object_class} instead of configured {config.object_class}")
                config = replace(config, object_class=object_class)
            expected = config.model_metadata()
            for section in ("gnn", "anchors", "downsample", "graph"):
                verify_metadata(metadata, expected[section], section)

        reference = init_params(config.gnn, 0)
        for name in reference.names():
            if name not in store or store[name].shape != reference[name].shape:
                raise CheckpointError(f"checkpoint parameter '{name}' is missing or has the wrong shape")
        logger.info(f"loaded {object_class} detector from {path} ({metadata.get('steps')} steps)")
        return cls(config, store, cache)

    def prepare(self, cloud: PointCloud, calib: Optional[Calibration] = None) -> PreparedScene:
        return prepare_cloud(cloud, self.config, self.cache, calib)

    def decode(self, cloud: PointCloud, probabilities: np.ndarray, residuals: np.ndarray) -> DetectionSet:
        """vertex 별 점수 = 1 − p_background, anchor = argmax p[:, 1:]"""
        scores = np.clip(1.0 - probabilities[:, 0], 0.0, 1.0)
        anchor_ids = np.argmax(probabilities[:, 1:], axis=1)
        keep = np.nonzero(scores >= self.config.score_threshold)[0]
        if keep.size == 0:
            return DetectionSet()
        chosen = anchor_ids[keep]
        anchor_boxes = np.hstack([cloud.positions[keep], self._templates[chosen]])
        per_anchor = residuals.reshape(residuals.shape[0], len(self.anchors), 7)
        boxes = decode_boxes(per_anchor[keep, chosen], anchor_boxes, self.config.anchors.z_norm)
        return DetectionSet([self.config.object_class] * keep.size, scores[keep], boxes)

    def detect(self, cloud: PointCloud, calib: Optional[Calibration] = None) -> DetectionResult:
        started = time.perf_counter()
        prepared = self.prepare(cloud, calib)
        timings = dict(prepared.timings)
        if prepared.graph.num_vertices == 0:
            timings["total"] = time.perf_counter() - started
            return DetectionResult(DetectionSet(), timings, len(cloud), 0)

        output = run_network(prepared.cloud, prepared.graph, self.config.gnn, ParameterBinding(self.params))
        timings.update(output.timings)

        begin = time.perf_counter()
        candidates = self.decode(prepared.cloud, output.probabilities.data, output.residuals.data)
        timings["decode"] = time.perf_counter() - begin
        begin = time.perf_counter()
        detections = nms(candidates, self.config.nms_threshold, self.config.nms_iou_kind)
        timings["nms"] = time.perf_counter() - begin
        timings["total"] = time.perf_counter() - started
        logger.debug(f"{cloud.frame_id}: {len(candidates)} candidates -> {len(detections)} detections")
        return DetectionResult(detections, timings, len(cloud), prepared.graph.num_vertices)

    def detect_scenes(self, scenes: Sequence[LabeledScene]) -> Dict[str, DetectionSet]:
        return {scene.scene_id: self.detect(scene.cloud).detections for scene in scenes}


def summarize_timings(results: Sequence[DetectionResult]) -> Dict[str, float]:
    """단계별 평균 소요 시간 (초)"""
    totals: Dict[str, List[float]] = {}
    for result in results:
        for stage, seconds in result.timings.items():
            totals.setdefault(stage, []).append(seconds)
    return {stage: float(np.mean(values)) for stage, values in totals.items()}
