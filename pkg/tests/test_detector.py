#!/usr/bin/env python3
"""
Test suite for the inference pipeline
"""

import math
import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from box_geometry import ANCHOR_SIZES, DetectionSet
from cache_manager import CacheManager
from checkpoint_store import save_checkpoint
from detector import (
    AnchorConfig, DetectionResult, Detector, DetectorConfig, checkpoint_metadata, prepare_cloud, summarize_timings,
)
from detector_errors import CheckpointError, ParameterError
from gnn_model import GnnConfig, init_params
from pointcloud_io import Calibration, PointCloud
from scene_generator import SceneSpec, generate_dataset

TINY_GNN = GnnConfig(feature_width=4, num_layers=1, attention_hidden=(4,), mapping_hidden=(4,), head_hidden=(4,))


@pytest.fixture
def config():
    return DetectorConfig(gnn=TINY_GNN, anchors=AnchorConfig())


@pytest.fixture
def checkpoint(tmp_path, config):
    return save_checkpoint(tmp_path / "tiny.gdck", init_params(TINY_GNN, 0), checkpoint_metadata(config, 0, 0))


@pytest.fixture
def scene():
    spec = SceneSpec(object_count=(1, 1), points_per_object=(40, 80), clutter_points=20, ground_points=60)
    return generate_dataset(5, 1, spec, "det")[0]


class TestDetectorConfig:
    """검출기 설정 검증 테스트"""

    def test_anchor_count_must_match_network(self):
        with pytest.raises(ParameterError, match="num_anchors"):
            DetectorConfig(gnn=replace(TINY_GNN, num_anchors=3)).validate()

    def test_invalid_values(self):
        with pytest.raises(ParameterError):
            DetectorConfig(score_threshold=1.5).validate()
        with pytest.raises(ParameterError):
            DetectorConfig(nms_iou_kind="2d").validate()
        with pytest.raises(ParameterError):
            DetectorConfig(bands="20:0.5,inf:0.8").validate()

    def test_metadata_records_model(self, config):
        metadata = checkpoint_metadata(config, 12, 3)
        assert (metadata["steps"], metadata["seed"]) == (12, 3)
        assert metadata["anchors"]["size"] == list(ANCHOR_SIZES["Car"])
        assert metadata["graph"]["max_neighbors"] == config.max_neighbors


class TestCheckpointLoading:
    """체크포인트 로드와 불일치 검사 테스트"""

    def test_config_from_metadata(self, checkpoint):
        detector = Detector.from_checkpoint(checkpoint)
        assert detector.config.gnn == TINY_GNN
        assert detector.config.object_class == "Car"
        assert len(detector.anchors) == 2

    def test_class_comes_from_checkpoint(self, checkpoint, config):
        detector = Detector.from_checkpoint(checkpoint, replace(config, object_class="Cyclist"))
        assert detector.config.object_class == "Car"

    def test_model_mismatch(self, checkpoint, config):
        with pytest.raises(CheckpointError, match="gnn"):
            Detector.from_checkpoint(checkpoint, replace(config, gnn=replace(TINY_GNN, feature_width=8)))
        with pytest.raises(CheckpointError, match="graph"):
            Detector.from_checkpoint(checkpoint, replace(config, radius=2.5))

    def test_missing_parameters(self, tmp_path, config):
        deeper = replace(config, gnn=replace(TINY_GNN, num_layers=2))
        path = save_checkpoint(tmp_path / "short.gdck", init_params(TINY_GNN, 0), checkpoint_metadata(deeper, 0, 0))
        with pytest.raises(CheckpointError, match="missing"):
            Detector.from_checkpoint(path)


class TestDecoding:
    """vertex 출력 → 박스 디코딩 테스트"""

    def test_scores_and_anchor_choice(self, config):
        detector = Detector(config, init_params(TINY_GNN, 0))
        cloud = PointCloud.from_arrays([[1.0, 2.0, 0.0], [5.0, -1.0, 0.5], [9.0, 0.0, -0.5]], [0.1, 0.2, 0.3])
        probabilities = np.array([[0.9, 0.05, 0.05], [0.1, 0.2, 0.7], [0.5, 0.4, 0.1]])
        detections = detector.decode(cloud, probabilities, np.zeros((3, 14)))

        assert detections.scores.tolist() == pytest.approx([0.9, 0.5])
        w, l, h = ANCHOR_SIZES["Car"]
        assert detections.boxes[0].tolist() == pytest.approx([5.0, -1.0, 0.5, l, w, h, math.pi / 2])
        assert detections.boxes[1].tolist() == pytest.approx([9.0, 0.0, -0.5, l, w, h, 0.0])
        assert detections.classes == ["Car", "Car"]

    def test_nothing_above_threshold(self, config):
        detector = Detector(config, init_params(TINY_GNN, 0))
        cloud = PointCloud.from_arrays([[1.0, 2.0, 0.0]], [0.1])
        assert len(detector.decode(cloud, np.array([[0.95, 0.03, 0.02]]), np.zeros((1, 14)))) == 0


class TestDetect:
    """전체 추론 테스트"""

    def test_empty_scene(self, config):
        result = Detector(config, init_params(TINY_GNN, 0)).detect(PointCloud())
        assert len(result.detections) == 0
        assert result.num_vertices == 0
        assert "total" in result.timings

    def test_detect_is_deterministic(self, checkpoint, scene):
        first = Detector.from_checkpoint(checkpoint).detect(scene.cloud)
        second = Detector.from_checkpoint(checkpoint).detect(scene.cloud)
        assert np.array_equal(first.detections.boxes, second.detections.boxes)
        assert np.array_equal(first.detections.scores, second.detections.scores)
        assert 0 < first.num_vertices <= first.num_points
        assert {"downsample", "graph", "total"} <= set(first.timings)

    def test_detections_respect_threshold_and_nms(self, checkpoint, scene):
        detector = Detector.from_checkpoint(checkpoint)
        detections = detector.detect(scene.cloud).detections
        assert np.all(detections.scores >= detector.config.score_threshold)
        assert len(detections) <= detector.detect(scene.cloud).num_vertices

    def test_cache_hit_gives_same_detections(self, checkpoint, scene, tmp_path):
        cache = CacheManager(str(tmp_path / "cache.db"))
        detector = Detector.from_checkpoint(checkpoint, cache=cache)
        first = detector.detect(scene.cloud)
        second = detector.detect(scene.cloud)
        assert "downsample" in first.timings
        assert "cache" in second.timings
        assert np.array_equal(first.detections.boxes, second.detections.boxes)

    def test_frustum_crop_needs_calibration(self, config):
        cloud = PointCloud.from_arrays([[1.0, 1.0, 1.0], [1.0, 1.0, -1.0], [20.0, 1.0, 1.0]], [0.1, 0.2, 0.3])
        cropped = replace(config, frustum=(10, 10))
        assert prepare_cloud(cloud, cropped).cloud.data.shape[0] == 3
        assert prepare_cloud(cloud, cropped, calib=Calibration.identity()).cloud.data.shape[0] == 1

    def test_detect_scenes(self, checkpoint, scene):
        results = Detector.from_checkpoint(checkpoint).detect_scenes([scene])
        assert list(results) == [scene.scene_id]
        assert isinstance(results[scene.scene_id], DetectionSet)

    def test_summarize_timings(self):
        results = [DetectionResult(DetectionSet(), {"total": 1.0, "nms": 0.5}),
                   DetectionResult(DetectionSet(), {"total": 3.0})]
        assert summarize_timings(results) == {"total": 2.0, "nms": 0.5}
