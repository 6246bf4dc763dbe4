#!/usr/bin/env python3
"""
Test suite for AP evaluation
"""

import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from box_geometry import Box3D, DetectionSet, iou_matrix
from detector_errors import ParameterError
from evaluator import (
    EvalConfig, average_precision, evaluate_dataset, match_detections, precision_recall, write_report,
)
from pointcloud_io import LabeledObject

CAR = [5.0, 0.0, 0.0, 4.0, 1.6, 1.5, 0.0]


def _reference_match(det_boxes, det_scores, gt_boxes, threshold):
    """IoU 행렬을 직접 훑는 greedy 기준 구현"""
    overlaps = iou_matrix(det_boxes, gt_boxes, "3d")
    taken = [False] * len(gt_boxes)
    flags = [False] * len(det_boxes)
    for det in sorted(range(len(det_boxes)), key=lambda i: (-det_scores[i], i)):
        best, best_iou = None, -1.0
        for gt in range(len(gt_boxes)):
            if not taken[gt] and overlaps[det, gt] > best_iou:
                best, best_iou = gt, overlaps[det, gt]
        if best is not None and best_iou >= threshold:
            taken[best] = True
            flags[det] = True
    return flags


class TestMatching:
    """검출-정답 매칭 테스트"""

    def test_exact_detection_is_true_positive(self):
        result = match_detections([CAR], [0.9], [CAR], 0.7)
        assert result.true_positive.tolist() == [True]
        assert result.gt_matched.tolist() == [True]

    def test_duplicate_detection_is_false_positive(self):
        shifted = list(CAR)
        shifted[0] += 0.1
        result = match_detections([shifted, CAR], [0.5, 0.9], [CAR], 0.7)
        assert result.true_positive.tolist() == [False, True]

    def test_no_ground_truth(self):
        result = match_detections([CAR], [0.9], np.zeros((0, 7)), 0.7)
        assert result.true_positive.tolist() == [False]

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            gt = np.column_stack([rng.uniform(-10, 10, (50, 2)), rng.uniform(-0.3, 0.3, 50),
                                  rng.uniform(3.5, 4.5, 50), rng.uniform(1.5, 1.8, 50), rng.uniform(1.4, 1.7, 50),
                                  rng.uniform(-np.pi, np.pi, 50)])
            dets = gt + np.column_stack([rng.normal(0, 0.4, (50, 3)), np.zeros((50, 3)), rng.normal(0, 0.1, 50)])
            scores = rng.uniform(size=50)
            result = match_detections(dets, scores, gt, 0.5)
            assert result.true_positive.tolist() == _reference_match(dets, scores, gt, 0.5)


class TestAveragePrecision:
    """AP 계산 테스트"""

    def test_perfect(self):
        assert average_precision([True, True, True], 3) == 1.0
        assert average_precision([True, True, True], 3, interpolation=40) == 1.0

    def test_no_detections(self):
        assert average_precision([], 4) == 0.0

    def test_no_ground_truth_is_absent(self):
        assert average_precision([False], 0) is None

    def test_true_positive_then_false_positive(self):
        assert average_precision([True, False], 1) == 1.0

    def test_half_recall(self):
        # recall 0.5 까지 precision 1, 이후 0
        assert average_precision([True], 2) == pytest.approx(6 / 11)
        assert average_precision([True], 2, interpolation=40) == pytest.approx(20 / 40)

    def test_precision_recall_curve(self):
        curve = precision_recall([True, False, True], 2)
        assert [(p.recall, p.precision) for p in curve] == [(0.5, 1.0), (0.5, 0.5), (1.0, pytest.approx(2 / 3))]

    def test_removing_false_positive_never_lowers_ap(self):
        rng = np.random.default_rng(1)
        flags = (rng.random(60) < 0.5).tolist()
        num_gt = sum(flags) + 5
        base = average_precision(flags, num_gt)
        for i, flag in enumerate(flags):
            if not flag:
                assert average_precision(flags[:i] + flags[i + 1:], num_gt) >= base - 1e-12

    def test_interpolations_agree_on_dense_curves(self):
        rng = np.random.default_rng(2)
        flags = rng.random(2000) < np.linspace(0.9, 0.6, 2000)
        num_gt = int(flags.sum())
        assert abs(average_precision(flags, num_gt, 11) - average_precision(flags, num_gt, 40)) < 0.05

    def test_invalid_interpolation(self):
        with pytest.raises(ParameterError):
            average_precision([True], 1, interpolation=7)


class TestEvaluateDataset:
    """데이터셋 평가 테스트"""

    def test_perfect_predictions(self):
        truth = {"a": [LabeledObject("Car", Box3D.from_array(CAR))]}
        predictions = {"a": DetectionSet(["Car"], [0.8], [CAR])}
        report = evaluate_dataset(predictions, truth)
        assert report.ap("Car", "3d") == 1.0
        assert report.ap("Car", "bev") == 1.0
        assert set(report.summary["difficulty"]) == {"all"}

    def test_detections_in_scene_without_objects_are_false_positives(self):
        truth = {"a": [LabeledObject("Car", Box3D.from_array(CAR))], "b": []}
        predictions = {"a": DetectionSet(["Car"], [0.5], [CAR]), "b": DetectionSet(["Car"], [0.9], [CAR])}
        assert evaluate_dataset(predictions, truth).ap("Car", "3d") == pytest.approx(0.5)

    def test_score_transform_does_not_change_ap(self):
        rng = np.random.default_rng(3)
        objects = [LabeledObject("Car", Box3D(x, 0.0, 0.0, 4.0, 1.6, 1.5, 0.0)) for x in range(0, 60, 6)]
        boxes = [obj.box.as_array() + [rng.normal(0, 0.3), 0, 0, 0, 0, 0, 0] for obj in objects]
        scores = rng.uniform(0.1, 1.0, len(boxes))
        truth = {"s": objects}
        base = evaluate_dataset({"s": DetectionSet(["Car"] * 10, scores, boxes)}, truth)
        cubed = evaluate_dataset({"s": DetectionSet(["Car"] * 10, scores ** 3, boxes)}, truth)
        assert base.ap("Car", "3d") == cubed.ap("Car", "3d")

    def test_difficulty_buckets_ignore_excluded_objects(self):
        hard = list(CAR)
        hard[1] = 10.0
        truth = {"a": [LabeledObject("Car", Box3D.from_array(CAR), "easy"),
                       LabeledObject("Car", Box3D.from_array(hard), "hard")]}
        predictions = {"a": DetectionSet(["Car", "Car"], [0.9, 0.8], [hard, CAR])}
        report = evaluate_dataset(predictions, truth)
        assert report.ap("Car", "3d", "easy") == 1.0
        assert report.ap("Car", "3d", "hard") == 1.0
        easy = report.summary[(report.summary["difficulty"] == "easy") & (report.summary["iou_kind"] == "3d")]
        assert easy["num_det"].tolist() == [1]

    def test_missing_class_reported_as_absent(self):
        truth = {"a": [LabeledObject("Car", Box3D.from_array(CAR))]}
        report = evaluate_dataset({}, truth, classes=["Pedestrian"])
        assert report.ap("Pedestrian", "3d") is None

    def test_write_report(self, tmp_path):
        truth = {"a": [LabeledObject("Car", Box3D.from_array(CAR))]}
        report = evaluate_dataset({"a": DetectionSet(["Car"], [0.8], [CAR])}, truth,
                                  EvalConfig(interpolation=40))
        path = write_report(report, tmp_path / "report.tsv")
        table = pd.read_csv(path, sep="\t")
        assert set(table["record"]) == {"ap", "pr"}
        ap_rows = table[table["record"] == "ap"]
        assert ap_rows["ap"].tolist() == [1.0, 1.0]

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            evaluate_dataset({}, {}, EvalConfig(iou_kinds=("2d",)))
