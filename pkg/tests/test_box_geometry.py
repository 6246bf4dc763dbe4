#!/usr/bin/env python3
"""
Test suite for box geometry
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from box_geometry import (
    ANCHOR_SIZES, Box3D, BoxResidual, DetectionSet, decode, decode_boxes, encode, encode_boxes, iou_3d,
    iou_bev, iou_bev_matrix, iou_bev_pairs, make_anchors, nms, normalize_angle, parse_detections,
    points_in_boxes, read_detections, write_detections,
)
from detector_errors import DataFormatError, NumericError, ParameterError
from self_check import monte_carlo_iou, naive_nms


def _random_boxes(rng, count, spread=3.0):
    return np.column_stack([
        rng.uniform(-spread, spread, count), rng.uniform(-spread, spread, count), rng.uniform(-0.5, 0.5, count),
        rng.uniform(0.5, 4.5, count), rng.uniform(0.4, 2.0, count), rng.uniform(0.5, 2.0, count),
        rng.uniform(-np.pi, np.pi, count),
    ])


class TestBoxes:
    """Box3D 와 anchor 테스트"""

    def test_box_rejects_bad_fields(self):
        with pytest.raises(ParameterError):
            Box3D(0, 0, 0, 0.0, 1, 1, 0)
        with pytest.raises(ParameterError):
            Box3D(0, 0, float("nan"), 1, 1, 1, 0)

    def test_heading_is_normalized(self):
        box = Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi)
        assert box.theta == pytest.approx(math.pi)
        assert normalize_angle(-math.pi) == pytest.approx(math.pi)

    def test_default_anchors(self):
        anchors = make_anchors("Car")
        assert [a.theta for a in anchors] == [0.0, math.pi / 2]
        assert (anchors[0].w, anchors[0].l, anchors[0].h) == ANCHOR_SIZES["Car"]
        with pytest.raises(ParameterError):
            make_anchors("Truck")

    def test_points_in_rotated_box(self):
        box = Box3D(1.0, 2.0, 0.0, 4.0, 2.0, 1.0, math.pi / 2)
        points = np.array([[1.0, 3.9, 0.0], [2.9, 2.0, 0.0], [1.0, 2.0, 0.5], [1.0, 2.0, 0.51]])
        assert box.contains(points).tolist() == [True, False, True, False]


class TestBoxCodec:
    """anchor residual 인코딩 테스트"""

    def test_identical_box_encodes_to_zero(self):
        anchor = make_anchors("Car")[0]
        assert np.array_equal(encode(anchor.at((0, 0, 0)), anchor).as_array(), np.zeros(7))

    def test_offset_by_diagonal(self):
        anchor = make_anchors("Car")[0]
        gt = anchor.at((anchor.diagonal, 0.0, 0.0))
        residual = encode(gt, anchor)
        assert residual.dx == pytest.approx(1.0)
        assert residual.dy == 0.0

    def test_double_length(self):
        anchor = make_anchors("Car")[0]
        gt = Box3D(0, 0, 0, 2 * anchor.l, anchor.w, anchor.h, 0.0)
        assert encode(gt, anchor).dl == pytest.approx(math.log(2.0))

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        anchors = _random_boxes(rng, 10_000)
        gt = _random_boxes(rng, 10_000)
        gt[:, 6] = anchors[:, 6] + rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3, 10_000)
        restored = decode_boxes(encode_boxes(gt, anchors), anchors)
        diff = restored - gt
        diff[:, 6] = np.angle(np.exp(1j * diff[:, 6]))
        assert np.max(np.abs(diff)) <= 1e-9

    def test_height_normalized_z(self):
        anchor = make_anchors("Pedestrian")[0]
        gt = anchor.at((0.0, 0.0, anchor.h))
        assert encode(gt, anchor, z_norm="ha").dz == pytest.approx(1.0)
        with pytest.raises(ParameterError):
            encode(gt, anchor, z_norm="xy")

    def test_decode_clamps_heading(self):
        anchor = make_anchors("Car")[0]
        box = decode(BoxResidual(0, 0, 0, 0, 0, 0, 1.5), anchor)
        assert box.theta == pytest.approx(math.pi / 2)

    def test_decode_rejects_nonfinite(self):
        anchor = make_anchors("Car")[0]
        with pytest.raises(NumericError):
            decode([0, 0, 0, 0, 0, 0, float("nan")], anchor)
        with pytest.raises(NumericError):
            decode([0, 0, 0, 1000.0, 0, 0, 0], anchor)


class TestIoU:
    """회전 박스 IoU 테스트"""

    def test_identical_and_disjoint(self):
        box = Box3D(0, 0, 0, 4, 2, 1.5, 0.4)
        assert iou_bev(box, box) == pytest.approx(1.0)
        assert iou_3d(box, box) == pytest.approx(1.0)
        assert iou_bev(box, box.translated((10, 0, 0))) == 0.0

    def test_half_overlap(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        b = Box3D(1, 0, 0, 2, 2, 2, 0)
        assert iou_bev(a, b) == pytest.approx(1.0 / 3.0)
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0)

    def test_touching_edges_have_zero_iou(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        b = Box3D(2, 0, 0, 2, 2, 2, 0)
        assert iou_bev(a, b) == 0.0

    def test_square_rotated_by_quarter_turn(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        assert iou_bev(a, Box3D(0, 0, 0, 2, 2, 2, math.pi / 2)) == pytest.approx(1.0)

    def test_vertical_separation(self):
        a = Box3D(0, 0, 0, 2, 2, 1, 0)
        b = Box3D(0, 0, 2, 2, 2, 1, 0)
        assert iou_bev(a, b) == pytest.approx(1.0)
        assert iou_3d(a, b) == 0.0

    def test_pairs_match_matrix_diagonal(self):
        rng = np.random.default_rng(4)
        a, b = _random_boxes(rng, 20, 1.0), _random_boxes(rng, 20, 1.0)
        assert np.allclose(iou_bev_pairs(a, b), np.diag(iou_bev_matrix(a, b)), atol=1e-12)

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(7)
        for a, b in zip(_random_boxes(rng, 5, 1.0), _random_boxes(rng, 5, 1.0)):
            exact = iou_3d(Box3D.from_array(a), Box3D.from_array(b))
            assert abs(exact - monte_carlo_iou(a, b, 1_000_000, rng)) < 5e-3

    @pytest.mark.parametrize("seed", [20, 21, 22])
    def test_rigid_motion_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = _random_boxes(rng, 12, 1.0), _random_boxes(rng, 12, 1.0)
        phi = rng.uniform(-np.pi, np.pi)
        shift = rng.uniform(-30.0, 30.0, 3)
        cos, sin = math.cos(phi), math.sin(phi)

        def moved(boxes):
            out = boxes.copy()
            out[:, 0] = cos * boxes[:, 0] - sin * boxes[:, 1] + shift[0]
            out[:, 1] = sin * boxes[:, 0] + cos * boxes[:, 1] + shift[1]
            out[:, 2] = boxes[:, 2] + shift[2]
            out[:, 6] = normalize_angle(boxes[:, 6] + phi)
            return out

        ma, mb = moved(a), moved(b)
        for i in range(len(a)):
            before_a, before_b = Box3D.from_array(a[i]), Box3D.from_array(b[i])
            after_a, after_b = Box3D.from_array(ma[i]), Box3D.from_array(mb[i])
            assert iou_bev(after_a, after_b) == pytest.approx(iou_bev(before_a, before_b), abs=1e-9)
            assert iou_3d(after_a, after_b) == pytest.approx(iou_3d(before_a, before_b), abs=1e-9)
        assert np.allclose(iou_bev_matrix(ma, mb), iou_bev_matrix(a, b), atol=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(8)
        boxes = _random_boxes(rng, 15, 1.5)
        matrix = iou_bev_matrix(boxes, boxes)
        assert np.allclose(matrix, matrix.T, atol=1e-12)


class TestNms:
    """NMS 테스트"""

    def test_suppresses_overlapping_lower_score(self):
        box = [0, 0, 0, 4, 2, 1.5, 0]
        shifted = [0.1, 0, 0, 4, 2, 1.5, 0]
        detections = DetectionSet(["Car", "Car"], [0.6, 0.9], [box, shifted])
        kept = nms(detections, 0.7)
        assert kept.scores.tolist() == [0.9]

    def test_classes_are_independent(self):
        box = [0, 0, 0, 4, 2, 1.5, 0]
        detections = DetectionSet(["Car", "Cyclist"], [0.6, 0.9], [box, box])
        assert len(nms(detections, 0.5)) == 2

    def test_equal_scores_keep_first_index(self):
        box = [0, 0, 0, 4, 2, 1.5, 0]
        detections = DetectionSet(["Car", "Car"], [0.5, 0.5], [box, [0.05, 0, 0, 4, 2, 1.5, 0]])
        kept = nms(detections, 0.5)
        assert kept.boxes[0].tolist() == box

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            detections = DetectionSet(["Car"] * 80, rng.uniform(size=80), _random_boxes(rng, 80, 6.0))
            expected = detections.subset(naive_nms(detections, 0.5))
            assert np.array_equal(nms(detections, 0.5).boxes, expected.boxes)

    def test_nonfinite_score(self):
        detections = DetectionSet(["Car"], [float("nan")], [[0, 0, 0, 1, 1, 1, 0]])
        with pytest.raises(NumericError):
            nms(detections, 0.5)


class TestDetectionFiles:
    """검출 결과 파일 테스트"""

    def test_write_and_read(self, tmp_path):
        detections = DetectionSet(["Car", "Pedestrian"], [0.91, 0.5],
                                  [[1, 2, 3, 4, 1.6, 1.5, 0.25], [5, -1, 0, 0.8, 0.6, 1.7, -1.0]])
        path = write_detections(tmp_path / "000001.txt", detections)
        assert path.read_text().splitlines()[0] == \
            "Car 0.910000 1.000000 2.000000 3.000000 4.000000 1.600000 1.500000 0.250000"
        loaded = read_detections(path)
        assert loaded.classes == detections.classes
        assert np.allclose(loaded.boxes, detections.boxes)

    def test_empty_file(self, tmp_path):
        path = write_detections(tmp_path / "empty.txt", DetectionSet())
        assert path.read_text() == ""
        assert len(read_detections(path)) == 0

    def test_bad_line_reports_line_number(self):
        with pytest.raises(DataFormatError) as info:
            parse_detections("Car 0.5 1 2 3 4 5 6 7\nCar 0.5 1 2\n")
        assert info.value.line == 2

    def test_points_in_boxes_shape(self):
        assert points_in_boxes(np.zeros((5, 3)), np.zeros((0, 7))).shape == (5, 0)
