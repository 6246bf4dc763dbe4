#!/usr/bin/env python3
"""
Box Geometry for gatdet
7-DoF 박스, anchor residual 인코딩/디코딩, 회전 BEV/3D IoU, NMS, 검출 결과 파일
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import shapely

from detector_errors import DataFormatError, NumericError, ParameterError

logger = logging.getLogger("gatdet-boxes")

OBJECT_CLASSES = ("Car", "Pedestrian", "Cyclist")

# (w, l, h) meters
ANCHOR_SIZES: Dict[str, Tuple[float, float, float]] = {
    "Car": (1.6, 3.9, 1.5),
    "Pedestrian": (0.6, 0.8, 1.73),
    "Cyclist": (0.6, 1.76, 1.73),
}
ANCHOR_ROTATIONS = (0.0, math.pi / 2)

TOUCH_EPSILON = 1e-9
HEADING_CLAMP_WARN = 1e-6
Z_NORMS = ("da", "ha")


def normalize_angle(theta):
    """각도를 (−π, π] 로 정규화 (scalar 또는 배열)"""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2.0 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class Box3D:
    """LiDAR 좌표계의 중심, 크기 (l, w, h), heading"""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        values = (self.x, self.y, self.z, self.l, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in values):
            raise ParameterError(f"box has non-finite fields: {values}")
        if min(self.l, self.w, self.h) <= 0:
            raise ParameterError(f"box dimensions must be positive: l={self.l} w={self.w} h={self.h}")
        for name, value in zip(("x", "y", "z", "l", "w", "h"), values[:6]):
            object.__setattr__(self, name, float(value))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        return cls(*[float(v) for v in values])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def corners_bev(self) -> np.ndarray:
        return bev_corners(self.as_array()[None, :])[0]

    def contains(self, points: np.ndarray, tolerance: float = 0.0) -> np.ndarray:
        """점들이 박스 안(경계 포함)에 있는지"""
        return points_in_boxes(np.asarray(points, dtype=np.float64), self.as_array()[None, :],
                               tolerance)[:, 0]

    def translated(self, offset: Sequence[float]) -> "Box3D":
        return Box3D(self.x + offset[0], self.y + offset[1], self.z + offset[2],
                     self.l, self.w, self.h, self.theta)

    def rotated_about_origin(self, angle: float) -> "Box3D":
        """z 축 기준 원점 회전"""
        c, s = math.cos(angle), math.sin(angle)
        return Box3D(c * self.x - s * self.y, s * self.x + c * self.y, self.z,
                     self.l, self.w, self.h, self.theta + angle)

    def flipped_y(self) -> "Box3D":
        """전방(x) 축 기준 좌우 반전"""
        return Box3D(self.x, -self.y, self.z, self.l, self.w, self.h, -self.theta)


class BoxResidual(NamedTuple):
    """anchor 대비 7-성분 residual"""

    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


@dataclass(frozen=True)
class Anchor:
    """클래스별 anchor 템플릿 (회전 변형 포함)"""

    object_class: str
    w: float
    l: float
    h: float
    theta: float = 0.0
    rotation_index: int = 0

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.w ** 2 + self.l ** 2)

    def at(self, position: Sequence[float]) -> Box3D:
        """vertex 위치에 중심을 둔 anchor 박스"""
        return Box3D(position[0], position[1], position[2], self.l, self.w, self.h, self.theta)

    def boxes_at(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        template = np.array([self.l, self.w, self.h, normalize_angle(self.theta)])
        return np.hstack([positions, np.broadcast_to(template, (positions.shape[0], 4))])


def make_anchors(object_class: str, size: Optional[Sequence[float]] = None,
                 rotations: Sequence[float] = ANCHOR_ROTATIONS) -> List[Anchor]:
    """(w, l, h) 크기와 회전 목록으로 anchor 생성"""
    if size is None:
        if object_class not in ANCHOR_SIZES:
            raise ParameterError(f"no default anchor for class '{object_class}'")
        size = ANCHOR_SIZES[object_class]
    w, l, h = (float(v) for v in size)
    if min(w, l, h) <= 0:
        raise ParameterError(f"anchor size must be positive: {size}")
    return [Anchor(object_class, w, l, h, float(rotation), i) for i, rotation in enumerate(rotations)]


# ----------------------------------------------------------------------------
# residual 인코딩
# ----------------------------------------------------------------------------

def _z_scale(anchor_boxes: np.ndarray, z_norm: str) -> np.ndarray:
    if z_norm == "da":
        return np.sqrt(anchor_boxes[:, 3] ** 2 + anchor_boxes[:, 4] ** 2)
    if z_norm == "ha":
        return anchor_boxes[:, 5]
    raise ParameterError(f"z_norm must be one of {Z_NORMS}, got '{z_norm}'")


def encode_boxes(gt_boxes: np.ndarray, anchor_boxes: np.ndarray, z_norm: str = "da") -> np.ndarray:
    """(P×7) 정답 박스를 (P×7) anchor 대비 residual로 변환"""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 7)
    diagonal = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    residuals = np.empty_like(gt)
    residuals[:, 0] = (gt[:, 0] - anchors[:, 0]) / diagonal
    residuals[:, 1] = (gt[:, 1] - anchors[:, 1]) / diagonal
    residuals[:, 2] = (gt[:, 2] - anchors[:, 2]) / _z_scale(anchors, z_norm)
    residuals[:, 3:6] = np.log(gt[:, 3:6] / anchors[:, 3:6])
    residuals[:, 6] = np.sin(gt[:, 6] - anchors[:, 6])
    return residuals


def decode_boxes(residuals: np.ndarray, anchor_boxes: np.ndarray, z_norm: str = "da") -> np.ndarray:
    """residual을 박스 배열로 복원 (δθ는 [−1, 1]로 clamp)"""
    res = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 7)
    if not np.all(np.isfinite(res)):
        raise NumericError("non-finite box residual")
    overshoot = np.abs(res[:, 6]) > 1.0 + HEADING_CLAMP_WARN
    if np.any(overshoot):
        logger.warning(f"heading residual outside [-1, 1] clamped for {int(overshoot.sum())} boxes")
    diagonal = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    boxes = np.empty_like(res)
    boxes[:, 0] = anchors[:, 0] + res[:, 0] * diagonal
    boxes[:, 1] = anchors[:, 1] + res[:, 1] * diagonal
    boxes[:, 2] = anchors[:, 2] + res[:, 2] * _z_scale(anchors, z_norm)
    with np.errstate(over="ignore"):
        boxes[:, 3:6] = anchors[:, 3:6] * np.exp(res[:, 3:6])
    boxes[:, 6] = normalize_angle(anchors[:, 6] + np.arcsin(np.clip(res[:, 6], -1.0, 1.0)))
    if not np.all(np.isfinite(boxes)):
        raise NumericError("decoded box is not finite (size residual overflow)")
    return boxes


def encode(gt: Box3D, anchor: Union[Anchor, Box3D], z_norm: str = "da") -> BoxResidual:
    anchor_box = anchor if isinstance(anchor, Box3D) else anchor.at((0.0, 0.0, 0.0))
    return BoxResidual(*encode_boxes(gt.as_array(), anchor_box.as_array(), z_norm)[0])


def decode(residual: Union[BoxResidual, Sequence[float]], anchor: Union[Anchor, Box3D],
           z_norm: str = "da") -> Box3D:
    anchor_box = anchor if isinstance(anchor, Box3D) else anchor.at((0.0, 0.0, 0.0))
    return Box3D.from_array(decode_boxes(np.asarray(residual, dtype=np.float64),
                                         anchor_box.as_array(), z_norm)[0])


# ----------------------------------------------------------------------------
# 기하 연산
# ----------------------------------------------------------------------------

def bev_corners(boxes: np.ndarray) -> np.ndarray:
    """(n×7) 박스의 BEV 꼭짓점 (n×4×2), 반시계 방향"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    half_l, half_w = boxes[:, 3] / 2.0, boxes[:, 4] / 2.0
    local = np.stack([np.stack([half_l, half_w], -1), np.stack([-half_l, half_w], -1),
                      np.stack([-half_l, -half_w], -1), np.stack([half_l, -half_w], -1)], axis=1)
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    rotation = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)
    return np.einsum("nij,nkj->nki", rotation, local) + boxes[:, None, 0:2]


def points_in_boxes(points: np.ndarray, boxes: np.ndarray, tolerance: float = 0.0) -> np.ndarray:
    """(N×3) 점 × (B×7) 박스 포함 여부 (N×B), 역회전 후 경계 포함 비교"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    offsets = points[:, None, :] - boxes[None, :, 0:3]
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    local_x = c * offsets[..., 0] + s * offsets[..., 1]
    local_y = -s * offsets[..., 0] + c * offsets[..., 1]
    return ((np.abs(local_x) <= boxes[:, 3] / 2.0 + tolerance)
            & (np.abs(local_y) <= boxes[:, 4] / 2.0 + tolerance)
            & (np.abs(offsets[..., 2]) <= boxes[:, 5] / 2.0 + tolerance))


def _polygons(boxes: np.ndarray) -> np.ndarray:
    corners = bev_corners(boxes)
    return shapely.polygons(np.concatenate([corners, corners[:, :1]], axis=1))


def bev_intersection_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """BEV 교집합 면적 (n×m); 외접원이 겹치는 쌍만 polygon 연산"""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    areas = np.zeros((a.shape[0], b.shape[0]))
    if areas.size == 0:
        return areas
    radius_a = np.hypot(a[:, 3], a[:, 4]) / 2.0
    radius_b = np.hypot(b[:, 3], b[:, 4]) / 2.0
    gaps = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    rows, cols = np.nonzero(gaps < radius_a[:, None] + radius_b[None, :])
    if rows.size:
        polygons_a, polygons_b = _polygons(a), _polygons(b)
        areas[rows, cols] = shapely.area(shapely.intersection(polygons_a[rows], polygons_b[cols]))
    floor = TOUCH_EPSILON * np.minimum((a[:, 3] * a[:, 4])[:, None], (b[:, 3] * b[:, 4])[None, :])
    areas[areas <= floor] = 0.0
    return areas


def iou_bev_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    intersection = bev_intersection_matrix(a, b)
    union = (a[:, 3] * a[:, 4])[:, None] + (b[:, 3] * b[:, 4])[None, :] - intersection
    return np.clip(intersection / union, 0.0, 1.0)


def iou_3d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    intersection = bev_intersection_matrix(a, b)
    top = np.minimum((a[:, 2] + a[:, 5] / 2.0)[:, None], (b[:, 2] + b[:, 5] / 2.0)[None, :])
    bottom = np.maximum((a[:, 2] - a[:, 5] / 2.0)[:, None], (b[:, 2] - b[:, 5] / 2.0)[None, :])
    volume = intersection * np.maximum(top - bottom, 0.0)
    union = (a[:, 3] * a[:, 4] * a[:, 5])[:, None] + (b[:, 3] * b[:, 4] * b[:, 5])[None, :] - volume
    return np.clip(volume / union, 0.0, 1.0)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray, iou_kind: str = "bev") -> np.ndarray:
    if iou_kind == "bev":
        return iou_bev_matrix(boxes_a, boxes_b)
    if iou_kind == "3d":
        return iou_3d_matrix(boxes_a, boxes_b)
    raise ParameterError(f"iou kind must be 'bev' or '3d', got '{iou_kind}'")


def iou_bev_pairs(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """행 단위로 짝지은 박스 쌍의 BEV IoU (n,)"""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    if a.shape != b.shape:
        raise ParameterError(f"paired IoU needs equal counts, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] == 0:
        return np.zeros(0)
    intersection = shapely.area(shapely.intersection(_polygons(a), _polygons(b)))
    intersection = np.where(intersection <= TOUCH_EPSILON * np.minimum(a[:, 3] * a[:, 4], b[:, 3] * b[:, 4]),
                            0.0, intersection)
    union = a[:, 3] * a[:, 4] + b[:, 3] * b[:, 4] - intersection
    return np.clip(intersection / union, 0.0, 1.0)


def iou_bev(a: Box3D, b: Box3D) -> float:
    return float(iou_bev_matrix(a.as_array(), b.as_array())[0, 0])


def iou_3d(a: Box3D, b: Box3D) -> float:
    return float(iou_3d_matrix(a.as_array(), b.as_array())[0, 0])


# ----------------------------------------------------------------------------
# 검출 결과
# ----------------------------------------------------------------------------

@dataclass
class DetectionSet:
    """클래스, 점수, 박스 (n×7) 배열 묶음"""

    classes: List[str] = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))

    def __post_init__(self):
        self.classes = list(self.classes)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        if not (len(self.classes) == self.scores.shape[0] == self.boxes.shape[0]):
            raise ParameterError("detection classes, scores and boxes must have equal length")

    def __len__(self) -> int:
        return len(self.classes)

    def subset(self, indices: Sequence[int]) -> "DetectionSet":
        indices = np.asarray(indices, dtype=np.int64)
        return DetectionSet([self.classes[i] for i in indices], self.scores[indices], self.boxes[indices])

    def of_class(self, object_class: str) -> "DetectionSet":
        return self.subset([i for i, name in enumerate(self.classes) if name == object_class])

    def box(self, index: int) -> Box3D:
        return Box3D.from_array(self.boxes[index])


def nms(detections: DetectionSet, iou_threshold: float, iou_kind: str = "bev") -> DetectionSet:
    """클래스별 greedy NMS, 결과는 (−score, 원래 index) 순"""
    if len(detections) and not np.all(np.isfinite(detections.scores)):
        raise NumericError("NMS requires finite scores")
    kept: List[int] = []
    classes = np.array(detections.classes, dtype=object)
    for object_class in sorted(set(detections.classes)):
        members = np.nonzero(classes == object_class)[0]
        order = members[np.argsort(-detections.scores[members], kind="stable")]
        overlaps = iou_matrix(detections.boxes[order], detections.boxes[order], iou_kind)
        suppressed = np.zeros(order.shape[0], dtype=bool)
        for rank in range(order.shape[0]):
            if suppressed[rank]:
                continue
            kept.append(int(order[rank]))
            suppressed[rank + 1:] |= overlaps[rank, rank + 1:] > iou_threshold
    kept.sort(key=lambda i: (-detections.scores[i], i))
    logger.debug(f"NMS kept {len(kept)}/{len(detections)} detections")
    return detections.subset(kept)


def format_detections(detections: DetectionSet) -> str:
    lines = []
    for name, score, box in zip(detections.classes, detections.scores, detections.boxes):
        values = " ".join(f"{v:.6f}" for v in box)
        lines.append(f"{name} {score:.6f} {values}")
    return "".join(line + "\n" for line in lines)


def parse_detections(text: str) -> DetectionSet:
    classes, scores, boxes = [], [], []
    for number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 9:
            raise DataFormatError(f"detection line needs 9 fields, got {len(fields)}", line=number)
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError:
            raise DataFormatError("detection line has a non-numeric field", line=number) from None
        classes.append(fields[0])
        scores.append(values[0])
        boxes.append(values[1:])
    return DetectionSet(classes, np.array(scores), np.array(boxes).reshape(-1, 7))


def write_detections(path: Union[str, Path], detections: DetectionSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_detections(detections))
    return path


def read_detections(path: Union[str, Path]) -> DetectionSet:
    return parse_detections(Path(path).read_text())
