#!/usr/bin/env python3
"""
Point Cloud I/O for gatdet
KITTI velodyne/label/calib 읽기·쓰기, 카메라 frustum crop, 장면 JSON 직렬화
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from box_geometry import OBJECT_CLASSES, Box3D, normalize_angle
from detector_errors import DataFormatError, ParameterError

logger = logging.getLogger("gatdet-pointcloud")

RECORD_BYTES = 16
SCENE_FORMAT = "gatdet-scene"
SCENE_VERSION = 1
DIFFICULTIES = ("easy", "moderate", "hard")

# (최소 2D 박스 높이 px, 최대 occlusion, 최대 truncation)
DIFFICULTY_RULES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}

CALIB_ALIASES = {"R_rect": "R0_rect", "Tr_velo_cam": "Tr_velo_to_cam", "Tr_imu_velo": "Tr_imu_to_velo"}


class Point(NamedTuple):
    x: float
    y: float
    z: float
    reflectance: float


class PointCloud:
    """N×4 (x, y, z, reflectance) float64 배열 기반 포인트 클라우드"""

    def __init__(self, points: Optional[np.ndarray] = None, frame_id: str = "", skipped_records: int = 0):
        data = np.zeros((0, 4)) if points is None else np.array(points, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != 4:
            raise ParameterError(f"point array must be N×4, got {data.shape}")
        if data.size and not np.all(np.isfinite(data)):
            raise ParameterError("point coordinates must be finite")
        self.data = data
        self.frame_id = frame_id
        self.skipped_records = skipped_records

    @classmethod
    def from_arrays(cls, positions: np.ndarray, reflectance: np.ndarray, frame_id: str = "") -> "PointCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        reflectance = np.asarray(reflectance, dtype=np.float64).reshape(-1, 1)
        return cls(np.hstack([positions, reflectance]), frame_id)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __iter__(self) -> Iterator[Point]:
        for row in self.data:
            yield Point(*(float(v) for v in row))

    def __getitem__(self, index: int) -> Point:
        return Point(*(float(v) for v in self.data[index]))

    @property
    def positions(self) -> np.ndarray:
        return self.data[:, 0:3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.data[:, 3]

    def subset(self, selector: Union[np.ndarray, Sequence[int]]) -> "PointCloud":
        """boolean mask 또는 index로 부분 집합 (순서 유지)"""
        return PointCloud(self.data[np.asarray(selector)], self.frame_id)

    def fingerprint(self) -> str:
        return hashlib.md5(np.ascontiguousarray(self.data).tobytes()).hexdigest()


@dataclass(frozen=True)
class LabeledObject:
    """라벨 객체: 클래스, LiDAR 좌표계 박스, KITTI 부가 정보"""

    object_class: str
    box: Box3D
    difficulty: Optional[str] = None
    truncation: float = 0.0
    occlusion: int = 0
    alpha: float = -10.0
    bbox: tuple = (0.0, 0.0, 0.0, 0.0)
    score: Optional[float] = None

    def __post_init__(self):
        if self.object_class not in OBJECT_CLASSES:
            raise ParameterError(f"unknown object class '{self.object_class}'")
        if self.difficulty is not None and self.difficulty not in DIFFICULTIES:
            raise ParameterError(f"unknown difficulty '{self.difficulty}'")


@dataclass
class LabeledScene:
    """포인트 클라우드 + 라벨 객체 목록"""

    cloud: PointCloud
    objects: List[LabeledObject] = field(default_factory=list)
    scene_id: str = ""

    def objects_of(self, object_class: str) -> List[LabeledObject]:
        return [obj for obj in self.objects if obj.object_class == object_class]

    def boxes_of(self, object_class: str) -> np.ndarray:
        boxes = [obj.box.as_array() for obj in self.objects_of(object_class)]
        return np.array(boxes).reshape(-1, 7)


# ----------------------------------------------------------------------------
# velodyne
# ----------------------------------------------------------------------------

def read_velodyne(data: bytes, frame_id: str = "") -> PointCloud:
    """16 byte 레코드 (x, y, z, reflectance; little-endian float32) 파싱"""
    if len(data) % RECORD_BYTES:
        raise DataFormatError("trailing partial velodyne record",
                              offset=(len(data) // RECORD_BYTES) * RECORD_BYTES)
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(raw), axis=1)
    skipped = int(raw.shape[0] - finite.sum())
    if skipped:
        logger.warning(f"{frame_id or 'velodyne'}: skipped {skipped} records with non-finite values")
        raw = raw[finite]
    raw[:, 3] = np.clip(raw[:, 3], 0.0, 1.0)
    return PointCloud(raw, frame_id, skipped_records=skipped)


def write_velodyne(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.data, dtype="<f4").tobytes()


def load_velodyne(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    return read_velodyne(path.read_bytes(), frame_id=path.stem)


def save_velodyne(path: Union[str, Path], cloud: PointCloud) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_velodyne(cloud))
    return path


# ----------------------------------------------------------------------------
# calibration
# ----------------------------------------------------------------------------

def _homogeneous(matrix: np.ndarray) -> np.ndarray:
    full = np.eye(4)
    full[:matrix.shape[0], :matrix.shape[1]] = matrix
    return full


@dataclass
class Calibration:
    """P2 (3×4), R0_rect (3×3), Tr_velo_to_cam (3×4) 와 기타 원본 항목"""

    projection: np.ndarray
    rectification: np.ndarray
    velo_to_cam: np.ndarray
    entries: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64).reshape(3, 4)
        self.rectification = np.asarray(self.rectification, dtype=np.float64).reshape(3, 3)
        self.velo_to_cam = np.asarray(self.velo_to_cam, dtype=np.float64).reshape(3, 4)
        for matrix in (self.projection, self.rectification, self.velo_to_cam):
            if not np.all(np.isfinite(matrix)):
                raise DataFormatError("calibration matrix has non-finite entries")
        if not self.entries:
            self.entries = {
                "P2": self.projection.reshape(-1),
                "R0_rect": self.rectification.reshape(-1),
                "Tr_velo_to_cam": self.velo_to_cam.reshape(-1),
            }

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))

    def velo_to_rect(self) -> np.ndarray:
        """LiDAR → rectified camera 4×4 변환"""
        return _homogeneous(self.rectification) @ _homogeneous(self.velo_to_cam)

    def lidar_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        transform = self.velo_to_rect()
        return points @ transform[:3, :3].T + transform[:3, 3]

    def camera_to_lidar(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inverse = np.linalg.inv(self.velo_to_rect())
        return points @ inverse[:3, :3].T + inverse[:3, 3]

    def project(self, points: np.ndarray):
        """LiDAR 점의 이미지 좌표 (u, v)와 깊이"""
        camera = self.lidar_to_camera(points)
        image = np.hstack([camera, np.ones((camera.shape[0], 1))]) @ self.projection.T
        depth = image[:, 2]
        safe = np.where(depth > 0, depth, 1.0)
        return image[:, 0] / safe, image[:, 1] / safe, depth


def read_calib(text: str) -> Calibration:
    entries: Dict[str, np.ndarray] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise DataFormatError("calibration line lacks 'key:'", line=number)
        key = key.strip()
        try:
            entries[key] = np.array([float(v) for v in rest.split()], dtype=np.float64)
        except ValueError:
            raise DataFormatError(f"calibration entry '{key}' has a non-numeric value", line=number) from None
    resolved = {CALIB_ALIASES.get(key, key): value for key, value in entries.items()}
    required = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
    for key, size in required.items():
        if key not in resolved:
            raise DataFormatError(f"calibration is missing '{key}'")
        if resolved[key].size != size:
            raise DataFormatError(f"calibration entry '{key}' needs {size} values, got {resolved[key].size}")
    return Calibration(resolved["P2"], resolved["R0_rect"], resolved["Tr_velo_to_cam"], entries)


def write_calib(calib: Calibration) -> str:
    return "".join(f"{key}: " + " ".join(f"{v:.12e}" for v in values) + "\n"
                   for key, values in calib.entries.items())


def load_calib(path: Union[str, Path]) -> Calibration:
    return read_calib(Path(path).read_text())


# ----------------------------------------------------------------------------
# labels
# ----------------------------------------------------------------------------

def kitti_difficulty(bbox_height: float, occlusion: int, truncation: float) -> Optional[str]:
    """KITTI 규칙의 가장 쉬운 난이도, 어느 것도 아니면 None"""
    for name in DIFFICULTIES:
        min_height, max_occlusion, max_truncation = DIFFICULTY_RULES[name]
        if bbox_height >= min_height and occlusion <= max_occlusion and truncation <= max_truncation:
            return name
    return None


def read_labels(text: str, calib: Calibration) -> List[LabeledObject]:
    """KITTI label_2 파싱; DontCare 와 다른 클래스는 제외"""
    objects = []
    for number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise DataFormatError(f"label line needs 15 or 16 fields, got {len(fields)}", line=number)
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError:
            raise DataFormatError("label line has a non-numeric field", line=number) from None
        if not all(math.isfinite(v) for v in values):
            raise DataFormatError("label line has a non-finite field", line=number)
        object_class = fields[0]
        if object_class not in OBJECT_CLASSES:
            if object_class != "DontCare":
                logger.debug(f"label line {number}: class '{object_class}' ignored")
            continue
        truncation, occlusion, alpha = values[0], int(values[1]), values[2]
        bbox = tuple(values[3:7])
        h, w, l = values[7:10]
        if min(h, w, l) <= 0:
            raise DataFormatError("label box has non-positive dimensions", line=number)
        bottom = calib.camera_to_lidar(np.array(values[10:13]))[0]
        rotation_y = values[13]
        try:
            box = Box3D(bottom[0], bottom[1], bottom[2] + h / 2.0, l, w, h, -rotation_y - math.pi / 2.0)
        except ParameterError as exc:
            raise DataFormatError(f"label box is invalid: {exc}", line=number) from exc
        objects.append(LabeledObject(
            object_class, box,
            difficulty=kitti_difficulty(bbox[3] - bbox[1], occlusion, truncation),
            truncation=truncation, occlusion=occlusion, alpha=alpha, bbox=bbox,
            score=values[14] if len(values) == 15 else None))
    return objects


def _fixed2(value: float) -> str:
    text = f"{value:.2f}"
    return "0.00" if text == "-0.00" else text


def write_labels(objects: Sequence[LabeledObject], calib: Calibration) -> str:
    """LiDAR 박스를 KITTI 카메라 좌표계 label 텍스트로"""
    lines = []
    for obj in objects:
        box = obj.box
        bottom = calib.lidar_to_camera(np.array([box.x, box.y, box.z - box.h / 2.0]))[0]
        rotation_y = normalize_angle(-box.theta - math.pi / 2.0)
        fields = [obj.object_class, _fixed2(obj.truncation), str(int(obj.occlusion)), _fixed2(obj.alpha)]
        fields += [_fixed2(v) for v in obj.bbox]
        fields += [_fixed2(v) for v in (box.h, box.w, box.l, bottom[0], bottom[1], bottom[2], rotation_y)]
        if obj.score is not None:
            fields.append(_fixed2(obj.score))
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def load_labels(path: Union[str, Path], calib: Calibration) -> List[LabeledObject]:
    return read_labels(Path(path).read_text(), calib)


# ----------------------------------------------------------------------------
# frustum
# ----------------------------------------------------------------------------

def frustum_mask(cloud: PointCloud, calib: Calibration, width: int, height: int) -> np.ndarray:
    u, v, depth = calib.project(cloud.positions)
    return (depth > 0) & (u >= 0) & (u < width) & (v >= 0) & (v < height)


def crop_to_frustum(cloud: PointCloud, calib: Calibration, width: int, height: int) -> PointCloud:
    """카메라 이미지 [0,W)×[0,H) 에 투영되고 깊이가 양수인 점만 유지"""
    if width <= 0 or height <= 0:
        raise ParameterError(f"image size must be positive, got {width}×{height}")
    if len(cloud) == 0:
        return PointCloud(frame_id=cloud.frame_id)
    return cloud.subset(frustum_mask(cloud, calib, width, height))


# ----------------------------------------------------------------------------
# 장면 JSON
# ----------------------------------------------------------------------------

def scene_to_dict(scene: LabeledScene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "scene_id": scene.scene_id,
        "frame_id": scene.cloud.frame_id,
        "points": scene.cloud.data.tolist(),
        "objects": [
            {
                "class": obj.object_class,
                "box": obj.box.as_array().tolist(),
                "difficulty": obj.difficulty,
            }
            for obj in scene.objects
        ],
    }


def scene_from_dict(payload: dict) -> LabeledScene:
    if payload.get("format") != SCENE_FORMAT:
        raise DataFormatError(f"not a {SCENE_FORMAT} document")
    if payload.get("version") != SCENE_VERSION:
        raise DataFormatError(f"unsupported scene version {payload.get('version')}")
    try:
        points = np.array(payload["points"], dtype=np.float64).reshape(-1, 4)
        objects = [LabeledObject(item["class"], Box3D.from_array(item["box"]), item.get("difficulty"))
                   for item in payload["objects"]]
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"malformed scene document: {e}") from None
    return LabeledScene(PointCloud(points, payload.get("frame_id", "")), objects, payload.get("scene_id", ""))


def save_scene(path: Union[str, Path], scene: LabeledScene) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scene_to_dict(scene)))
    return path


def load_scene(path: Union[str, Path]) -> LabeledScene:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path.name}: invalid JSON: {e.msg}", line=e.lineno) from None
    return scene_from_dict(payload)


def load_scene_dir(directory: Union[str, Path]) -> List[LabeledScene]:
    """디렉토리의 *.json 장면을 파일명 순으로 로드"""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"scene directory not found: {directory}")
    return [load_scene(path) for path in sorted(directory.glob("*.json"))]
