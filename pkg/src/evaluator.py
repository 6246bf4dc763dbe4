#!/usr/bin/env python3
"""
Detection Evaluator for gatdet
greedy 매칭, 11/40-point 보간 AP, 클래스·IoU 종류·난이도별 리포트
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from box_geometry import OBJECT_CLASSES, DetectionSet, iou_matrix
from detector_errors import ParameterError
from pointcloud_io import DIFFICULTIES, LabeledObject

logger = logging.getLogger("gatdet-eval")

RECALL_TOLERANCE = 1e-12
IGNORED = -1


class PRPoint(NamedTuple):
    recall: float
    precision: float


@dataclass
class EvalConfig:
    """클래스별 IoU 기준, 보간 방식, IoU 종류"""

    iou_thresholds: Dict[str, float] = field(
        default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5})
    interpolation: int = 11
    iou_kinds: Tuple[str, ...] = ("3d", "bev")

    def validate(self):
        for name, threshold in self.iou_thresholds.items():
            if name not in OBJECT_CLASSES:
                raise ParameterError(f"unknown class '{name}' in IoU thresholds")
            if not 0 < threshold <= 1:
                raise ParameterError(f"IoU threshold for {name} must lie in (0, 1]")
        if self.interpolation not in (11, 40):
            raise ParameterError("interpolation must be 11 or 40")
        for kind in self.iou_kinds:
            if kind not in ("3d", "bev"):
                raise ParameterError(f"unknown IoU kind '{kind}'")


@dataclass
class MatchResult:
    """검출별 TP 여부 (입력 순서)와 정답별 매칭 여부"""

    true_positive: np.ndarray
    gt_matched: np.ndarray
    matched_gt: np.ndarray


def match_detections(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray,
                     iou_threshold: float, iou_kind: str = "3d") -> MatchResult:
    """점수 내림차순으로 아직 매칭 안 된 정답 중 IoU 최대(≥ 기준)와 매칭"""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 7)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    overlaps = iou_matrix(det_boxes, gt_boxes, iou_kind)
    true_positive = np.zeros(det_boxes.shape[0], dtype=bool)
    matched_gt = np.full(det_boxes.shape[0], IGNORED, dtype=np.int64)
    gt_matched = np.zeros(gt_boxes.shape[0], dtype=bool)
    for det in np.argsort(-det_scores, kind="stable"):
        if gt_boxes.shape[0] == 0:
            break
        candidates = np.where(gt_matched, -np.inf, overlaps[det])
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_threshold:
            gt_matched[best] = True
            true_positive[det] = True
            matched_gt[det] = best
    return MatchResult(true_positive, gt_matched, matched_gt)


def precision_recall(flags: Sequence[bool], num_gt: int) -> List[PRPoint]:
    """점수순 TP/FP 플래그의 누적 precision-recall"""
    flags = np.asarray(flags, dtype=bool)
    if num_gt <= 0 or flags.size == 0:
        return []
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    return [PRPoint(float(r), float(p)) for r, p in zip(tp / num_gt, tp / (tp + fp))]


def average_precision(flags: Sequence[bool], num_gt: int, interpolation: int = 11) -> Optional[float]:
    """보간 AP; 정답이 없으면 None"""
    if num_gt <= 0:
        return None
    if interpolation == 11:
        levels = np.linspace(0.0, 1.0, 11)
    elif interpolation == 40:
        levels = np.arange(1, 41) / 40.0
    else:
        raise ParameterError("interpolation must be 11 or 40")
    curve = precision_recall(flags, num_gt)
    if not curve:
        return 0.0
    recall = np.array([p.recall for p in curve])
    precision = np.array([p.precision for p in curve])
    # recall 이상 구간의 최대 precision
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for level in levels:
        reached = np.nonzero(recall >= level - RECALL_TOLERANCE)[0]
        total += envelope[reached[0]] if reached.size else 0.0
    return float(total / len(levels))


def _bucket_mask(objects: Sequence[LabeledObject], bucket: str) -> np.ndarray:
    """누적 난이도 bucket 에 포함되는 정답 (easy ⊂ moderate ⊂ hard)"""
    if bucket == "all":
        return np.ones(len(objects), dtype=bool)
    limit = DIFFICULTIES.index(bucket)
    return np.array([obj.difficulty is not None and DIFFICULTIES.index(obj.difficulty) <= limit
                     for obj in objects], dtype=bool)


@dataclass
class EvaluationReport:
    """AP 표와 PR 곡선 점"""

    summary: pd.DataFrame
    curves: pd.DataFrame

    def ap(self, object_class: str, iou_kind: str, difficulty: str = "all") -> Optional[float]:
        rows = self.summary[(self.summary["class"] == object_class) & (self.summary["iou_kind"] == iou_kind)
                            & (self.summary["difficulty"] == difficulty)]
        if rows.empty or pd.isna(rows["ap"].iloc[0]):
            return None
        return float(rows["ap"].iloc[0])


def evaluate_dataset(predictions: Mapping[str, DetectionSet],
                     ground_truth: Mapping[str, Sequence[LabeledObject]],
                     config: Optional[EvalConfig] = None,
                     classes: Optional[Sequence[str]] = None) -> EvaluationReport:
    """scene id 순으로 매칭 결과를 모아 클래스/IoU 종류/난이도별 AP 계산"""
    config = config or EvalConfig()
    config.validate()
    scene_ids = sorted(ground_truth.keys())
    missing = [scene_id for scene_id in predictions if scene_id not in ground_truth]
    if missing:
        logger.warning(f"{len(missing)} prediction files have no ground truth and are ignored")
    if classes is None:
        present = {obj.object_class for objs in ground_truth.values() for obj in objs}
        present |= {name for dets in predictions.values() for name in dets.classes}
        classes = [name for name in OBJECT_CLASSES if name in present]
    has_difficulty = any(obj.difficulty is not None for objs in ground_truth.values() for obj in objs)
    buckets = ["all"] + (list(DIFFICULTIES) if has_difficulty else [])

    summary_rows, curve_rows = [], []
    for object_class in classes:
        threshold = config.iou_thresholds.get(object_class, 0.5)
        for iou_kind in config.iou_kinds:
            for bucket in buckets:
                scores, flags, num_gt, num_det = [], [], 0, 0
                for scene_id in scene_ids:
                    objects = [obj for obj in ground_truth[scene_id] if obj.object_class == object_class]
                    dets = predictions.get(scene_id, DetectionSet()).of_class(object_class)
                    gt_boxes = np.array([obj.box.as_array() for obj in objects]).reshape(-1, 7)
                    cared = _bucket_mask(objects, bucket)
                    result = match_detections(dets.boxes, dets.scores, gt_boxes, threshold, iou_kind)
                    # 제외된 정답에 매칭된 검출은 TP/FP 어느 쪽도 아님
                    matched = result.matched_gt != IGNORED
                    keep = np.ones(len(dets), dtype=bool)
                    keep[matched] = cared[result.matched_gt[matched]]
                    num_gt += int(cared.sum())
                    num_det += int(keep.sum())
                    scores.extend(dets.scores[keep].tolist())
                    flags.extend(result.true_positive[keep].tolist())
                order = np.argsort(-np.array(scores), kind="stable")
                ordered_flags = np.array(flags, dtype=bool)[order]
                ap = average_precision(ordered_flags, num_gt, config.interpolation)
                summary_rows.append({"class": object_class, "iou_kind": iou_kind, "difficulty": bucket,
                                     "iou_threshold": threshold, "num_gt": num_gt, "num_det": num_det,
                                     "ap": ap})
                for point in precision_recall(ordered_flags, num_gt):
                    curve_rows.append({"class": object_class, "iou_kind": iou_kind, "difficulty": bucket,
                                       "recall": point.recall, "precision": point.precision})
                logger.debug(f"{object_class}/{iou_kind}/{bucket}: AP={ap} ({num_det} dets, {num_gt} gt)")

    summary = pd.DataFrame(summary_rows, columns=["class", "iou_kind", "difficulty", "iou_threshold",
                                                  "num_gt", "num_det", "ap"])
    curves = pd.DataFrame(curve_rows, columns=["class", "iou_kind", "difficulty", "recall", "precision"])
    return EvaluationReport(summary, curves)


def write_report(report: EvaluationReport, path: Union[str, Path]) -> Path:
    """AP 표와 PR 곡선을 하나의 tab-separated 파일로"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = report.summary.assign(record="ap")
    curves = report.curves.assign(record="pr")
    table = pd.concat([summary, curves], ignore_index=True)
    columns = ["record", "class", "iou_kind", "difficulty", "iou_threshold", "num_gt", "num_det", "ap",
               "recall", "precision"]
    table.reindex(columns=columns).to_csv(path, sep="\t", index=False, float_format="%.6f")
    return path
