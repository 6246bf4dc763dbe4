#!/usr/bin/env python3
"""
Trainer for gatdet
vertex 타깃 할당, 데이터 증강, Adam 최적화, 학습률 스케줄, 학습 루프
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from box_geometry import (
    OBJECT_CLASSES, Anchor, bev_intersection_matrix, encode_boxes, iou_bev_pairs, points_in_boxes,
)
from cache_manager import CacheManager
from checkpoint_store import save_checkpoint
from detection_loss import LossConfig, VertexTargets, detection_loss
from detector import Detector, DetectorConfig, PreparedScene, checkpoint_metadata, prepare_cloud
from detector_errors import ConfigError, NumericError, ParameterError
from evaluator import EvalConfig, evaluate_dataset
from gnn_model import forward, init_params, predict_heads
from pointcloud_io import LabeledScene, PointCloud
from tensor_core import BN_MOMENTUM, ParameterBinding, ParameterStore, Tape, backward

logger = logging.getLogger("gatdet-trainer")

# (초기 학습률, 감쇠율, 감쇠 간격, 총 step)
SCHEDULES: Dict[str, Tuple[float, float, int, int]] = {
    "desk": (0.001, 0.5, 2000, 5000),
    "kitti-car": (0.125, 0.1, 400_000, 1_400_000),
    "kitti-pedestrian": (0.25, 0.25, 400_000, 1_000_000),
    "kitti-cyclist": (0.32, 0.25, 400_000, 1_000_000),
}

METRIC_COLUMNS = ["step", "cls", "loc", "reg", "total", "lr"]


@dataclass
class AugmentToggles:
    """증강 on/off 와 크기"""

    rotation: bool = True
    flip: bool = True
    jitter: bool = True
    rotation_range: float = math.pi / 4
    flip_probability: float = 0.5
    jitter_sigma: float = 0.25

    @property
    def any_enabled(self) -> bool:
        return self.rotation or self.flip or self.jitter

    def validate(self):
        if self.rotation_range < 0 or self.jitter_sigma < 0:
            raise ParameterError("augmentation magnitudes must be non-negative")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ParameterError("flip_probability must lie in [0, 1]")


@dataclass
class TrainConfig:
    """학습 설정 (기본값은 desk-scale 스케줄)"""

    steps: int = 5000
    batch_size: int = 2
    learning_rate: float = 0.001
    decay_factor: float = 0.5
    decay_interval: int = 2000
    seed: int = 0
    object_class: str = "Car"
    augmentation: AugmentToggles = field(default_factory=AugmentToggles)
    train_scenes: int = 200
    validation_scenes: int = 50
    validation_interval: int = 1000
    log_interval: int = 100
    schedule: Optional[str] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def validate(self):
        if self.steps < 0:
            raise ParameterError("steps must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ParameterError("decay_factor must lie in (0, 1]")
        if self.decay_interval < 1:
            raise ParameterError("decay_interval must be at least 1")
        if self.object_class not in OBJECT_CLASSES:
            raise ParameterError(f"unknown object class '{self.object_class}'")
        if self.train_scenes < 0 or self.validation_scenes < 0:
            raise ParameterError("scene counts must be non-negative")
        if self.validation_interval < 0 or self.log_interval < 1:
            raise ParameterError("validation_interval must be >= 0 and log_interval >= 1")
        if self.schedule is not None and self.schedule not in SCHEDULES:
            raise ParameterError(f"unknown schedule '{self.schedule}', choose from {sorted(SCHEDULES)}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise ParameterError("invalid Adam hyperparameters")
        self.augmentation.validate()

    def with_schedule(self, name: str) -> "TrainConfig":
        """이름 붙은 스케줄의 학습률/감쇠/step 적용"""
        if name not in SCHEDULES:
            raise ParameterError(f"unknown schedule '{name}', choose from {sorted(SCHEDULES)}")
        lr, decay, interval, steps = SCHEDULES[name]
        return replace(self, schedule=name, learning_rate=lr, decay_factor=decay,
                       decay_interval=interval, steps=steps)


def learning_rate(config: TrainConfig, step: int) -> float:
    """lr₀ · decay^⌊step / interval⌋"""
    return config.learning_rate * config.decay_factor ** (step // config.decay_interval)


# ----------------------------------------------------------------------------
# 타깃 할당
# ----------------------------------------------------------------------------

@dataclass
class AssignmentResult:
    targets: VertexTargets
    object_counts: np.ndarray
    owners: np.ndarray


def assign_targets(positions: np.ndarray, scene: LabeledScene, anchors: Sequence[Anchor],
                   z_norm: str = "da") -> AssignmentResult:
    """학습 클래스 정답 박스 안의 vertex 를 양성으로, anchor 는 BEV IoU 가 큰 회전 변형"""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    count = positions.shape[0]
    boxes = scene.boxes_of(anchors[0].object_class)
    owners = np.full(count, -1, dtype=np.int64)
    if boxes.shape[0] == 0 or count == 0:
        return AssignmentResult(VertexTargets.background(count), np.zeros(boxes.shape[0], dtype=np.int64), owners)

    inside = points_in_boxes(positions, boxes)
    distances = np.linalg.norm(positions[:, None, :] - boxes[None, :, 0:3], axis=2)
    # 여러 박스에 속하면 중심이 가장 가까운 박스
    distances[~inside] = np.inf
    positive = np.nonzero(inside.any(axis=1))[0]
    owners[positive] = np.argmin(distances[positive], axis=1)
    matched = boxes[owners[positive]]

    candidates = np.stack([anchor.boxes_at(positions[positive]) for anchor in anchors])
    overlaps = np.stack([iou_bev_pairs(candidates[a], matched) for a in range(len(anchors))])
    best = np.argmax(overlaps, axis=0) if positive.size else np.zeros(0, dtype=np.int64)
    anchor_boxes = candidates[best, np.arange(positive.size)]

    labels = np.zeros(count, dtype=np.int64)
    labels[positive] = 1 + best
    targets = VertexTargets(labels, positive, encode_boxes(matched, anchor_boxes, z_norm), best)
    object_counts = np.bincount(owners[positive], minlength=boxes.shape[0])
    return AssignmentResult(targets, object_counts, owners)


# ----------------------------------------------------------------------------
# 데이터 증강
# ----------------------------------------------------------------------------

def _rotate_points(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rotated = points.copy()
    rotated[:, 0] = c * points[:, 0] - s * points[:, 1]
    rotated[:, 1] = s * points[:, 0] + c * points[:, 1]
    return rotated


def flip_scene(scene: LabeledScene) -> LabeledScene:
    """전방(x) 축 기준 좌우 반전 (y → −y, θ → −θ)"""
    points = scene.cloud.data.copy()
    points[:, 1] = -points[:, 1]
    objects = [replace(obj, box=obj.box.flipped_y()) for obj in scene.objects]
    return LabeledScene(PointCloud(points, scene.cloud.frame_id), objects, scene.scene_id)


def rotate_scene(scene: LabeledScene, angle: float) -> LabeledScene:
    """z 축 기준 전역 회전"""
    points = _rotate_points(scene.cloud.data, angle)
    objects = [replace(obj, box=obj.box.rotated_about_origin(angle)) for obj in scene.objects]
    return LabeledScene(PointCloud(points, scene.cloud.frame_id), objects, scene.scene_id)


def jitter_objects(scene: LabeledScene, offsets: np.ndarray) -> Tuple[LabeledScene, int]:
    """객체별 (x, y) 이동; 다른 박스와 겹치면 그 객체만 되돌림"""
    points = scene.cloud.data.copy()
    objects = list(scene.objects)
    rolled_back = 0
    for i, obj in enumerate(objects):
        moved = obj.box.translated((offsets[i, 0], offsets[i, 1], 0.0))
        others = np.array([o.box.as_array() for j, o in enumerate(objects) if j != i]).reshape(-1, 7)
        if others.shape[0] and np.any(bev_intersection_matrix(moved.as_array()[None, :], others) > 0):
            rolled_back += 1
            continue
        members = obj.box.contains(points[:, :3])
        points[members, 0] += offsets[i, 0]
        points[members, 1] += offsets[i, 1]
        # 이동한 박스 안에 들어온 다른 점은 제거
        intruders = moved.contains(points[:, :3]) & ~members
        keep = ~intruders
        points = points[keep]
        objects[i] = replace(obj, box=moved)
    return LabeledScene(PointCloud(points, scene.cloud.frame_id), objects, scene.scene_id), rolled_back


def augment(scene: LabeledScene, seed: int, toggles: Optional[AugmentToggles] = None) -> LabeledScene:
    """jitter → 회전 → 반전 순서; 난수는 toggle 과 무관하게 같은 순서로 뽑음"""
    toggles = toggles or AugmentToggles()
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, toggles.jitter_sigma, (len(scene.objects), 2))
    angle = rng.uniform(-toggles.rotation_range, toggles.rotation_range)
    flip = rng.random() < toggles.flip_probability

    result = LabeledScene(PointCloud(scene.cloud.data.copy(), scene.cloud.frame_id), list(scene.objects),
                          scene.scene_id)
    if toggles.jitter and scene.objects:
        result, rolled_back = jitter_objects(result, offsets)
        if rolled_back:
            logger.warning(f"{scene.scene_id}: rolled back jitter for {rolled_back} colliding objects")
    if toggles.rotation:
        result = rotate_scene(result, angle)
    if toggles.flip and flip:
        result = flip_scene(result)
    return result


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(params: ParameterStore, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> bool:
    """bias 보정 Adam 업데이트; 기울기에 NaN/Inf 가 있으면 건너뜀"""
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ParameterError(f"gradient for '{name}' has shape {grad.shape}, expected {params[name].shape}")
    if not all(np.all(np.isfinite(grad)) for grad in grads.values()):
        state.skipped += 1
        logger.warning(f"non-finite gradient, optimizer step skipped ({state.skipped} so far)")
        return False

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name in sorted(grads):
        grad = grads[name]
        m = beta1 * state.first_moment.get(name, np.zeros_like(grad)) + (1.0 - beta1) * grad
        v = beta2 * state.second_moment.get(name, np.zeros_like(grad)) + (1.0 - beta2) * grad * grad
        state.first_moment[name], state.second_moment[name] = m, v
        params.set(name, params[name] - lr * (m / correction1) / (np.sqrt(v / correction2) + epsilon))
    return True


# ----------------------------------------------------------------------------
# 학습 루프
# ----------------------------------------------------------------------------

@dataclass
class SceneLoss:
    values: Dict[str, float]
    grads: Dict[str, np.ndarray]
    bn_updates: Dict[str, Tuple[np.ndarray, np.ndarray]]


@dataclass
class TrainResult:
    params: ParameterStore
    history: pd.DataFrame
    validation: pd.DataFrame
    skipped_steps: int = 0
    checkpoint_path: Optional[Path] = None


def scene_loss(prepared: PreparedScene, scene: LabeledScene, params: ParameterStore,
               detector_config: DetectorConfig, loss: LossConfig) -> SceneLoss:
    """장면 하나의 손실, 기울기, batch-norm batch 통계"""
    targets = assign_targets(prepared.cloud.positions, scene, detector_config.anchor_list(),
                             detector_config.anchors.z_norm).targets
    tape = Tape(params)
    binding = ParameterBinding(params, tape, training=True)
    states = forward(prepared.cloud, prepared.graph, detector_config.gnn, binding)
    probabilities, residuals = predict_heads(states, detector_config.gnn, binding)
    breakdown = detection_loss(probabilities, residuals, targets, loss.weights, loss.huber_delta,
                               loss.smooth_l1_beta)
    return SceneLoss(breakdown.values(), backward(tape, breakdown.total), binding.bn_updates)


class BatchSampler:
    """epoch 마다 rng 순열로 장면 index 를 배치 단위로 공급"""

    def __init__(self, count: int, rng: np.random.Generator):
        self.count = count
        self.rng = rng
        self.queue: List[int] = []

    def next_batch(self, size: int) -> List[int]:
        batch = []
        while len(batch) < size:
            if not self.queue:
                self.queue = self.rng.permutation(self.count).tolist()
            batch.append(self.queue.pop(0))
        return batch


def validate_model(params: ParameterStore, detector_config: DetectorConfig, scenes: Sequence[LabeledScene],
                   eval_config: EvalConfig, cache: Optional[CacheManager] = None) -> Dict[str, Optional[float]]:
    """검증 장면에서 3D/BEV AP"""
    detector = Detector(detector_config, params, cache)
    predictions = detector.detect_scenes(scenes)
    ground_truth = {scene.scene_id: scene.objects for scene in scenes}
    report = evaluate_dataset(predictions, ground_truth, eval_config, classes=[detector_config.object_class])
    return {f"ap_{kind}": report.ap(detector_config.object_class, kind) for kind in eval_config.iou_kinds}


def write_metrics(history: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, sep="\t", index=False, float_format="%.8g")
    return path


def train_loop(config: TrainConfig, detector_config: DetectorConfig, scenes: Sequence[LabeledScene],
               validation_scenes: Sequence[LabeledScene] = (), loss: Optional[LossConfig] = None,
               eval_config: Optional[EvalConfig] = None, checkpoint_path: Optional[Union[str, Path]] = None,
               metrics_path: Optional[Union[str, Path]] = None,
               cache: Optional[CacheManager] = None) -> TrainResult:
    """seed 가 같으면 같은 체크포인트; step 0 이면 초기화 값 그대로 저장"""
    config.validate()
    detector_config.validate()
    loss = loss or LossConfig()
    loss.validate()
    eval_config = eval_config or EvalConfig()
    if not scenes:
        raise ConfigError("training dataset is empty")
    if config.object_class != detector_config.object_class:
        raise ConfigError(f"train.object_class {config.object_class} differs from model class "
                          f"{detector_config.object_class}")

    params = init_params(detector_config.gnn, config.seed)
    rng = np.random.default_rng(config.seed)
    sampler = BatchSampler(len(scenes), rng)
    state = AdamState()
    toggles = config.augmentation
    prepared_cache: Dict[int, PreparedScene] = {}
    history: List[Dict[str, float]] = []
    validation: List[Dict[str, Optional[float]]] = []
    started = time.perf_counter()

    logger.info(f"training {config.object_class}: {config.steps} steps, batch {config.batch_size}, "
                f"{len(scenes)} scenes, lr {config.learning_rate}")
    for step in range(config.steps):
        lr = learning_rate(config, step)
        batch = sampler.next_batch(config.batch_size)
        augment_seeds = rng.integers(0, 2 ** 32, size=len(batch))

        results: List[SceneLoss] = []
        try:
            for index, augment_seed in zip(batch, augment_seeds):
                if toggles.any_enabled:
                    scene = augment(scenes[index], int(augment_seed), toggles)
                    prepared = prepare_cloud(scene.cloud, detector_config)
                else:
                    scene = scenes[index]
                    if index not in prepared_cache:
                        prepared_cache[index] = prepare_cloud(scene.cloud, detector_config, cache)
                    prepared = prepared_cache[index]
                if prepared.graph.num_vertices == 0:
                    logger.debug(f"{scene.scene_id}: no points after downsampling, skipped")
                    continue
                results.append(scene_loss(prepared, scene, params, detector_config, loss))
        except NumericError as e:
            state.skipped += 1
            logger.warning(f"step {step + 1}: {e}; optimizer step skipped ({state.skipped} so far)")
            continue
        if not results:
            continue

        grads = {name: sum(r.grads[name] for r in results) / len(results) for name in results[0].grads}
        if adam_step(params, grads, state, lr, config.adam_beta1, config.adam_beta2, config.adam_epsilon):
            for result in results:
                params.apply_batchnorm_updates(result.bn_updates, BN_MOMENTUM)

        row = {"step": step + 1, "lr": lr}
        for key in ("cls", "loc", "reg", "total"):
            row[key] = float(np.mean([r.values[key] for r in results]))
        history.append(row)
        if (step + 1) % config.log_interval == 0:
            logger.info(f"step {step + 1}/{config.steps} total={row['total']:.5f} cls={row['cls']:.5f} "
                        f"loc={row['loc']:.5f} reg={row['reg']:.5f} lr={lr:.3g} "
                        f"({time.perf_counter() - started:.1f}s)")

        if validation_scenes and config.validation_interval and (step + 1) % config.validation_interval == 0:
            scores = validate_model(params, detector_config, validation_scenes, eval_config, cache)
            validation.append({"step": step + 1, **scores})
            logger.info(f"validation at step {step + 1}: {scores}")

    if config.steps and state.skipped == config.steps:
        raise NumericError("every training step produced non-finite values")
    if validation_scenes and (not validation or validation[-1]["step"] != config.steps):
        scores = validate_model(params, detector_config, validation_scenes, eval_config, cache)
        validation.append({"step": config.steps, **scores})
        logger.info(f"final validation: {scores}")

    history_frame = pd.DataFrame(history, columns=METRIC_COLUMNS)
    validation_frame = pd.DataFrame(validation)
    if metrics_path is not None:
        write_metrics(history_frame, metrics_path)
    saved = None
    if checkpoint_path is not None:
        saved = save_checkpoint(checkpoint_path, params, checkpoint_metadata(detector_config, config.steps, config.seed))
        logger.info(f"checkpoint written to {saved}")
    logger.info(f"training finished in {time.perf_counter() - started:.1f}s ({state.skipped} skipped steps)")
    return TrainResult(params, history_frame, validation_frame, state.skipped, saved)
