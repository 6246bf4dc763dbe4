#!/usr/bin/env python3
"""
Self Check for gatdet
축소된 크기의 oracle 검증 묶음 (기울기, 그래프, attention, 박스 코덱, IoU, NMS, 체크포인트)
"""

import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from box_geometry import (
    Box3D, DetectionSet, decode_boxes, encode_boxes, iou_3d_matrix, iou_bev, nms, points_in_boxes,
)
from checkpoint_store import decode_checkpoint, encode_checkpoint
from detection_loss import detection_loss
from detector import AnchorConfig, DetectorConfig
from detector_errors import CheckpointError
from gnn_model import GnnConfig, attention_coefficients, attention_weights, forward, init_params, predict_heads
from graph_builder import brute_force_graph, build_graph
from pointcloud_io import LabeledObject, LabeledScene, PointCloud
from tensor_core import ParameterBinding, Tensor, check_gradients
from trainer import assign_targets

logger = logging.getLogger("gatdet-selfcheck")

GRADIENT_TOLERANCE = 1e-4
ATTENTION_TOLERANCE = 1e-9
CODEC_TOLERANCE = 1e-9
MONTE_CARLO_TOLERANCE = 1e-2


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class SelfCheckReport:
    results: List[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    def format(self) -> str:
        lines = [f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\t{r.seconds:.2f}s\t{r.detail}" for r in self.results]
        verdict = "all suites passed" if self.passed else "self check FAILED"
        return "\n".join(lines + [verdict])


def _random_box(rng: np.random.Generator, spread: float = 3.0) -> np.ndarray:
    return np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.5, 0.5),
                     rng.uniform(0.5, 4.5), rng.uniform(0.4, 2.0), rng.uniform(0.5, 2.0),
                     rng.uniform(-np.pi, np.pi)])


def tamper_gradient(analytic: Dict[str, np.ndarray]):
    """테스트용: 첫 파라미터 기울기 한 성분을 틀리게 만듦"""
    name = sorted(analytic)[0]
    analytic[name].reshape(-1)[0] += 0.5 * (1.0 + abs(float(analytic[name].reshape(-1)[0])))


def gradient_scene(seed: int = 0, count: int = 30) -> LabeledScene:
    """차 박스 하나와 주변 점으로 된 작은 장면"""
    rng = np.random.default_rng(seed)
    box = Box3D(5.0, 0.0, 0.0, 3.9, 1.6, 1.5, 0.3)
    inside = rng.uniform(-0.45, 0.45, (count // 2, 3)) * np.array([3.9, 1.6, 1.5])
    c, s = np.cos(box.theta), np.sin(box.theta)
    inside = inside @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]) + box.center
    outside = box.center + rng.uniform(-3.0, 3.0, (count - count // 2, 3))
    positions = np.vstack([inside, outside])
    cloud = PointCloud.from_arrays(positions, rng.uniform(0.0, 1.0, count), frame_id="gradient")
    return LabeledScene(cloud, [LabeledObject("Car", box)], "gradient")


def check_full_loss_gradient(seed: int = 0, count: int = 30,
                             hook: Optional[Callable[[Dict[str, np.ndarray]], None]] = None) -> SuiteResult:
    """3-layer GNN 전체 손실의 tape 기울기 vs 중심 차분"""
    gnn = GnnConfig(feature_width=4, num_layers=3, attention_hidden=(4,), mapping_hidden=(4,), head_hidden=(4,))
    config = DetectorConfig(gnn=gnn, anchors=AnchorConfig())
    scene = gradient_scene(seed, count)
    graph = build_graph(scene.cloud, radius=1.5)
    targets = assign_targets(scene.cloud.positions, scene, config.anchor_list()).targets
    store = init_params(gnn, seed)

    def build_loss(binding: ParameterBinding) -> Tensor:
        states = forward(scene.cloud, graph, gnn, binding)
        probabilities, residuals = predict_heads(states, gnn, binding)
        return detection_loss(probabilities, residuals, targets).total

    errors = check_gradients(build_loss, store, analytic_hook=hook)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    return SuiteResult("gradient", worst < GRADIENT_TOLERANCE,
                       f"{len(errors)} parameters, worst {worst:.2e} ({worst_name})")


def check_graph_oracle(seed: int = 0, clouds: int = 5, max_points: int = 300) -> SuiteResult:
    rng = np.random.default_rng(seed)
    for index in range(clouds):
        count = int(rng.integers(2, max_points + 1))
        positions = rng.uniform(-5.0, 5.0, (count, 3))
        radius = float(rng.uniform(0.5, 2.0))
        fast = build_graph(positions, radius, max_neighbors=None)
        if fast.edge_set() != brute_force_graph(positions, radius).edge_set():
            return SuiteResult("graph", False, f"cloud {index}: edge sets differ")
    return SuiteResult("graph", True, f"{clouds} clouds match brute force")


def check_attention_normalization(seed: int = 0, graphs: int = 10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    gnn = GnnConfig(feature_width=8, num_layers=1, attention_hidden=(8,), mapping_hidden=(8,))
    params = init_params(gnn, seed)
    worst = 0.0
    for _ in range(graphs):
        positions = rng.uniform(-2.0, 2.0, (int(rng.integers(5, 60)), 3))
        graph = build_graph(positions, 1.2)
        if graph.num_edges == 0:
            continue
        states = Tensor(rng.normal(size=(graph.num_vertices, gnn.feature_width)))
        alpha = attention_weights(attention_coefficients(states, graph, gnn, params, 1),
                                  graph.edges_u, graph.num_vertices).data
        sums = np.zeros((graph.num_vertices, alpha.shape[1]))
        np.add.at(sums, graph.edges_u, alpha)
        connected = graph.degrees() > 0
        worst = max(worst, float(np.max(np.abs(sums[connected] - 1.0))))
    return SuiteResult("attention", worst <= ATTENTION_TOLERANCE, f"worst column-sum error {worst:.1e}")


def check_box_codec(seed: int = 0, pairs: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    anchors = np.array([_random_box(rng) for _ in range(pairs)])
    gt = np.array([_random_box(rng) for _ in range(pairs)])
    gt[:, 6] = anchors[:, 6] + rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3, pairs)
    restored = decode_boxes(encode_boxes(gt, anchors), anchors)
    diff = restored - gt
    diff[:, 6] = np.angle(np.exp(1j * diff[:, 6]))
    worst = float(np.max(np.abs(diff)))
    identity = float(np.max(np.abs(encode_boxes(anchors, anchors))))
    passed = worst <= CODEC_TOLERANCE and identity == 0.0
    return SuiteResult("box-codec", passed, f"{pairs} pairs, worst round-trip error {worst:.1e}")


def monte_carlo_iou(a: np.ndarray, b: np.ndarray, samples: int, rng: np.random.Generator) -> float:
    """두 박스를 감싸는 축정렬 영역에서 균일 샘플링한 3D IoU"""
    extent = np.array([np.hypot(a[3], a[4]), np.hypot(b[3], b[4])]) / 2.0
    low = np.minimum(a[:3] - [extent[0], extent[0], a[5] / 2], b[:3] - [extent[1], extent[1], b[5] / 2])
    high = np.maximum(a[:3] + [extent[0], extent[0], a[5] / 2], b[:3] + [extent[1], extent[1], b[5] / 2])
    points = rng.uniform(low, high, (samples, 3))
    inside = points_in_boxes(points, np.vstack([a, b]))
    union = np.sum(inside[:, 0] | inside[:, 1])
    return float(np.sum(inside[:, 0] & inside[:, 1]) / union) if union else 0.0


def check_iou_monte_carlo(seed: int = 0, pairs: int = 10, samples: int = 200_000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        a = _random_box(rng, spread=1.0)
        b = _random_box(rng, spread=1.0)
        exact = float(iou_3d_matrix(a, b)[0, 0])
        worst = max(worst, abs(exact - monte_carlo_iou(a, b, samples, rng)))
    return SuiteResult("iou-monte-carlo", worst <= MONTE_CARLO_TOLERANCE, f"worst deviation {worst:.1e}")


def naive_nms(detections: DetectionSet, threshold: float) -> List[int]:
    """O(n²) 박스 단위 비교 기준 구현 (단일 클래스)"""
    order = sorted(range(len(detections)), key=lambda i: (-detections.scores[i], i))
    kept: List[int] = []
    for i in order:
        if all(iou_bev(detections.box(i), detections.box(j)) <= threshold for j in kept):
            kept.append(i)
    return kept


def check_nms(seed: int = 0, sets: int = 5, boxes: int = 50) -> SuiteResult:
    rng = np.random.default_rng(seed)
    for index in range(sets):
        detections = DetectionSet(["Car"] * boxes, rng.uniform(0.0, 1.0, boxes),
                                  np.array([_random_box(rng, spread=6.0) for _ in range(boxes)]))
        expected = detections.subset(naive_nms(detections, 0.5))
        actual = nms(detections, 0.5)
        if not np.array_equal(actual.boxes, expected.boxes):
            return SuiteResult("nms", False, f"set {index}: kept boxes differ from naive reference")
    return SuiteResult("nms", True, f"{sets} sets of {boxes} boxes match naive reference")


def check_checkpoint(seed: int = 0) -> SuiteResult:
    """저장 → 로드가 정확하고, magic 이 깨진 파일은 CheckpointError"""
    store = init_params(GnnConfig(feature_width=4, attention_hidden=(4,), mapping_hidden=(4,), head_hidden=(4,)),
                        seed)
    payload = encode_checkpoint(store, {"seed": seed})
    loaded, _ = decode_checkpoint(payload)
    if any(not np.array_equal(loaded[name], value) for name, value in store.items()):
        return SuiteResult("checkpoint", False, "round trip changed parameter values")
    with tempfile.TemporaryDirectory() as workdir:
        corrupt = Path(workdir) / "corrupt.gdck"
        corrupt.write_bytes(b"XXXX" + payload[4:])
        try:
            decode_checkpoint(corrupt.read_bytes())
        except CheckpointError as e:
            return SuiteResult("checkpoint", True, f"round trip exact; corrupt magic rejected ({e})")
    return SuiteResult("checkpoint", False, "corrupt magic was not detected")


def run_self_check(seed: int = 0, tamper: bool = False) -> SelfCheckReport:
    """모든 suite 실행; tamper=True 이면 기울기 suite 가 실패해야 함"""
    suites = [
        ("gradient", lambda: check_full_loss_gradient(seed, hook=tamper_gradient if tamper else None)),
        ("graph", lambda: check_graph_oracle(seed)),
        ("attention", lambda: check_attention_normalization(seed)),
        ("box-codec", lambda: check_box_codec(seed)),
        ("iou-monte-carlo", lambda: check_iou_monte_carlo(seed)),
        ("nms", lambda: check_nms(seed)),
        ("checkpoint", lambda: check_checkpoint(seed)),
    ]
    report = SelfCheckReport()
    for name, suite in suites:
        started = time.perf_counter()
        try:
            result = suite()
        except Exception as e:
            logger.exception(f"suite {name} raised")
            result = SuiteResult(name, False, f"raised {type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - started
        logger.info(f"{name}: {'pass' if result.passed else 'FAIL'} ({result.detail})")
        report.results.append(result)
    return report
