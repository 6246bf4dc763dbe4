#!/usr/bin/env python3
"""
Attention GNN Model for gatdet
초기 vertex 임베딩, per-edge attention 집계 레이어, 분류/박스 residual head
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from detector_errors import ParameterError
from graph_builder import Graph
from pointcloud_io import PointCloud
from tensor_core import (
    MlpSpec, ParameterBinding, ParameterStore, Tensor, add, concat, elementwise_mul, gather_rows,
    glorot_uniform, init_mlp_params, matmul, mlp_forward, segment_max, segment_softmax, segment_sum,
    softmax, sub,
)

logger = logging.getLogger("gatdet-gnn")

ATTENTION_MODES = ("channel", "scalar", "mean")
BOX_DIMS = 7


@dataclass(frozen=True)
class GnnConfig:
    """네트워크 구조 설정"""

    feature_width: int = 64
    num_layers: int = 3
    attention_hidden: Tuple[int, ...] = (64,)
    mapping_hidden: Tuple[int, ...] = (64,)
    head_hidden: Tuple[int, ...] = (64,)
    attention_mode: str = "channel"
    num_anchors: int = 2
    embedding_batch_norm: bool = True
    embedding_radius: Optional[float] = None

    def __post_init__(self):
        for name in ("attention_hidden", "mapping_hidden", "head_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.feature_width < 1:
            raise ParameterError(f"feature_width must be positive, got {self.feature_width}")
        if not 1 <= self.num_layers <= 8:
            raise ParameterError(f"num_layers must lie in 1..8, got {self.num_layers}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ParameterError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.num_anchors < 1:
            raise ParameterError("num_anchors must be positive")
        if any(w < 1 for w in self.attention_hidden + self.mapping_hidden + self.head_hidden):
            raise ParameterError("hidden widths must be positive")
        if self.embedding_radius is not None and self.embedding_radius <= 0:
            raise ParameterError("embedding_radius must be positive")

    @property
    def num_classes(self) -> int:
        """background + anchor 회전별 객체 클래스"""
        return 1 + self.num_anchors

    def embedding_spec(self) -> MlpSpec:
        return MlpSpec((4, self.feature_width), ("relu",), (self.embedding_batch_norm,))

    def mapping_spec(self) -> MlpSpec:
        return MlpSpec.build((self.feature_width,) + self.mapping_hidden + (self.feature_width,))

    def attention_spec(self) -> MlpSpec:
        output = 1 if self.attention_mode == "scalar" else self.feature_width
        return MlpSpec.build((3 + self.feature_width,) + self.attention_hidden + (output,))

    def classification_spec(self) -> MlpSpec:
        return MlpSpec.build((self.feature_width,) + self.head_hidden + (self.num_classes,))

    def regression_spec(self) -> MlpSpec:
        return MlpSpec.build((self.feature_width,) + self.head_hidden + (BOX_DIMS * self.num_anchors,))

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        for name in ("attention_hidden", "mapping_hidden", "head_hidden"):
            payload[name] = list(payload[name])
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GnnConfig":
        return cls(**payload)


@dataclass
class NetworkOutput:
    """forward 결과와 레이어별 attention, 단계별 소요 시간"""

    states: Tensor
    probabilities: Tensor
    residuals: Tensor
    attention: List[np.ndarray] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)


def init_params(config: GnnConfig, seed: int = 0) -> ParameterStore:
    """Glorot uniform 초기화 (bias 0), seed 고정"""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    init_mlp_params(config.embedding_spec(), "embed", store, rng)
    for k in range(1, config.num_layers + 1):
        if config.attention_mode != "mean":
            init_mlp_params(config.mapping_spec(), f"layer{k}.mapping", store, rng)
            init_mlp_params(config.attention_spec(), f"layer{k}.attention", store, rng)
        store.add(f"layer{k}.transform.weight",
                  glorot_uniform(config.feature_width, config.feature_width, rng))
    init_mlp_params(config.classification_spec(), "head.cls", store, rng)
    init_mlp_params(config.regression_spec(), "head.reg", store, rng)
    return store


def _binding(params: Union[ParameterBinding, ParameterStore]) -> ParameterBinding:
    return params if isinstance(params, ParameterBinding) else ParameterBinding(params)


def embed_initial(cloud: PointCloud, graph: Graph, config: GnnConfig,
                  params: Union[ParameterBinding, ParameterStore]) -> Tensor:
    """[반사율_v, δx_uv] → linear → BN → ReLU → 이웃(자기 포함) 채널별 max"""
    params = _binding(params)
    count = graph.num_vertices
    if len(cloud) != count:
        raise ParameterError(f"graph has {count} vertices but cloud has {len(cloud)} points")
    edges_u, edges_v, offsets = graph.edges_u, graph.edges_v, graph.offsets
    if config.embedding_radius is not None:
        near = np.linalg.norm(offsets, axis=1) <= config.embedding_radius
        edges_u, edges_v, offsets = edges_u[near], edges_v[near], offsets[near]
    vertices = np.arange(count)
    rows_u = np.concatenate([edges_u, vertices])
    rows_v = np.concatenate([edges_v, vertices])
    features = np.column_stack([cloud.reflectance[rows_v], np.vstack([offsets, np.zeros((count, 3))])])
    point_features = mlp_forward(config.embedding_spec(), params, Tensor(features), "embed")
    return segment_max(point_features, rows_u, count)


def attention_coefficients(states: Tensor, graph: Graph, config: GnnConfig,
                           params: Union[ParameterBinding, ParameterStore], layer: int,
                           vertex: Optional[int] = None) -> Tensor:
    """e_uv = MLP(δx_uv ‖ M(s_v) − M(s_u)); vertex 지정 시 그 vertex 의 행만"""
    params = _binding(params)
    mapped = mlp_forward(config.mapping_spec(), params, states, f"layer{layer}.mapping")
    feature_delta = sub(gather_rows(mapped, graph.edges_v), gather_rows(mapped, graph.edges_u))
    edge_inputs = concat([Tensor(graph.offsets), feature_delta], axis=1)
    coefficients = mlp_forward(config.attention_spec(), params, edge_inputs, f"layer{layer}.attention")
    if vertex is None:
        return coefficients
    return gather_rows(coefficients, np.arange(graph.row_splits[vertex], graph.row_splits[vertex + 1]))


def attention_weights(coefficients: Tensor, segment_ids: Optional[np.ndarray] = None,
                      num_segments: Optional[int] = None) -> Tensor:
    """이웃 방향 채널별 softmax (segment 미지정이면 전체가 한 이웃 집합)"""
    if segment_ids is None:
        segment_ids = np.zeros(coefficients.shape[0], dtype=np.int64)
        num_segments = 1
    return segment_softmax(coefficients, segment_ids, num_segments)


def _mean_weights(graph: Graph) -> Tensor:
    degrees = graph.degrees().astype(np.float64)
    return Tensor((1.0 / degrees[graph.edges_u]).reshape(-1, 1))


def gnn_layer(states: Tensor, graph: Graph, config: GnnConfig,
              params: Union[ParameterBinding, ParameterStore], layer: int) -> Tuple[Tensor, Tensor]:
    """s_u^k = Σ_v α_uv * (W_k s_v^{k−1}) + s_u^{k−1}; (새 상태, α) 반환"""
    params = _binding(params)
    if config.attention_mode == "mean":
        alpha = _mean_weights(graph)
    else:
        coefficients = attention_coefficients(states, graph, config, params, layer)
        alpha = attention_weights(coefficients, graph.edges_u, graph.num_vertices)
    transformed = matmul(states, params[f"layer{layer}.transform.weight"])
    messages = elementwise_mul(alpha, gather_rows(transformed, graph.edges_v))
    return add(states, segment_sum(messages, graph.edges_u, graph.num_vertices)), alpha


def forward(cloud: PointCloud, graph: Graph, config: GnnConfig,
            params: Union[ParameterBinding, ParameterStore]) -> Tensor:
    """임베딩 후 n 개 레이어를 거친 최종 vertex 상태"""
    params = _binding(params)
    states = embed_initial(cloud, graph, config, params)
    for layer in range(1, config.num_layers + 1):
        states, _ = gnn_layer(states, graph, config, params, layer)
    return states


def predict_heads(states: Tensor, config: GnnConfig,
                  params: Union[ParameterBinding, ParameterStore]) -> Tuple[Tensor, Tensor]:
    """클래스 확률 (N×(1+A)) 과 anchor 별 residual (N×7A)"""
    params = _binding(params)
    logits = mlp_forward(config.classification_spec(), params, states, "head.cls")
    residuals = mlp_forward(config.regression_spec(), params, states, "head.reg")
    return softmax(logits, axis=1), residuals


def run_network(cloud: PointCloud, graph: Graph, config: GnnConfig,
                params: Union[ParameterBinding, ParameterStore]) -> NetworkOutput:
    """forward + head, 레이어별 attention 과 소요 시간 기록"""
    params = _binding(params)
    timings: Dict[str, float] = {}
    attention: List[np.ndarray] = []

    started = time.perf_counter()
    states = embed_initial(cloud, graph, config, params)
    timings["embedding"] = time.perf_counter() - started
    for layer in range(1, config.num_layers + 1):
        started = time.perf_counter()
        states, alpha = gnn_layer(states, graph, config, params, layer)
        attention.append(alpha.data)
        timings[f"gnn_layer{layer}"] = time.perf_counter() - started

    started = time.perf_counter()
    probabilities, residuals = predict_heads(states, config, params)
    timings["heads"] = time.perf_counter() - started
    return NetworkOutput(states, probabilities, residuals, attention, timings)
