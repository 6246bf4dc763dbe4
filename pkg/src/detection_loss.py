#!/usr/bin/env python3
"""
Detection Loss for gatdet
분류 cross entropy, Huber 위치 손실, smooth-L1 회귀 손실과 가중합
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from detector_errors import DimensionError, NumericError, ParameterError
from tensor_core import (
    Tensor, add, elementwise_mul, gather_rows, huber_elem, log, reduce_sum, reshape, scale, sub,
)

logger = logging.getLogger("gatdet-loss")

PROBABILITY_FLOOR = 1e-12
ROW_SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """total = α·reg + β·cls + γ·loc"""

    alpha: float = 0.1
    beta: float = 10.0
    gamma: float = 0.0005

    def __post_init__(self):
        values = (self.alpha, self.beta, self.gamma)
        if any(v < 0 for v in values):
            raise ParameterError(f"loss weights must be non-negative: {values}")
        if not any(v > 0 for v in values):
            raise ParameterError("at least one loss weight must be positive")


@dataclass
class LossConfig:
    """손실 가중치와 robust loss 파라미터"""

    alpha: float = 0.1
    beta: float = 10.0
    gamma: float = 0.0005
    huber_delta: float = 1.0
    smooth_l1_beta: float = 1.0

    def validate(self):
        LossWeights(self.alpha, self.beta, self.gamma)
        if self.huber_delta <= 0 or self.smooth_l1_beta <= 0:
            raise ParameterError("huber_delta and smooth_l1_beta must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)


@dataclass
class VertexTargets:
    """vertex 별 라벨 (0 = background, 1 + anchor id), 양성 vertex 의 residual"""

    labels: np.ndarray
    positive_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    residuals: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    anchor_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.positive_indices = np.asarray(self.positive_indices, dtype=np.int64).reshape(-1)
        self.residuals = np.asarray(self.residuals, dtype=np.float64).reshape(-1, 7)
        self.anchor_ids = np.asarray(self.anchor_ids, dtype=np.int64).reshape(-1)
        count = self.positive_indices.shape[0]
        if self.residuals.shape[0] != count or self.anchor_ids.shape[0] != count:
            raise DimensionError("one residual and anchor id per positive vertex required")
        if count and np.any(self.labels[self.positive_indices] == 0):
            raise ParameterError("positive vertices must carry an object label")
        if int(np.sum(self.labels > 0)) != count:
            raise ParameterError("residual targets must exist exactly for labelled vertices")

    @classmethod
    def background(cls, count: int) -> "VertexTargets":
        return cls(np.zeros(count, dtype=np.int64))

    @property
    def num_vertices(self) -> int:
        return self.labels.shape[0]

    @property
    def positive_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_vertices, dtype=bool)
        mask[self.positive_indices] = True
        return mask


def classification_loss(probabilities: Tensor, targets: VertexTargets) -> Tensor:
    """−(1/N) Σ_i log p_{i, y_i}, log 은 1e-12 에서 floor"""
    probs = probabilities.data
    if probs.ndim != 2 or probs.shape[0] != targets.num_vertices:
        raise DimensionError(f"probabilities {probs.shape} do not match {targets.num_vertices} vertices")
    if probs.shape[0] == 0:
        raise DimensionError("classification loss needs at least one vertex")
    if np.any(targets.labels >= probs.shape[1]) or np.any(targets.labels < 0):
        raise DimensionError(f"class label outside [0, {probs.shape[1]})")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE):
        raise NumericError("probability rows must sum to 1")
    onehot = np.zeros_like(probs)
    onehot[np.arange(probs.shape[0]), targets.labels] = 1.0
    log_likelihood = reduce_sum(elementwise_mul(log(probabilities, floor=PROBABILITY_FLOOR), Tensor(onehot)))
    return scale(log_likelihood, -1.0 / probs.shape[0])


def _matched_residuals(predicted: Tensor, targets: VertexTargets) -> Tensor:
    """(N×7A) 예측에서 양성 vertex 의 매칭 anchor 7 성분 (P×7)"""
    count, width = predicted.shape
    if count != targets.num_vertices or width % 7:
        raise DimensionError(f"residual predictions {predicted.shape} do not match targets")
    anchors = width // 7
    if targets.anchor_ids.size and (targets.anchor_ids.max() >= anchors or targets.anchor_ids.min() < 0):
        raise DimensionError("anchor id outside the predicted anchor range")
    per_anchor = reshape(predicted, (count * anchors, 7))
    return gather_rows(per_anchor, targets.positive_indices * anchors + targets.anchor_ids)


def localization_loss(predicted: Tensor, targets: VertexTargets, delta: float = 1.0) -> Tensor:
    """양성 vertex 평균 Σ_7 Huber(pred − target); 양성이 없으면 0"""
    count = targets.positive_indices.shape[0]
    if count == 0:
        return Tensor(0.0)
    difference = sub(_matched_residuals(predicted, targets), Tensor(targets.residuals))
    return scale(reduce_sum(huber_elem(difference, delta)), 1.0 / count)


def regression_loss(predicted: Tensor, targets: VertexTargets, beta: float = 1.0) -> Tensor:
    """양성 vertex 평균 smooth-L1 (= Huber(β)/β)"""
    count = targets.positive_indices.shape[0]
    if count == 0:
        return Tensor(0.0)
    if beta <= 0:
        raise ParameterError("smooth-L1 beta must be positive")
    difference = sub(_matched_residuals(predicted, targets), Tensor(targets.residuals))
    return scale(reduce_sum(huber_elem(difference, beta)), 1.0 / (beta * count))


def total_loss(cls: Tensor, loc: Tensor, reg: Tensor, weights: LossWeights) -> Tensor:
    for name, component in (("classification", cls), ("localization", loc), ("regression", reg)):
        if not np.all(np.isfinite(component.data)):
            raise NumericError(f"{name} loss is not finite")
    return add(add(scale(reg, weights.alpha), scale(cls, weights.beta)), scale(loc, weights.gamma))


@dataclass
class LossBreakdown:
    classification: Tensor
    localization: Tensor
    regression: Tensor
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {
            "cls": self.classification.item(),
            "loc": self.localization.item(),
            "reg": self.regression.item(),
            "total": self.total.item(),
        }


def detection_loss(probabilities: Tensor, residuals: Tensor, targets: VertexTargets,
                   weights: Optional[LossWeights] = None, huber_delta: float = 1.0,
                   smooth_l1_beta: float = 1.0) -> LossBreakdown:
    """세 손실과 가중합"""
    weights = weights or LossWeights()
    if not np.all(np.isfinite(residuals.data)):
        raise NumericError("residual predictions are not finite")
    cls = classification_loss(probabilities, targets)
    loc = localization_loss(residuals, targets, huber_delta)
    reg = regression_loss(residuals, targets, smooth_l1_beta)
    return LossBreakdown(cls, loc, reg, total_loss(cls, loc, reg, weights))
