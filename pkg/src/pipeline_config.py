#!/usr/bin/env python3
"""
Pipeline Config for gatdet
전체 파이프라인 설정 스키마 (기본값, JSON 로드, 검증, 환경변수 override)
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

from cache_manager import DEFAULT_DB_PATH, CacheManager
from detection_loss import LossConfig
from detector import (
    DEFAULT_NMS_THRESHOLDS, DEFAULT_SCORE_THRESHOLD, KITTI_IMAGE_SIZE, AnchorConfig, DetectorConfig,
)
from detector_errors import ConfigError, DetectorError
from downsampler import DEFAULT_BANDS
from evaluator import EvalConfig
from gnn_model import GnnConfig
from graph_builder import DEFAULT_MAX_NEIGHBORS, DEFAULT_RADIUS
from scene_generator import SceneSpec
from trainer import TrainConfig

logger = logging.getLogger("gatdet-config")

ENV_PREFIX = "GATDET_"


@dataclass
class DownsampleSection:
    bands: str = DEFAULT_BANDS


@dataclass
class GraphSection:
    radius: float = DEFAULT_RADIUS
    max_neighbors: Optional[int] = DEFAULT_MAX_NEIGHBORS


@dataclass
class InferSection:
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_thresholds: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_NMS_THRESHOLDS))
    nms_iou_kind: str = "bev"


@dataclass
class FrustumSection:
    enabled: bool = False
    width: int = KITTI_IMAGE_SIZE[0]
    height: int = KITTI_IMAGE_SIZE[1]


@dataclass
class CacheSection:
    enabled: bool = True
    db_path: Optional[str] = None


@dataclass
class PipelineConfig:
    """모든 단계의 설정 (모델 기본값은 KITTI 학습 구성, 학습 스케줄은 desk-scale)"""

    downsample: DownsampleSection = field(default_factory=DownsampleSection)
    graph: GraphSection = field(default_factory=GraphSection)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    infer: InferSection = field(default_factory=InferSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scenes: SceneSpec = field(default_factory=SceneSpec)
    frustum: FrustumSection = field(default_factory=FrustumSection)
    cache: CacheSection = field(default_factory=CacheSection)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            object_class=self.train.object_class,
            gnn=self.gnn,
            anchors=self.anchors,
            bands=self.downsample.bands,
            radius=self.graph.radius,
            max_neighbors=self.graph.max_neighbors,
            score_threshold=self.infer.score_threshold,
            nms_thresholds=dict(self.infer.nms_thresholds),
            nms_iou_kind=self.infer.nms_iou_kind,
            frustum=(self.frustum.width, self.frustum.height) if self.frustum.enabled else None,
        )

    def validate(self) -> "PipelineConfig":
        """섹션별 검증; 실패는 섹션 이름을 담은 ConfigError"""
        checks = (
            ("train", self.train.validate),
            ("loss", self.loss.validate),
            ("eval", self.eval.validate),
            ("scenes", self.scenes.validate),
            ("model", self.detector_config().validate),
        )
        for section, check in checks:
            try:
                check()
            except DetectorError as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"invalid {section} configuration: {e}") from None
        return self

    def make_cache(self) -> Optional[CacheManager]:
        if not self.cache.enabled:
            return None
        return CacheManager(self.cache.db_path or os.getenv("GATDET_CACHE_DB", DEFAULT_DB_PATH))

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _freeze(value: Any) -> Any:
    """JSON list 를 tuple 로 (중첩 포함)"""
    if isinstance(value, list):
        return tuple(_freeze(item) for item in value)
    return value


def _check_type(current: Any, value: Any, path: str):
    if value is None or current is None:
        return
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false")
    elif isinstance(current, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number")
        if isinstance(current, int) and not isinstance(value, int):
            raise ConfigError(f"'{path}' must be an integer")
    elif isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string")
    elif isinstance(current, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(f"'{path}' must be a list")
    elif isinstance(current, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"'{path}' must be an object")


def _merge(base: Any, payload: Dict[str, Any], path: str) -> Any:
    """dataclass 기본값 위에 JSON 객체를 덮어씀; 모르는 키는 거부"""
    if not isinstance(payload, dict):
        raise ConfigError(f"'{path}' must be an object")
    known = {f.name for f in fields(base)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown configuration key '{path}.{unknown[0]}'")
    updates = {}
    for name, value in payload.items():
        current = getattr(base, name)
        key_path = f"{path}.{name}"
        if is_dataclass(current):
            updates[name] = _merge(current, value, key_path)
            continue
        _check_type(current, value, key_path)
        updates[name] = _freeze(value) if isinstance(current, tuple) else value
    try:
        return replace(base, **updates)
    except DetectorError as e:
        raise ConfigError(f"invalid '{path}': {e}") from None
    except TypeError as e:
        raise ConfigError(f"invalid '{path}': {e}") from None


def parse_override(text: str) -> tuple:
    """"train.steps=100" → (["train", "steps"], 100); 값은 JSON, 실패하면 문자열"""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override '{text}' must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(payload: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    result = json.loads(json.dumps(payload))
    for text in overrides:
        keys, value = parse_override(text)
        node = result
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{text}' descends into a non-object")
        node[keys[-1]] = value
    return result


def load_environment() -> Dict[str, str]:
    """.env (python-dotenv 가 있을 때) 로드 후 GATDET_* 환경변수 반환"""
    try:
        from dotenv import load_dotenv

        for env_file in (Path.cwd() / ".env", Path(__file__).parent.parent / ".env"):
            if env_file.exists():
                logger.debug(f".env 파일 발견: {env_file}")
                load_dotenv(env_file, override=False)
                break
    except ImportError:
        logger.debug("python-dotenv가 설치되지 않음 - 환경변수만 사용")
    return {key: value for key, value in os.environ.items() if key.startswith(ENV_PREFIX)}


def config_from_dict(payload: Dict[str, Any]) -> PipelineConfig:
    base = PipelineConfig()
    payload = dict(payload)
    train = payload.get("train")
    if isinstance(train, dict) and train.get("schedule") is not None:
        # preset 먼저, 파일에 적힌 값이 그 위에
        schedule = train["schedule"]
        if not isinstance(schedule, str):
            raise ConfigError("'config.train.schedule' must be a string")
        try:
            base = replace(base, train=base.train.with_schedule(schedule))
        except DetectorError as e:
            raise ConfigError(f"invalid 'config.train.schedule': {e}") from None
    return _merge(base, payload, "config").validate()


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                environment: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """JSON 설정 파일 (없으면 기본값) + --set override + 환경변수"""
    payload: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path.name}: invalid JSON at line {e.lineno}: {e.msg}") from None
    payload = apply_overrides(payload, overrides)
    environment = load_environment() if environment is None else environment
    if environment.get("GATDET_CACHE_DB"):
        payload.setdefault("cache", {}).setdefault("db_path", environment["GATDET_CACHE_DB"])
    config = config_from_dict(payload)
    logger.debug(f"configuration loaded from {path or 'defaults'}")
    return config
