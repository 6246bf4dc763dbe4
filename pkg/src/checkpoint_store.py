#!/usr/bin/env python3
"""
Checkpoint Store for gatdet
"GDCK" 버전 바이너리 포맷으로 파라미터와 batch-norm 통계 저장/복원
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from detector_errors import CheckpointError
from tensor_core import ParameterStore

logger = logging.getLogger("gatdet-checkpoint")

MAGIC = b"GDCK"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


class _Cursor:
    """bytes 위의 순차 reader"""

    def __init__(self, payload: bytes, version: int = None):
        self.payload = payload
        self.position = 0
        self.version = version

    def take(self, count: int) -> bytes:
        end = self.position + count
        if end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint at byte {self.position}", self.version)
        chunk = self.payload[self.position:end]
        self.position = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        length = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"invalid name bytes near byte {self.position}", self.version) from None

    def reals(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _pack_text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode_checkpoint(store: ParameterStore, metadata: Dict[str, Any]) -> bytes:
    """파라미터 저장소를 bytes로 직렬화 (등록 순서 유지)"""
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(store))]
    for name, value in store.items():
        parts.append(_pack_text(name))
        parts.append(_U32.pack(value.ndim))
        parts.extend(_U32.pack(dim) for dim in value.shape)
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    stats = list(store.batchnorm_items())
    parts.append(_U32.pack(len(stats)))
    for key, (mean, var) in stats:
        parts.append(_pack_text(key))
        parts.append(_U32.pack(mean.shape[0]))
        parts.append(np.ascontiguousarray(mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(var, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> Tuple[ParameterStore, Dict[str, Any]]:
    """bytes에서 파라미터 저장소와 메타데이터 복원"""
    if payload[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {payload[:4]!r}, expected {MAGIC!r}")
    cursor = _Cursor(payload)
    cursor.take(4)
    version = cursor.u32()
    cursor.version = version
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version (reader supports v{FORMAT_VERSION})", version)

    try:
        metadata = json.loads(cursor.take(cursor.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}", version) from None

    store = ParameterStore()
    for _ in range(cursor.u32()):
        name = cursor.text()
        shape = tuple(cursor.u32() for _ in range(cursor.u32()))
        count = int(np.prod(shape)) if shape else 1
        store.add(name, cursor.reals(count).reshape(shape))
    for _ in range(cursor.u32()):
        key = cursor.text()
        width = cursor.u32()
        store.set_batchnorm_stats(key, cursor.reals(width), cursor.reals(width))
    if cursor.position != len(payload):
        raise CheckpointError(f"{len(payload) - cursor.position} trailing bytes in checkpoint", version)
    return store, metadata


def save_checkpoint(path: Union[str, Path], store: ParameterStore, metadata: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(store, metadata)
    path.write_bytes(payload)
    logger.info(f"checkpoint saved: {path} ({len(store)} tensors, {len(payload)} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParameterStore, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    store, metadata = decode_checkpoint(path.read_bytes())
    logger.info(f"checkpoint loaded: {path} ({len(store)} tensors)")
    return store, metadata


def verify_metadata(metadata: Dict[str, Any], expected: Dict[str, Any], section: str):
    """체크포인트 메타데이터의 한 섹션이 현재 설정과 같은지 확인"""
    stored = metadata.get(section)
    if stored != expected:
        raise CheckpointError(
            f"checkpoint {section} does not match the configuration: stored {stored}, configured {expected}",
            FORMAT_VERSION)
