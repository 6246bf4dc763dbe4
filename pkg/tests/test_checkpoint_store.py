#!/usr/bin/env python3
"""
Test suite for checkpoint store
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from checkpoint_store import (
    FORMAT_VERSION, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    verify_metadata,
)
from detector_errors import CheckpointError
from tensor_core import MlpSpec, ParameterStore, init_mlp_params


class TestCheckpointStore:
    """체크포인트 포맷 테스트"""

    @pytest.fixture
    def store(self):
        """BN 포함 MLP 파라미터"""
        params = ParameterStore()
        init_mlp_params(MlpSpec((4, 3, 2), ("relu", "none"), (True, False)), "head", params,
                        np.random.default_rng(0))
        params.set_batchnorm_stats("head.layer0.bn", np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.5, 2.0]))
        return params

    def test_bytes_are_stable(self, store):
        meta = {"object_class": "Car", "gnn": {"feature_width": 3}}
        payload = encode_checkpoint(store, meta)
        restored, restored_meta = decode_checkpoint(payload)
        assert payload[:4] == b"GDCK"
        assert restored_meta == meta
        assert encode_checkpoint(restored, restored_meta) == payload

    def test_values_restored_exactly(self, store):
        restored, _ = decode_checkpoint(encode_checkpoint(store, {}))
        assert restored.names() == store.names()
        for name, value in store.items():
            assert restored[name].tobytes() == value.tobytes()
        mean, var = restored.batchnorm_stats("head.layer0.bn")
        assert np.array_equal(mean, [0.1, -0.2, 0.3])
        assert np.array_equal(var, [1.5, 0.5, 2.0])

    def test_file_round_trip(self, store, tmp_path):
        path = save_checkpoint(tmp_path / "nested" / "model.gdck", store, {"steps": 0})
        restored, meta = load_checkpoint(path)
        assert meta == {"steps": 0}
        assert len(restored) == len(store)

    def test_bad_magic(self, store):
        payload = b"XXXX" + encode_checkpoint(store, {})[4:]
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(payload)

    def test_unknown_version_reported(self, store):
        payload = bytearray(encode_checkpoint(store, {}))
        payload[4:8] = (FORMAT_VERSION + 7).to_bytes(4, "little")
        with pytest.raises(CheckpointError) as excinfo:
            decode_checkpoint(bytes(payload))
        assert excinfo.value.version == FORMAT_VERSION + 7

    def test_truncated_payload(self, store):
        payload = encode_checkpoint(store, {})
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(payload[:-5])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.gdck")

    def test_metadata_mismatch(self):
        with pytest.raises(CheckpointError, match="gnn"):
            verify_metadata({"gnn": {"num_layers": 2}}, {"num_layers": 3}, "gnn")
        verify_metadata({"gnn": {"num_layers": 3}}, {"num_layers": 3}, "gnn")
