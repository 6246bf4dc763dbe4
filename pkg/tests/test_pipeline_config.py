#!/usr/bin/env python3
"""
Test suite for pipeline configuration
"""

import json
import os
import sys

import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from detector_errors import ConfigError
from graph_builder import DEFAULT_RADIUS
from pipeline_config import PipelineConfig, apply_overrides, config_from_dict, load_config, parse_override
from trainer import SCHEDULES


@pytest.fixture
def config_file(tmp_path):
    def write(payload, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload) if not isinstance(payload, str) else payload)
        return path
    return write


class TestDefaults:
    """기본 설정 테스트"""

    def test_defaults_validate(self):
        config = load_config(environment={})
        assert config.graph.radius == DEFAULT_RADIUS
        assert config.gnn.num_layers == 3
        assert config.loss.alpha == 0.1
        assert config.train.object_class == "Car"

    def test_to_dict_is_json(self):
        payload = PipelineConfig().to_dict()
        assert payload["gnn"]["attention_hidden"] == [64]
        assert json.loads(PipelineConfig().to_json()) == payload

    def test_detector_config_follows_sections(self):
        config = config_from_dict({"graph": {"radius": 2.5}, "frustum": {"enabled": True}})
        detector = config.detector_config()
        assert detector.radius == 2.5
        assert detector.frustum == (config.frustum.width, config.frustum.height)


class TestLoading:
    """JSON 파일과 override 테스트"""

    def test_file_values(self, config_file):
        path = config_file({"graph": {"radius": 3.0, "max_neighbors": 64}, "gnn": {"attention_hidden": [32, 16]}})
        config = load_config(path, environment={})
        assert config.graph.max_neighbors == 64
        assert config.gnn.attention_hidden == (32, 16)

    def test_unknown_key(self, config_file):
        with pytest.raises(ConfigError, match="unknown configuration key 'config.x'"):
            load_config(config_file({"x": {}}), environment={})
        with pytest.raises(ConfigError, match="unknown configuration key 'config.graph.diameter'"):
            load_config(config_file({"graph": {"diameter": 2}}), environment={})

    def test_type_errors(self, config_file):
        with pytest.raises(ConfigError, match="must be an integer"):
            load_config(config_file({"train": {"steps": 10.5}}), environment={})
        with pytest.raises(ConfigError, match="must be true or false"):
            load_config(config_file({"cache": {"enabled": "yes"}}), environment={})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json", environment={})

    def test_invalid_json_reports_line(self, config_file):
        with pytest.raises(ConfigError, match="line 2"):
            load_config(config_file('{\n"graph": }'), environment={})

    def test_cross_section_validation(self, config_file):
        with pytest.raises(ConfigError, match="model"):
            load_config(config_file({"gnn": {"num_anchors": 3}}), environment={})

    def test_parse_override(self):
        assert parse_override("train.steps=100") == (["train", "steps"], 100)
        assert parse_override("downsample.bands=20:0.8,inf:0.5") == (["downsample", "bands"], "20:0.8,inf:0.5")
        with pytest.raises(ConfigError):
            parse_override("train.steps")

    def test_overrides_beat_file(self, config_file):
        path = config_file({"train": {"steps": 10, "batch_size": 4}})
        config = load_config(path, ["train.steps=20", "graph.max_neighbors=null"], environment={})
        assert config.train.steps == 20
        assert config.train.batch_size == 4
        assert config.graph.max_neighbors is None

    def test_override_into_scalar(self):
        with pytest.raises(ConfigError):
            apply_overrides({"train": 5}, ["train.steps=1"])


class TestSchedules:
    """학습 스케줄 preset 테스트"""

    def test_preset_applied(self):
        config = config_from_dict({"train": {"schedule": "kitti-car"}})
        lr, decay, interval, steps = SCHEDULES["kitti-car"]
        assert (config.train.learning_rate, config.train.decay_factor) == (lr, decay)
        assert (config.train.decay_interval, config.train.steps) == (interval, steps)

    def test_explicit_keys_beat_preset(self):
        config = config_from_dict({"train": {"schedule": "kitti-car", "steps": 10}})
        assert config.train.steps == 10
        assert config.train.learning_rate == SCHEDULES["kitti-car"][0]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="schedule"):
            config_from_dict({"train": {"schedule": "weekend"}})


class TestEnvironment:
    """환경변수 override 테스트"""

    def test_cache_db_from_environment(self, tmp_path):
        db = str(tmp_path / "env.db")
        config = load_config(environment={"GATDET_CACHE_DB": db})
        assert config.cache.db_path == db
        assert config.make_cache().db_path == db

    def test_file_beats_environment(self, config_file, tmp_path):
        path = config_file({"cache": {"db_path": str(tmp_path / "file.db")}})
        config = load_config(path, environment={"GATDET_CACHE_DB": str(tmp_path / "env.db")})
        assert config.cache.db_path.endswith("file.db")

    def test_disabled_cache(self):
        assert config_from_dict({"cache": {"enabled": False}}).make_cache() is None
