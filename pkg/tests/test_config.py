"""
Tests for run configuration parsing and overrides.
"""

import json
import os

import pytest

from evocompress.config import (
    WORKERS_ENV,
    RunConfig,
    apply_overrides,
    config_from_dict,
    load_config,
    resolve_workers,
)
from evocompress.exceptions import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def test_defaults_are_valid():
    """Test that the built-in defaults validate."""
    config = config_from_dict({})
    assert isinstance(config, RunConfig)
    assert config.objectives == ["quality", "size"]
    assert config.evolution.population_size == 8


@pytest.mark.parametrize("name", ["desk_two_gaussians", "desk_image_blobs", "desk_autoregressive"])
def test_shipped_configs_load(name):
    """Test that the shipped desk configs are valid."""
    config = load_config(os.path.join(CONFIG_DIR, f"{name}.json"))
    assert config.evolution.max_generations is not None


def test_desk_config_values():
    """Test the values of the two-Gaussian desk config."""
    config = load_config(os.path.join(CONFIG_DIR, "desk_two_gaussians.json"))

    assert config.model.hidden == [64]
    assert config.evolution.seed == 42
    assert config.evolution.population_size == 8


@pytest.mark.parametrize("data, key", [
    ({"colour": 1}, "'colour'"),
    ({"evolution": {"populaton_size": 4}}, "'evolution.populaton_size'"),
    ({"training": {"momentum": 0.9}}, "'training.momentum'"),
])
def test_unknown_keys_name_their_path(data, key):
    """Test that unknown keys are reported with their dotted path."""
    with pytest.raises(ConfigError, match=key):
        config_from_dict(data)


@pytest.mark.parametrize("data", [
    {"evolution": {"population_size": 1}},
    {"evolution": {"selection_random_fraction": 1.5}},
    {"training": {"learning_rate": 0}},
    {"training": {"optimizer": "lbfgs"}},
    {"task": {"split": [0.5, 0.5, 0.5]}},
    {"objectives": ["quality", "accuracy"]},
    {"objectives": ["gpu_latency"], "devices": ["cpu"]},
    {"objectives": ["cpu_latency"], "measurement": {"timing": False}},
    {"model": {"architecture": "transformer"}},
])
def test_range_errors(data):
    """Test that out-of-range values are rejected before any work."""
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_invalid_json_reports_line(tmp_path):
    """Test that a JSON syntax error names its line."""
    path = tmp_path / "broken.json"
    path.write_text('{\n  "evolution": {\n    "seed": 1,\n  }\n}\n')

    with pytest.raises(ConfigError, match="line 4"):
        load_config(str(path))


def test_missing_config(tmp_path):
    """Test that a missing config file raises ConfigError."""
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.json"))


def test_overrides_win_over_file(tmp_path):
    """Test that CLI values replace the file values."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"evolution": {"seed": 1, "max_generations": 5}}))

    config = apply_overrides(load_config(str(path)), seed=9, generations=2, output_dir="elsewhere")

    assert config.evolution.seed == 9
    assert config.evolution.max_generations == 2
    assert config.output_dir == "elsewhere"


def test_to_dict_round_trip():
    """Test that a config survives its dictionary form."""
    config = config_from_dict({"evolution": {"operators": ["insert_stage", "delete_stage"]}})
    again = config_from_dict(config.to_dict())

    assert again == config
    assert again.evolution.operators == ("insert_stage", "delete_stage")


def test_workers_flag_beats_environment(monkeypatch):
    """Test worker count precedence: flag, then environment, then 1."""
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert resolve_workers() == 1

    monkeypatch.setenv(WORKERS_ENV, "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2


@pytest.mark.parametrize("value", ["zero", "0"])
def test_bad_worker_environment(monkeypatch, value):
    """Test that an invalid environment worker count is a config error."""
    monkeypatch.setenv(WORKERS_ENV, value)
    with pytest.raises(ConfigError, match=WORKERS_ENV):
        resolve_workers()
