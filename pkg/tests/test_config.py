"""Tests for run configuration files."""

import json

import pytest

from b2b_guidance.config import RunConfig, config_from_document, load_run_config, parse_run_config
from b2b_guidance.errors import ConfigError


def test_empty_document_gives_defaults():
    config = parse_run_config("{}")
    assert config == RunConfig()
    assert config.grid == (16, 16)
    assert config.channels == 4
    assert config.guidance.guided_steps == frozenset(range(25, 51))


def test_every_key(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "gamma": 100.0,
        "lambda_a": 0.5,
        "lambda_iou": 0.2,
        "mainbox_weight": 0.0,
        "outbox_weight": 2.0,
        "n_sliding": 2,
        "total_steps": 20,
        "guided_steps": [20, 19, 18],
        "grid": [8, 12],
        "channels": 6,
        "seed": 9,
        "max_backtracks": 3,
        "backtrack": False,
        "beta_start": 0.002,
        "beta_end": 0.03,
        "target_scale": 0.5,
    }))
    config = load_run_config(path)
    g = config.guidance
    assert g.gamma == 100.0
    assert g.weights.lambda_a == 0.5
    assert g.weights.mainbox == 0.0
    assert g.weights.outbox == 2.0
    assert g.guided_steps == frozenset({18, 19, 20})
    assert config.grid == (8, 12)
    assert config.channels == 6
    assert g.seed == 9
    assert not g.backtrack


def test_guided_fraction():
    config = config_from_document({"total_steps": 10, "guided_fraction": 0.2})
    assert config.guidance.guided_steps == frozenset({8, 9, 10})


def test_document_round_trip():
    config = config_from_document({"total_steps": 12, "seed": 4, "grid": [6, 6]})
    assert config_from_document(config.to_document()) == config


@pytest.mark.parametrize("text", [
    '{"gama": 1.0}',
    '{"guided_fraction": 0.5, "guided_steps": [1]}',
    '{"guided_fraction": 1.5}',
    '{"gamma": -1}',
    '{"lambda_a": -1}',
    '{"total_steps": 5, "guided_steps": [6]}',
    '{"grid": [0, 4]}',
    '{"channels": 0}',
    '[1, 2]',
    'not json',
])
def test_invalid_configuration(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_overrides():
    config = RunConfig().with_overrides(seed=7, backtrack=False)
    assert config.guidance.seed == 7
    assert not config.guidance.backtrack
    assert RunConfig().with_overrides() == RunConfig()


def test_non_utf8_file_is_config_error(tmp_path):
    path = tmp_path / "config.json"
    path.write_bytes(b'{"seed": 1, "note": "\xff"}')
    with pytest.raises(ConfigError, match="UTF-8"):
        load_run_config(path)


def test_unit_weight_settings_load():
    config = parse_run_config('{"gamma": 0.9, "lambda_iou": 1.0, "lambda_a": 1.0}')
    assert config.guidance.gamma == 0.9
    assert config.guidance.weights.lambda_iou == 1.0
    assert config.guidance.weights.lambda_a == 1.0
