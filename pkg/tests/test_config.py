import json

import pytest

from advfusion.config import config_hash, load_config, normalized_dict, parse_config
from advfusion.exceptions import ConfigValidationError


def minimal(tmp_path) -> dict:
    return {"dataset": {"path": str(tmp_path)}}


def test_minimal_config_fills_defaults(tmp_path):
    cfg = parse_config(minimal(tmp_path))
    assert cfg.dataset.image_size == 64
    assert cfg.dataset.attack_count == 50
    assert cfg.models.surrogates == ["cnn_a", "cnn_b"]
    assert cfg.models.held_out == ["cnn_c"]
    assert cfg.fusion.tau == 0.7
    assert cfg.fusion.iterations == 700
    assert cfg.noise.epsilon == pytest.approx(8 / 255)
    assert cfg.disentangle.gamma == 0.8
    assert cfg.seed == 0
    # normalized echo carries every default explicitly
    norm = normalized_dict(cfg)
    assert norm["fusion"]["tau"] == 0.7
    assert norm["evaluation"]["view_grid"]


def test_unknown_key_rejected_with_pointer(tmp_path):
    doc = minimal(tmp_path)
    doc["fusion"] = {"tua": 0.5}
    with pytest.raises(ConfigValidationError) as err:
        parse_config(doc)
    assert any("/fusion" in pointer for pointer, _ in err.value.violations)


def test_tau_range_error_names_field(tmp_path):
    doc = minimal(tmp_path)
    doc["fusion"] = {"tau": 1.5}
    with pytest.raises(ConfigValidationError) as err:
        parse_config(doc)
    assert any("tau" in pointer for pointer, _ in err.value.violations)


def test_surrogate_held_out_overlap_rejected(tmp_path):
    doc = minimal(tmp_path)
    doc["models"] = {"surrogates": ["cnn_a", "cnn_b"], "held_out": ["cnn_b"]}
    with pytest.raises(ConfigValidationError):
        parse_config(doc)


def test_unknown_model_id_rejected(tmp_path):
    doc = minimal(tmp_path)
    doc["models"] = {"surrogates": ["resnet50"]}
    with pytest.raises(ConfigValidationError):
        parse_config(doc)


def test_image_size_must_be_multiple_of_eight(tmp_path):
    doc = minimal(tmp_path)
    doc["dataset"]["image_size"] = 30
    with pytest.raises(ConfigValidationError):
        parse_config(doc)


def test_split_must_sum_to_one(tmp_path):
    doc = minimal(tmp_path)
    doc["dataset"]["split"] = {"train": 0.5, "val": 0.2, "attack": 0.2}
    with pytest.raises(ConfigValidationError):
        parse_config(doc)


def test_view_grid_names_unique(tmp_path):
    doc = minimal(tmp_path)
    doc["evaluation"] = {
        "view_grid": [{"name": "a"}, {"name": "a"}],
    }
    with pytest.raises(ConfigValidationError):
        parse_config(doc)


def test_load_config_file_errors(tmp_path):
    with pytest.raises(ConfigValidationError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigValidationError):
        load_config(bad)


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(minimal(tmp_path)))
    cfg = load_config(path)
    assert cfg.dataset.path == str(tmp_path)


def test_config_hash_stable_and_ignores_output_dir(tmp_path):
    a = parse_config(minimal(tmp_path))
    doc = minimal(tmp_path)
    doc["output_dir"] = "/somewhere/else"
    b = parse_config(doc)
    assert config_hash(a) == config_hash(b)
    doc["seed"] = 1
    c = parse_config(doc)
    assert config_hash(a) != config_hash(c)
