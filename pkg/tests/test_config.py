import json

import pytest
import torch

from avatar_slam.config import apply_thread_override, from_dict, load_config_file
from avatar_slam.errors import ContractViolation
from avatar_slam.slam import PRESETS, SlamConfig
from avatar_slam.synth import WorldSpec


def test_python_config_module_is_loaded(tmp_path):
    path = tmp_path / "slam.config.py"
    path.write_text("config = {'tracking_iterations': 7, 'keyframes': {'window_size': 4}}\n")
    config = SlamConfig.from_dict(load_config_file(path))
    assert config.tracking_iterations == 7
    assert config.keyframes.window_size == 4
    assert config.keyframes.camera_motion == 0.05


def test_json_config_maps_nested_dataclasses(tmp_path):
    path = tmp_path / "world.json"
    path.write_text(json.dumps({"preset": "street", "frames": 5, "noise": {"pose": 0.0}}))
    spec = WorldSpec.from_dict(load_config_file(path))
    assert spec.preset == "street"
    assert spec.frames == 5
    assert spec.noise.pose == 0.0
    assert spec.noise.keypoints == 2.0


def test_module_without_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.py"
    path.write_text("x = 1\n")
    assert load_config_file(path) == {}
    assert SlamConfig.from_dict({}) == SlamConfig()


def test_unknown_keys_are_rejected_with_their_path():
    with pytest.raises(ContractViolation, match="weights.mapping."):
        SlamConfig.from_dict({"weights": {"mapping": {"nope": 1.0}}})


def test_non_mapping_config_is_rejected(tmp_path):
    path = tmp_path / "list.json"
    path.write_text("[1, 2]")
    with pytest.raises(ContractViolation):
        load_config_file(path)


def test_missing_config_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config_file(tmp_path / "absent.py")


def test_round_trip_through_plain_dicts():
    config = SlamConfig(mapping_iterations=3, camera_mode="fixed", mask_human=True)
    assert SlamConfig.from_dict(json.loads(json.dumps(config.to_dict()))) == config


@pytest.mark.parametrize(
    "overrides",
    [
        {"camera_mode": "orbit"},
        {"refinement_mode": "sometimes"},
        {"tracking_iterations": 0},
        {"ransac_threshold": 1.5},
        {"weights": {"tracking": {"rgb": -1.0}}},
    ],
)
def test_invalid_values_raise(overrides):
    with pytest.raises(ContractViolation):
        SlamConfig.from_dict(overrides)


def test_from_dict_requires_a_mapping():
    with pytest.raises(ContractViolation):
        from_dict(SlamConfig, [1, 2])


def test_thread_override(monkeypatch):
    before = torch.get_num_threads()
    try:
        monkeypatch.setenv("AVATAR_SLAM_THREADS", "1")
        apply_thread_override()
        assert torch.get_num_threads() == 1
        monkeypatch.setenv("AVATAR_SLAM_THREADS", "many")
        with pytest.raises(ContractViolation):
            apply_thread_override()
    finally:
        torch.set_num_threads(before)


def test_defaults_are_the_full_size_system():
    config = SlamConfig()
    assert config.deformation.levels == 16
    assert config.deformation.table_size == 2 ** 17
    assert config.deformation.mlp_width == 128
    assert config.deformation.mlp_hidden_layers == 3
    assert config.field_pretrain_iterations == 5000
    assert config.densify.interval == 150


def test_desk_preset_shrinks_the_field_and_keeps_other_defaults():
    config = SlamConfig.preset("desk")
    assert (config.deformation.levels, config.deformation.table_size) == (8, 2 ** 14)
    assert (config.deformation.mlp_width, config.deformation.mlp_hidden_layers) == (64, 2)
    assert config.field_pretrain_iterations == 200
    assert config.densify.interval == 100
    assert config.deformation.features_per_level == SlamConfig().deformation.features_per_level
    assert config.tracking_iterations == SlamConfig().tracking_iterations


def test_preset_overrides_merge_nested_keys():
    config = SlamConfig.preset("desk", {"deformation": {"levels": 4}, "tracking_iterations": 9})
    assert config.deformation.levels == 4
    assert config.deformation.table_size == 2 ** 14
    assert config.tracking_iterations == 9
    assert PRESETS["desk"]["deformation"]["levels"] == 8


def test_unknown_preset_raises():
    with pytest.raises(ContractViolation, match="desk"):
        SlamConfig.preset("stadium")
