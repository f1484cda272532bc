import pytest
import yaml

from faug.config import ConfigNotFound, build_config, default_config_text, load_config
from faug.errors import ConfigInvalid


def test_default_config_loads():
    cfg = load_config("default")
    assert [m.id for m in cfg.zoo] == ["mlp", "cnn_a", "cnn_b", "tiny_attn"]
    assert len(cfg.held_out) == 4
    assert cfg.seed == 0 and cfg.attack.epsilon == pytest.approx(16 / 255)
    assert cfg.sweeps["seeds"] == [0, 1, 2, 3, 4]


def test_default_config_is_annotated():
    text = default_config_text()
    assert sum(line.lstrip().startswith("#") or " # " in line for line in text.splitlines()) > 20


def test_seed_override():
    assert load_config("default", seed=9).seed == 9


def test_missing_config(tmp_path):
    with pytest.raises(ConfigNotFound, match="config not found"):
        load_config(tmp_path / "nope.yaml")


def test_workspace_relative_to_config_file(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"workspace": "ws", "models": [{"architecture": "mlp"}]}))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.workspace == (tmp_path / "ws").resolve()
    assert cfg.out_dir == cfg.workspace / "out"


def test_resolved_round_trips_through_yaml():
    cfg = load_config("default")
    again = build_config({k: v for k, v in cfg.resolved().items()})
    assert again.resolved() == cfg.resolved()


@pytest.mark.parametrize("doc", [
    {"models": []},
    {"models": [{"architecture": "resnet"}]},
    {"models": [{"architecture": "mlp"}, {"architecture": "mlp"}]},
    {"models": [{"architecture": "mlp", "role": "judge"}]},
    {"models": [{"architecture": "mlp", "width": 3}]},
    {"models": [{"architecture": "mlp", "train": {"epochz": 3}}]},
    {"models": [{"architecture": "mlp"}], "colour": "red"},
    {"models": [{"architecture": "mlp"}], "attack": {"variant": "pgd"}},
    {"models": [{"architecture": "mlp"}], "hooks": {"cnn_a": {"layer": "conv1"}}},
    {"models": [{"architecture": "mlp"}], "dataset": {"classes": 1}},
    {"models": [{"architecture": "mlp"}], "seed": -1},
], ids=["empty", "arch", "dup", "role", "key", "train", "top", "variant", "hook", "dataset", "seed"])
def test_invalid_configs(doc):
    with pytest.raises(ConfigInvalid):
        build_config(doc)


def test_invalid_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("models: [\n")
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "c.yaml")


def test_hook_override_and_disable():
    cfg = build_config({"models": [{"id": "a", "architecture": "cnn_a"}, {"id": "b", "architecture": "mlp"}],
                        "hooks": {"a": {"layer": "conv2", "sigma": 0.2}, "b": None}})
    assert cfg.hooks["a"].layer == "conv2" and cfg.hooks["b"] is None
