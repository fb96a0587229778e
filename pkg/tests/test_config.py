import pytest
import yaml

from config import TrainConfig, config_from_dict, load_config, save_config
from errors import ConfigError


def test_schedule_scales_with_factor():
    cfg = TrainConfig().resolved()
    assert (cfg.iterations, cfg.group_interval, cfg.densify_from, cfg.densify_until) == (3000, 50, 50, 1500)
    assert (cfg.merge_densify_at, cfg.merge_optimize_at, cfg.reset_interval) == (1450, 2900, 300)
    assert cfg.activate_at == 100
    full = TrainConfig(schedule_scale=1.0).resolved()
    assert (full.iterations, full.merge_densify_at, full.merge_optimize_at) == (30_000, 14_500, 29_000)


def test_explicit_values_win(tiny_cfg):
    cfg = tiny_cfg.resolved()
    assert (cfg.iterations, cfg.activate_at, cfg.merge_optimize_at) == (40, 10, 35)
    schedule = cfg.schedule()
    assert (schedule.densify_end, schedule.total, schedule.scope) == (30, 40, "full")


@pytest.mark.parametrize("field,value", [
    ("utr", 0.0),
    ("utr", 1.2),
    ("strategy", "gradient"),
    ("scope", "partial"),
    ("t_saturation", 1.0),
    ("lambda_dssim", 2.0),
    ("background", [0.0, 0.0]),
    ("group_interval", 0),
    ("num_views", 1),
])
def test_invalid_fields_are_named(field, value):
    with pytest.raises(ConfigError) as info:
        config_from_dict({field: value}).validate()
    assert info.value.field == field


def test_schedule_order_checked_only_when_grouped(tiny_cfg):
    tiny_cfg.merge_densify_at = 38
    tiny_cfg.validate()
    tiny_cfg.strategy = "opacity"
    with pytest.raises(ConfigError):
        tiny_cfg.validate()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"strategy": "opacity", "sampling_temperature": 2.0})
    assert info.value.field == "sampling_temperature"


def test_load_yaml_with_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"strategy": "opacity", "utr": 0.5, "gt_count": 200}))
    cfg = load_config(path, {"utr": 0.7, "seed": None, "background": [1.0, 1.0, 1.0]})
    assert cfg.strategy == "opacity" and cfg.utr == 0.7 and cfg.seed == 0
    assert cfg.gt_count == 200 and cfg.background == [1.0, 1.0, 1.0]


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("strategy: [opacity\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("3\n")
    with pytest.raises(ConfigError):
        load_config(scalar)


def test_save_and_reload(tmp_path, tiny_cfg):
    cfg = tiny_cfg.validate()
    save_config(cfg, tmp_path / "config.yaml")
    assert load_config(tmp_path / "config.yaml") == cfg
