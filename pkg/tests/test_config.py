import pytest

from cvae.config import ConfigError, build_dataclass, format_config, load_config, parse_config, parse_value
from cvae.training import TrainConfig


def test_value_parsing():
    assert parse_value("12") == 12 and parse_value("1e-3") == 1e-3
    assert parse_value("yes") is True and parse_value("off") is False
    assert parse_value("0, 0.5, 1") == [0, 0.5, 1]
    assert parse_value("2x3") == "2x3"


def test_parse_comments_and_errors():
    cfg = parse_config("# header\nepochs = 3  # inline\n\nlearning-rate=0.01\n")
    assert cfg == {"epochs": 3, "learning_rate": 0.01}
    with pytest.raises(ConfigError, match="<config>:1:"):
        parse_config("epochs 3")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("a=1\na=2")


def test_round_trip_and_dataclass(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(format_config({"epochs": 4, "zero_bias": True, "learning_rate": 0.002}))
    cfg = build_dataclass(TrainConfig, load_config(p))
    assert cfg.epochs == 4 and cfg.zero_bias is True and cfg.learning_rate == 0.002
    with pytest.raises(ConfigError, match="unknown"):
        build_dataclass(TrainConfig, {"epochz": 3})
    with pytest.raises(ConfigError, match="invalid"):
        build_dataclass(TrainConfig, {"batch_size": 1})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
