"""Flat key=value configuration parsing and dataclass coercion."""

from dataclasses import dataclass, field

import pytest

from kneemark.nn.model import ModelConfig
from kneemark.runconfig import (
    ConfigError,
    apply_overrides,
    build_dataclass,
    parse_config_text,
    pop_section,
    read_config,
)

TEXT = """
# comment line
model.width = 24

train.lr = 0.001   # inline comment
train.loss = wing
phantom.seed = 7
"""


def test_parse_basics():
    flat = parse_config_text(TEXT)
    assert flat == {
        "model.width": "24",
        "train.lr": "0.001",
        "train.loss": "wing",
        "phantom.seed": "7",
    }


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a.b = 1\nnot a pair\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("a.b = 1\na.b = 2\n")
    with pytest.raises(ConfigError, match="bad key"):
        parse_config_text("1bad.x = 1\n")
    with pytest.raises(ConfigError, match="bad key"):
        parse_config_text("a..b = 1\n")
    with pytest.raises(ConfigError, match="bad key"):
        parse_config_text("a-b = 1\n")
    # empty value is legal text; coercion decides later
    assert parse_config_text("a.b =\n") == {"a.b": ""}


def test_read_config_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TEXT)
    assert read_config(path) == parse_config_text(TEXT)
    path.write_text("broken line\n")
    with pytest.raises(ConfigError, match="run"):
        read_config(path)


def test_apply_overrides_later_wins():
    flat = {"train.lr": "0.001"}
    out = apply_overrides(flat, ["train.lr=0.01", "model.width=8", "model.width=12"])
    assert out == {"train.lr": "0.01", "model.width": "12"}
    assert flat == {"train.lr": "0.001"}
    with pytest.raises(ConfigError):
        apply_overrides(flat, ["no_equals_sign"])
    with pytest.raises(ConfigError):
        apply_overrides(flat, ["bad key=1"])
    assert apply_overrides(flat, None) == flat


def test_pop_section_strips_prefix():
    flat = {"train.lr": "1", "train.loss": "l1", "trainx.lr": "9", "model.width": "4"}
    sec = pop_section(flat, "train")
    assert sec == {"lr": "1", "loss": "l1"}
    assert flat == {"trainx.lr": "9", "model.width": "4"}
    assert pop_section(flat, "augment") == {}


@dataclass
class _Knobs:
    flag: bool = False
    count: int = 3
    rate: float = 0.5
    name: str = "x"
    radii: tuple = (1.0, 2.0)
    ids: tuple = (1, 2)
    limit: float | None = None
    required: list = field(default_factory=list)


def test_build_dataclass_coercions():
    got = build_dataclass(_Knobs, {
        "flag": "YES",
        "count": "12",
        "rate": "2.5e-1",
        "name": "abc",
        "radii": "1.0, 2.5,4",
        "ids": "3,4",
        "limit": "7.5",
    })
    assert got == _Knobs(True, 12, 0.25, "abc", (1.0, 2.5, 4.0), (3, 4), 7.5)
    assert build_dataclass(_Knobs, {"flag": "off"}).flag is False
    assert build_dataclass(_Knobs, {"limit": "NONE"}).limit is None
    assert build_dataclass(_Knobs, {"limit": ""}).limit is None
    assert isinstance(build_dataclass(_Knobs, {"ids": "5"}).ids[0], int)


def test_build_dataclass_errors():
    with pytest.raises(ConfigError, match="valid keys"):
        build_dataclass(_Knobs, {"nope": "1"})
    with pytest.raises(ConfigError):
        build_dataclass(_Knobs, {"count": "abc"})
    with pytest.raises(ConfigError):
        build_dataclass(_Knobs, {"flag": "maybe"})
    with pytest.raises(ConfigError):
        build_dataclass(_Knobs, {"radii": ""})
    # fields defaulted via a factory cannot be set from text
    with pytest.raises(ConfigError):
        build_dataclass(_Knobs, {"required": "1,2"})


def test_build_dataclass_wraps_validation_errors():
    with pytest.raises(ConfigError, match="model"):
        build_dataclass(ModelConfig, {"width": "-4"}, "model")
    cfg = build_dataclass(ModelConfig, {"width": "8", "beta": "2.0"}, "model")
    assert cfg.width == 8 and cfg.beta == 2.0
    assert cfg.landmarks == ModelConfig().landmarks
