# Licensed under the MIT License.
"""
Tests for backbone config files and command-line settings.
"""
import pytest
from hamcrest import assert_that, calling, is_, raises

import spci_settings as settings
from spci_settings import BackboneConfig, ConfigError

from .spci_test_client import constants, defaults


def _config(text: str) -> BackboneConfig:
    return settings.backbone_from_values(settings.parse_key_values(text))


def test_default_config_file_matches_defaults():
    assert_that(_config(defaults.TOY_CONFIG), is_(BackboneConfig()))


def test_bundled_config_file_matches_defaults():
    path = constants.TEST_DATA / "toy_backbone.cfg"
    assert_that(settings.load_backbone_config(str(path)), is_(BackboneConfig()))


def test_comments_and_blank_lines_are_ignored():
    cfg = _config("\n# comment\nseed = 7   # trailing\n\n")
    assert_that(cfg.seed, is_(7))


@pytest.mark.parametrize(
    "text, message",
    [
        ("depth = 3", "unknown key 'depth'"),
        ("seed = 1\nseed = 2", "duplicate key 'seed'"),
        ("seed 1", "expected 'key = value'"),
        ("spci_at = P2", "spci_at accepts"),
        ("input_size = 60,60", "multiples of 32"),
        ("channels = 8,16,8,64,128", "non-decreasing"),
        ("channels = 8,16,32", "5 stage widths"),
        ("dropout = 1.0", "dropout must be in"),
        ("reduction = 0", "reduction must be >= 1"),
        ("ssg_on = maybe", "ssg_on"),
        ("seed = -1", "seed must be >= 0"),
    ],
)
def test_invalid_config_is_rejected(text, message):
    assert_that(calling(_config).with_args(text), raises(ConfigError, message))


@pytest.mark.parametrize(
    "text, taps",
    [
        ("spci_at = none", ()),
        ("spci_at = p3", ("P3",)),
        ("spci_at = P5, P3", ("P5", "P3")),
        ("spci_at = P4", ("P4",)),
    ],
)
def test_spci_at_values(text, taps):
    assert_that(_config(text).spci_at, is_(taps))


@pytest.mark.parametrize("value, expected", [("off", False), ("0", False), ("yes", True), ("True", True)])
def test_boolean_values(value, expected):
    assert_that(_config(f"cdm_on = {value}").cdm_on, is_(expected))


def test_missing_config_file_is_a_config_error(tmp_path):
    assert_that(
        calling(settings.load_backbone_config).with_args(str(tmp_path / "absent.cfg")),
        raises(ConfigError, "cannot read config file"),
    )


def test_config_file_is_read(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text("input_size = 32,64\nchannels = 4,4,8,8,16\n", encoding="utf-8")

    cfg = settings.load_backbone_config(str(path))

    assert_that(cfg.input_size, is_((32, 64)))
    assert_that(cfg.channels, is_((4, 4, 8, 8, 16)))


def test_run_settings_fill_defaults():
    run = settings.run_from_values({"command": "forward", "seed": None, "out": None})
    assert_that((run.seed, run.out, run.bn_mode, run.steps), is_((None, "spci_out", "eval", 200)))


@pytest.mark.parametrize(
    "values",
    [
        {"command": "predict"},
        {"command": "forward", "bn_mode": "test"},
        {"command": "forward", "spci_at": "p4"},
        {"command": "train-toy", "batch": 0},
    ],
)
def test_invalid_run_settings(values):
    assert_that(calling(settings.run_from_values).with_args(values), raises(ConfigError))


def test_command_line_overrides_config_file(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text("seed = 3\nspci_at = P3\npfm_on = true\n", encoding="utf-8")
    run = settings.run_from_values(
        {"command": "forward", "config": str(path), "spci_at": "p5", "seed": 9, "disable_pfm": True}
    )

    cfg = settings.resolve_backbone(run)

    assert_that((cfg.seed, cfg.spci_at, cfg.pfm_on, cfg.ssg_on), is_((9, ("P5",), False, True)))


def test_command_line_without_overrides_keeps_the_file(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text("seed = 3\n", encoding="utf-8")
    run = settings.run_from_values({"command": "cost", "config": str(path)})
    assert_that(settings.resolve_backbone(run).seed, is_(3))


def test_unstructure_gives_plain_values():
    values = settings.unstructure(BackboneConfig())
    assert_that(values["channels"], is_([8, 16, 32, 64, 128]))
    assert_that(values["spci_at"], is_(["P3", "P5"]))


def test_error_names_the_source(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("dropout = 2\n", encoding="utf-8")
    assert_that(
        calling(settings.load_backbone_config).with_args(str(path)),
        raises(ConfigError, "bad.cfg"),
    )
    assert_that(
        calling(settings.load_backbone_config).with_args(str(path)),
        raises(ConfigError, r"\[0,1\)"),
    )


def test_config_file_must_be_utf8(tmp_path):
    path = tmp_path / "binary.cfg"
    path.write_bytes(b"seed = 1\n\xff\n")
    assert_that(
        calling(settings.load_backbone_config).with_args(str(path)),
        raises(ConfigError, "cannot read config file"),
    )
