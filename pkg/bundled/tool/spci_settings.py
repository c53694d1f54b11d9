# Licensed under the MIT License.
"""バックボーン設定と CLI 実行設定。

設定値の優先順位は 既定値 < 設定ファイル < コマンドライン フラグ です。
"""
import pathlib
import typing
from typing import Any, Dict, Mapping, Optional, Tuple

import attrs
import cattrs
from cattrs.v import format_exception

TAP_NAMES = ("P1", "P2", "P3", "P4", "P5")
INSERTION_POINTS = ("P3", "P4", "P5")
INPUT_MULTIPLE = 2 ** len(TAP_NAMES)
COMMANDS = ("forward", "heatmap", "cost", "gradcheck", "train-toy", "init-weights", "ablation")
SPCI_AT_CHOICES = {"p3": ("P3",), "p5": ("P5",), "p3p5": ("P3", "P5"), "none": ()}
MODES = ("train", "eval")


class ConfigError(ValueError):
    """設定ファイルまたはフラグの値が不正です。"""

    pass  # pylint: disable=unnecessary-pass


def _normalize_taps(value: Any) -> Tuple[str, ...]:
    if isinstance(value, str):
        value = value.split(",")
    taps = tuple(str(tap).strip().upper() for tap in value)
    return tuple(tap for tap in taps if tap and tap != "NONE")


def _check_input_size(_instance, _attribute, value: Tuple[int, int]) -> None:
    if len(value) != 2 or any(d < INPUT_MULTIPLE or d % INPUT_MULTIPLE for d in value):
        raise ConfigError(f"input_size must be two positive multiples of {INPUT_MULTIPLE}, got {value}")


def _check_channels(_instance, _attribute, value: Tuple[int, ...]) -> None:
    if len(value) != len(TAP_NAMES):
        raise ConfigError(f"channels must list {len(TAP_NAMES)} stage widths, got {value}")
    if min(value) < 1:
        raise ConfigError(f"channels must be positive, got {value}")
    if any(b < a for a, b in zip(value, value[1:])):
        raise ConfigError(f"channels must be non-decreasing with depth, got {value}")


def _check_spci_at(_instance, _attribute, value: Tuple[str, ...]) -> None:
    unknown = [tap for tap in value if tap not in INSERTION_POINTS]
    if unknown:
        raise ConfigError(f"spci_at accepts {', '.join(INSERTION_POINTS)} or none, got {unknown}")
    if len(set(value)) != len(value):
        raise ConfigError(f"spci_at lists a tap twice: {value}")


def _check_positive(_instance, attribute, value: int) -> None:
    if value < 1:
        raise ConfigError(f"{attribute.name} must be >= 1, got {value}")


def _check_non_negative(_instance, attribute, value) -> None:
    if value < 0:
        raise ConfigError(f"{attribute.name} must be >= 0, got {value}")


def _check_rate(_instance, attribute, value: float) -> None:
    if not 0 <= value < 1:
        raise ConfigError(f"{attribute.name} must be in [0,1), got {value}")


def _check_choice(choices):
    def check(_instance, attribute, value) -> None:
        if value is not None and value not in choices:
            raise ConfigError(f"{attribute.name} must be one of {', '.join(choices)}, got {value!r}")

    return check


@attrs.define(frozen=True)
class BackboneConfig:
    """トイ バックボーンの構成。"""

    input_size: Tuple[int, int] = attrs.field(default=(64, 64), validator=_check_input_size)
    in_channels: int = attrs.field(default=3, validator=_check_positive)
    channels: Tuple[int, ...] = attrs.field(default=(8, 16, 32, 64, 128), validator=_check_channels)
    spci_at: Tuple[str, ...] = attrs.field(
        default=("P3", "P5"), converter=_normalize_taps, validator=_check_spci_at
    )
    seed: int = attrs.field(default=0, validator=_check_non_negative)
    reduction: int = attrs.field(default=16, validator=_check_positive)
    dropout: float = attrs.field(default=0.1, validator=_check_rate)
    ssg_on: bool = True
    pfm_on: bool = True
    cdm_on: bool = True


@attrs.define(frozen=True)
class RunConfig:
    """1 回の CLI 実行の設定。"""

    command: str = attrs.field(validator=_check_choice(COMMANDS))
    input: Optional[str] = None
    weights: Optional[str] = None
    seed: Optional[int] = None
    out: str = "spci_out"
    config: Optional[str] = None
    spci_at: Optional[str] = attrs.field(default=None, validator=_check_choice(tuple(SPCI_AT_CHOICES)))
    disable_ssg: bool = False
    disable_pfm: bool = False
    disable_cdm: bool = False
    bn_mode: str = attrs.field(default="eval", validator=_check_choice(MODES))
    dropout_mode: str = attrs.field(default="eval", validator=_check_choice(MODES))
    verbose: bool = False
    steps: int = attrs.field(default=200, validator=_check_non_negative)
    lr: float = attrs.field(default=0.05, validator=_check_non_negative)
    batch: int = attrs.field(default=8, validator=_check_positive)


def default_backbone_settings() -> Dict[str, Any]:
    return CONVERTER.unstructure(BackboneConfig())


def default_run_settings() -> Dict[str, Any]:
    return {
        "input": None,
        "weights": None,
        "seed": None,
        "out": "spci_out",
        "config": None,
        "spci_at": None,
        "bn_mode": "eval",
        "dropout_mode": "eval",
        "verbose": False,
        "steps": 200,
        "lr": 0.05,
        "batch": 8,
    }


# *****************************************************
# cattrs 変換
# *****************************************************
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _structure_bool(value: Any, _type) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _structure_tuple(value: Any, type_) -> tuple:
    if isinstance(value, str):
        items = [item.strip() for item in value.split(",") if item.strip()]
    else:
        items = list(value)
    args = typing.get_args(type_)
    if len(args) == 2 and args[1] is Ellipsis:
        return tuple(CONVERTER.structure(item, args[0]) for item in items)
    if len(items) != len(args):
        raise ValueError(f"expected {len(args)} comma-separated values, got {len(items)}")
    return tuple(CONVERTER.structure(item, arg) for item, arg in zip(items, args))


def _structure_int(value: Any, _type) -> int:
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"expected an integer, got {value!r}")
    return int(value)


CONVERTER = cattrs.Converter()
CONVERTER.register_structure_hook(bool, _structure_bool)
CONVERTER.register_structure_hook(int, _structure_int)
CONVERTER.register_structure_hook_func(lambda t: typing.get_origin(t) is tuple, _structure_tuple)
CONVERTER.register_unstructure_hook_func(lambda t: typing.get_origin(t) is tuple, list)


def _format_error(exc: BaseException, type_) -> str:
    if isinstance(exc, ConfigError):
        return str(exc)
    return format_exception(exc, type_)


def _structure(values: Mapping[str, Any], cls, source: str):
    try:
        return CONVERTER.structure(dict(values), cls)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except cattrs.BaseValidationError as exc:
        messages = "; ".join(cattrs.transform_error(exc, path=source, format_exception=_format_error))
        raise ConfigError(messages) from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    """`key = value` の行を読み取ります。`#` 以降と空行は無視します。"""
    values: Dict[str, str] = {}
    known = {field.name for field in attrs.fields(BackboneConfig)}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        if key not in known:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def backbone_from_values(values: Mapping[str, Any], source: str = "<settings>") -> BackboneConfig:
    """既定値に `values` を重ねた BackboneConfig を返します。"""
    merged = {**default_backbone_settings(), **values}
    return _structure(merged, BackboneConfig, source)


def load_backbone_config(path: Optional[str]) -> BackboneConfig:
    if path is None:
        return BackboneConfig()
    config_path = pathlib.Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
    return backbone_from_values(parse_key_values(text, str(config_path)), str(config_path))


def run_from_values(values: Mapping[str, Any]) -> RunConfig:
    merged = {**default_run_settings(), **{k: v for k, v in values.items() if v is not None}}
    return _structure(merged, RunConfig, "<command line>")


def resolve_backbone(run: RunConfig) -> BackboneConfig:
    """設定ファイルを読み、コマンドライン フラグで上書きします。"""
    base = load_backbone_config(run.config)
    overrides: Dict[str, Any] = {}
    if run.spci_at is not None:
        overrides["spci_at"] = SPCI_AT_CHOICES[run.spci_at]
    if run.seed is not None:
        overrides["seed"] = run.seed
    for flag in ("ssg", "pfm", "cdm"):
        if getattr(run, f"disable_{flag}"):
            overrides[f"{flag}_on"] = False
    if not overrides:
        return base
    try:
        return attrs.evolve(base, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"<command line>: {exc}") from exc


def unstructure(value: Any) -> Dict[str, Any]:
    return CONVERTER.unstructure(value)
