# Licensed under the MIT License.
"""SPCI を P3/P5 の後に挿入できるトイ バックボーンと、学習デモ用の分類器。

各ステージは 3x3 畳み込み (stride 1、same パディング) の後に 2 倍の間引きと
relu を行います。これは stride 2、パディング 1 の畳み込みと同じ値になります。
"""
from __future__ import annotations

import pathlib
from typing import Any, Dict, Iterator, List, Optional, Tuple

import attrs
import numpy as np

import spci_block as block
import spci_codec as codec
import spci_tensor as tensor
from spci_block import SpciDiagnostics, SpciParams
from spci_settings import INSERTION_POINTS, TAP_NAMES, BackboneConfig, ConfigError
from spci_tensor import ConvLayer, Mode, Precision, ShapeError, Tape, Tensor
from spci_utils import derive_seed, log_to_output

STAGE_KERNEL = 3
OUTPUT_TAPS = ("P3", "P5")


@attrs.define(frozen=True)
class StageSpec:
    """1 つのダウンサンプリング ステージ。P_k の空間サイズは入力の 1/2^k です。"""

    name: str
    in_channels: int
    out_channels: int
    factor: int = 2

    @property
    def depth(self) -> int:
        return TAP_NAMES.index(self.name) + 1


@attrs.define(eq=False)
class Stage:
    spec: StageSpec
    conv: ConvLayer


@attrs.define(eq=False)
class Backbone:
    """ステージの列と、タップ名をキーにした挿入済み SPCI ブロック。"""

    config: BackboneConfig
    stages: List[Stage]
    spci: Dict[str, SpciParams] = attrs.field(factory=dict)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.config.in_channels, *self.config.input_size)

    def tap_shape(self, name: str, batch: int = 1) -> Tuple[int, int, int, int]:
        spec = self.stages[TAP_NAMES.index(name)].spec
        height, width = self.config.input_size
        scale = 2**spec.depth
        return (batch, spec.out_channels, height // scale, width // scale)

    def output_taps(self) -> Tuple[str, ...]:
        return tuple(name for name in TAP_NAMES if name in OUTPUT_TAPS or name in self.spci)

    def iter_layers(self) -> Iterator[tensor.Layer]:
        for stage in self.stages:
            yield stage.conv
        for name in TAP_NAMES:
            if name in self.spci:
                yield from block.iter_layers(self.spci[name])


def _tap_seeds(seed: int, stream: str) -> Dict[str, int]:
    # 挿入位置ごとに固定のストリーム
    return {name: derive_seed(seed, stream, i) for i, name in enumerate(("stages", *INSERTION_POINTS))}


def stage_specs(cfg: BackboneConfig) -> List[StageSpec]:
    widths = (cfg.in_channels, *cfg.channels)
    return [StageSpec(name, widths[i], widths[i + 1]) for i, name in enumerate(TAP_NAMES)]


def build_backbone(cfg: BackboneConfig, precision: Precision = "single") -> Backbone:
    """設定からバックボーンを構築します。同じシードからは同じ重みが得られます。"""
    attrs.validate(cfg)
    seeds = _tap_seeds(cfg.seed, "init")
    rng = np.random.default_rng(seeds["stages"])
    stages = [
        Stage(
            spec=spec,
            conv=block.uniform_conv(
                rng, f"{spec.name.lower()}.conv", spec.in_channels, spec.out_channels, STAGE_KERNEL, precision
            ),
        )
        for spec in stage_specs(cfg)
    ]
    spci: Dict[str, SpciParams] = {}
    for name in cfg.spci_at:
        channels = stages[TAP_NAMES.index(name)].spec.out_channels
        params = block.init_spci(
            channels,
            channels,
            r=cfg.reduction,
            p=cfg.dropout,
            seed=seeds[name],
            precision=precision,
            name=name.lower(),
        )
        spci[name] = params.with_flags(cfg.ssg_on, cfg.pfm_on, cfg.cdm_on)
    log_to_output(f"Built backbone: stages {cfg.channels}, SPCI at {cfg.spci_at or 'none'}")
    return Backbone(config=cfg, stages=stages, spci=spci)


def run_stage(x: Tensor, conv: ConvLayer, tape: Optional[Tape] = None) -> Tensor:
    """3x3 畳み込み、2 倍の間引き、relu。"""
    return tensor.pointwise(tensor.subsample(tensor.conv2d(x, conv, tape), 2, tape), "relu", tape)


def forward_with_taps(
    backbone: Backbone,
    x: Tensor,
    mode: Mode = "eval",
    seed: int = 0,
    tape: Optional[Tape] = None,
    bn_mode: Optional[Mode] = None,
    dropout_mode: Optional[Mode] = None,
) -> Tuple[Dict[str, Tensor], Dict[str, SpciDiagnostics]]:
    """全ステージを実行し、P3/P5 (と SPCI を挿入した他のタップ) の出力を返します。"""
    expected = backbone.input_shape
    if x.shape[1:] != expected:
        raise ShapeError(
            f"backbone: input shape {x.shape} does not match configured [N,{','.join(map(str, expected))}]"
        )
    dropout_seeds = _tap_seeds(seed, "dropout")
    taps: Dict[str, Tensor] = {}
    diagnostics: Dict[str, SpciDiagnostics] = {}
    wanted = backbone.output_taps()
    for stage in backbone.stages:
        x = run_stage(x, stage.conv, tape)
        name = stage.spec.name
        if name in backbone.spci:
            x, diagnostics[name] = block.spci_forward(
                x,
                backbone.spci[name],
                mode=mode,
                seed=dropout_seeds[name],
                tape=tape,
                bn_mode=bn_mode,
                dropout_mode=dropout_mode,
            )
        if name in wanted:
            taps[name] = x
    return taps, diagnostics


# *****************************************************
# アブレーション プリセット
# *****************************************************
PRESETS: Dict[str, Dict[str, Any]] = {
    "B1": {"spci_at": ()},
    "B2": {"ssg_on": False},
    "B3": {"pfm_on": False},
    "B4": {"cdm_on": False},
    "B5": {"spci_at": ("P3",)},
    "B6": {"spci_at": ("P5",)},
    "B7": {},
}


def preset(name: str, base: Optional[BackboneConfig] = None) -> BackboneConfig:
    """アブレーション表の 1 行に対応する設定。指定のない項目は P3+P5 の完全な SPCI です。"""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    full = {"spci_at": ("P3", "P5"), "ssg_on": True, "pfm_on": True, "cdm_on": True}
    return attrs.evolve(base or BackboneConfig(), **{**full, **PRESETS[name]})


# *****************************************************
# 重みの保存と読み込み
# *****************************************************
def manifest_path(directory: codec.PathLike, tap: str) -> pathlib.Path:
    return pathlib.Path(directory) / f"{tap.lower()}.manifest"


def save_backbone_weights(backbone: Backbone, directory: codec.PathLike) -> List[pathlib.Path]:
    """挿入済みの SPCI ブロックごとに `<tap>.manifest` を書き出します。"""
    return [codec.save_spci(params, manifest_path(directory, name)) for name, params in backbone.spci.items()]


def load_spci_weights(backbone: Backbone, directory: codec.PathLike) -> Backbone:
    """`<tap>.manifest` から SPCI の重みを読み込みます。無効化フラグは設定と論理積を取ります。"""
    cfg = backbone.config
    loaded: Dict[str, SpciParams] = {}
    for name, current in backbone.spci.items():
        params = codec.load_spci(manifest_path(directory, name), name=name.lower())
        if (params.c_in, params.c_out) != (current.c_in, current.c_out):
            raise codec.ManifestShapeError(
                f"{manifest_path(directory, name)}: block is {params.c_in}->{params.c_out}, "
                f"tap {name} needs {current.c_in}->{current.c_out}"
            )
        loaded[name] = params.with_flags(
            params.ssg_on and cfg.ssg_on, params.pfm_on and cfg.pfm_on, params.cdm_on and cfg.cdm_on
        )
    return attrs.evolve(backbone, spci=loaded)


# *****************************************************
# 学習デモ用の分類器
# *****************************************************
TOY_CLASSES = ("horizontal", "vertical", "checkerboard", "square")
TOY_SIZE = 16
TOY_NOISE = 0.1
TOY_WIDTHS = (1, 8, 16)


@attrs.define(eq=False)
class ToyClassifier:
    """2 段のステージ、SPCI(16)、大域平均、1x1 の線形層。"""

    stages: List[ConvLayer]
    spci: SpciParams
    head: ConvLayer

    def iter_layers(self) -> Iterator[tensor.Layer]:
        yield from self.stages
        yield from block.iter_layers(self.spci, enabled_only=True)
        yield self.head


def build_toy_classifier(seed: int, ssg_on: bool = True, pfm_on: bool = True, cdm_on: bool = True) -> ToyClassifier:
    stage_seed, spci_seed, head_seed = (derive_seed(seed, "toy", i) for i in range(3))
    rng = np.random.default_rng(stage_seed)
    stages = [
        block.uniform_conv(rng, f"stage{i + 1}.conv", c_in, c_out, STAGE_KERNEL)
        for i, (c_in, c_out) in enumerate(zip(TOY_WIDTHS, TOY_WIDTHS[1:]))
    ]
    width = TOY_WIDTHS[-1]
    spci = block.init_spci(width, width, seed=spci_seed).with_flags(ssg_on, pfm_on, cdm_on)
    head = block.uniform_conv(np.random.default_rng(head_seed), "head", width, len(TOY_CLASSES), 1)
    return ToyClassifier(stages=stages, spci=spci, head=head)


def toy_forward(
    model: ToyClassifier,
    x: Tensor,
    tape: Optional[Tape] = None,
    bn_mode: Mode = "eval",
    dropout_mode: Mode = "eval",
    seed: int = 0,
) -> Tensor:
    """[N,1,16,16] から [N,4,1,1] のロジットを返します。"""
    for conv in model.stages:
        x = run_stage(x, conv, tape)
    x, _ = block.spci_forward(x, model.spci, seed=seed, tape=tape, bn_mode=bn_mode, dropout_mode=dropout_mode)
    return tensor.conv2d(tensor.pool(x, "avg", "spatial", tape), model.head, tape)


def toy_pattern(label: int, size: int = TOY_SIZE) -> np.ndarray:
    rows, cols = np.indices((size, size))
    kind = TOY_CLASSES[label]
    if kind == "horizontal":
        return ((rows // 2) % 2 == 0).astype(np.float64)
    if kind == "vertical":
        return ((cols // 2) % 2 == 0).astype(np.float64)
    if kind == "checkerboard":
        return (((rows // 2) + (cols // 2)) % 2 == 0).astype(np.float64)
    quarter = size // 4
    pattern = np.zeros((size, size))
    pattern[quarter : size - quarter, quarter : size - quarter] = 1.0
    return pattern


def toy_batch(batch: int, seed: int) -> Tuple[Tensor, np.ndarray]:
    """クラスを順に巡回したパターンにガウス雑音を加えたバッチ。"""
    labels = np.arange(batch) % len(TOY_CLASSES)
    noise = np.random.default_rng(seed).normal(0.0, TOY_NOISE, size=(batch, 1, TOY_SIZE, TOY_SIZE))
    images = np.stack([toy_pattern(int(label))[None] for label in labels]) + noise
    return Tensor(images.astype(np.float32)), labels
