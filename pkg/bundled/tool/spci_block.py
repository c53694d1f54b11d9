# Licensed under the MIT License.
"""SPCI ブロック: SSG、PFM、CDM とその合成。

ブロックの流れ:
    s = SSG(f)          チャネル注意 (無効なら f)
    alpha = 1x1 変換(s)  出力チャネル数へ合わせる
    beta = PFM(alpha)    空間注意 (無効なら alpha)
    gamma = CDM(beta)    要素ごとの注意 (無効なら beta)
    out = dropout(alpha + beta + gamma)
"""
from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import attrs
import numpy as np

import spci_tensor as tensor
from spci_tensor import BatchNormLayer, ConvLayer, Mode, Precision, ShapeError, Tape, Tensor

DEFAULT_REDUCTION = 16
DEFAULT_DROPOUT = 0.1
MIN_MID_CHANNELS = 8


def ssg_mid_channels(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
    return max(math.ceil(channels / reduction), MIN_MID_CHANNELS)


def cdm_mid_channels(channels: int) -> int:
    return max(math.ceil(channels / 2), MIN_MID_CHANNELS)


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeError(message)


@attrs.define(eq=False)
class SsgParams:
    conv1: ConvLayer
    conv2: ConvLayer
    reduction: int = DEFAULT_REDUCTION

    def __attrs_post_init__(self):
        _expect(
            self.conv1.kernel == 1 and self.conv2.kernel == 1,
            f"ssg: both convolutions must be 1x1, got {self.conv1.kernel} and {self.conv2.kernel}",
        )
        _expect(
            self.conv1.c_in == self.conv2.c_out and self.conv1.c_out == self.conv2.c_in,
            f"ssg: conv1 {self.conv1.weight.shape} and conv2 {self.conv2.weight.shape} do not chain",
        )

    @property
    def channels(self) -> int:
        return self.conv1.c_in


@attrs.define(eq=False)
class PfmParams:
    conv7: ConvLayer

    def __attrs_post_init__(self):
        _expect(
            self.conv7.weight.shape[:3] == (1, 2, 7),
            f"pfm: conv7 must be 7x7 from 2 maps to 1, got {self.conv7.weight.shape}",
        )


@attrs.define(eq=False)
class CdmParams:
    conv1: ConvLayer
    bn1: BatchNormLayer
    conv2: ConvLayer
    bn2: BatchNormLayer
    conv3: ConvLayer

    def __attrs_post_init__(self):
        mid = self.conv1.c_out
        _expect(
            (self.conv1.kernel, self.conv2.kernel, self.conv3.kernel) == (1, 3, 1),
            "cdm: kernels must be 1x1, 3x3, 1x1",
        )
        _expect(
            self.bn1.channels == mid
            and self.conv2.weight.shape[:2] == (mid, mid)
            and self.bn2.channels == mid
            and self.conv3.c_in == mid
            and self.conv3.c_out == self.conv1.c_in,
            f"cdm: layer widths do not chain around C_mid={mid}",
        )

    @property
    def channels(self) -> int:
        return self.conv1.c_in

    @property
    def mid_channels(self) -> int:
        return self.conv1.c_out


@attrs.define(eq=False)
class SpciParams:
    """1 つの SPCI ブロックのパラメータ一式。無効なサブモジュールは None でも構いません。"""

    transform: ConvLayer
    ssg: Optional[SsgParams] = None
    pfm: Optional[PfmParams] = None
    cdm: Optional[CdmParams] = None
    dropout: float = DEFAULT_DROPOUT
    ssg_on: bool = True
    pfm_on: bool = True
    cdm_on: bool = True
    name: str = "spci"

    def __attrs_post_init__(self):
        _expect(self.transform.kernel == 1, "spci: transform must be a 1x1 convolution")
        for flag, sub in (("ssg", self.ssg), ("pfm", self.pfm), ("cdm", self.cdm)):
            if getattr(self, f"{flag}_on") and sub is None:
                raise ShapeError(f"spci: {flag} is enabled but has no parameters")
        if self.ssg is not None:
            _expect(
                self.ssg.channels == self.c_in,
                f"spci: ssg width {self.ssg.channels} != c_in {self.c_in}",
            )
        if self.cdm is not None:
            _expect(
                self.cdm.channels == self.c_out,
                f"spci: cdm width {self.cdm.channels} != c_out {self.c_out}",
            )
        if not 0 <= self.dropout < 1:
            raise ValueError(f"spci: dropout must be in [0,1), got {self.dropout}")

    @property
    def c_in(self) -> int:
        return self.transform.c_in

    @property
    def c_out(self) -> int:
        return self.transform.c_out

    def with_flags(self, ssg_on: bool = True, pfm_on: bool = True, cdm_on: bool = True) -> SpciParams:
        return attrs.evolve(self, ssg_on=ssg_on, pfm_on=pfm_on, cdm_on=cdm_on)

    def astype(self, precision: Precision) -> SpciParams:
        """全層を指定精度に複製したパラメータを返します。"""
        return attrs.evolve(
            self,
            transform=self.transform.astype(precision),
            ssg=None
            if self.ssg is None
            else attrs.evolve(
                self.ssg, conv1=self.ssg.conv1.astype(precision), conv2=self.ssg.conv2.astype(precision)
            ),
            pfm=None if self.pfm is None else PfmParams(self.pfm.conv7.astype(precision)),
            cdm=None
            if self.cdm is None
            else CdmParams(
                conv1=self.cdm.conv1.astype(precision),
                bn1=self.cdm.bn1.astype(precision),
                conv2=self.cdm.conv2.astype(precision),
                bn2=self.cdm.bn2.astype(precision),
                conv3=self.cdm.conv3.astype(precision),
            ),
        )


@attrs.define(frozen=True, eq=False)
class SpciDiagnostics:
    """注意重みと融合前の 3 つの枝。"""

    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    w_s: Optional[Tensor] = None
    w_p: Optional[Tensor] = None
    w_c: Optional[Tensor] = None


def iter_layers(params: SpciParams, enabled_only: bool = False) -> Iterator[tensor.Layer]:
    """ssg、transform、pfm、cdm の順に層を列挙します。"""
    if params.ssg is not None and (params.ssg_on or not enabled_only):
        yield params.ssg.conv1
        yield params.ssg.conv2
    yield params.transform
    if params.pfm is not None and (params.pfm_on or not enabled_only):
        yield params.pfm.conv7
    if params.cdm is not None and (params.cdm_on or not enabled_only):
        yield params.cdm.conv1
        yield params.cdm.bn1
        yield params.cdm.conv2
        yield params.cdm.bn2
        yield params.cdm.conv3


# *****************************************************
# サブモジュール
# *****************************************************
def ssg_forward(f: Tensor, params: SsgParams, tape: Optional[Tape] = None) -> Tuple[Tensor, Tensor]:
    """Selective Stream Gate: 大域平均から求めたチャネル重みでゲートします。"""
    if f.shape[1] != params.channels:
        raise ShapeError(f"ssg: input shape {f.shape} does not match {params.channels} channels")
    descriptor = tensor.pool(f, "avg", "spatial", tape)
    hidden = tensor.pointwise(tensor.conv2d(descriptor, params.conv1, tape), "relu", tape)
    w_s = tensor.pointwise(tensor.conv2d(hidden, params.conv2, tape), "sigmoid", tape)
    return tensor.mul_broadcast(f, w_s, tape), w_s


def pfm_forward(f: Tensor, params: PfmParams, tape: Optional[Tape] = None) -> Tuple[Tensor, Tensor]:
    """Perspective Fusion Module: チャネル方向の平均・最大マップから空間マスクを作ります。"""
    avg_map = tensor.pool(f, "avg", "channel", tape)
    max_map = tensor.pool(f, "max", "channel", tape)
    stacked = tensor.concat_channel(avg_map, max_map, tape)
    w_p = tensor.pointwise(tensor.conv2d(stacked, params.conv7, tape), "sigmoid", tape)
    return tensor.mul_broadcast(f, w_p, tape), w_p


def cdm_forward(
    f: Tensor, params: CdmParams, bn_mode: Mode, tape: Optional[Tape] = None
) -> Tuple[Tensor, Tensor]:
    """Class Discrimination Module: 1x1/3x3/1x1 の畳み込みで要素ごとの重みを作ります。"""
    if f.shape[1] != params.channels:
        raise ShapeError(f"cdm: input shape {f.shape} does not match {params.channels} channels")
    x1 = tensor.pointwise(
        tensor.batchnorm(tensor.conv2d(f, params.conv1, tape), params.bn1, bn_mode, tape), "relu", tape
    )
    x2 = tensor.pointwise(
        tensor.batchnorm(tensor.conv2d(x1, params.conv2, tape), params.bn2, bn_mode, tape), "relu", tape
    )
    w_c = tensor.pointwise(tensor.conv2d(x2, params.conv3, tape), "sigmoid", tape)
    return tensor.mul_broadcast(f, w_c, tape), w_c


def spci_forward(
    f: Tensor,
    params: SpciParams,
    mode: Mode = "eval",
    seed: int = 0,
    tape: Optional[Tape] = None,
    bn_mode: Optional[Mode] = None,
    dropout_mode: Optional[Mode] = None,
) -> Tuple[Tensor, SpciDiagnostics]:
    """SPCI ブロック全体。`bn_mode`/`dropout_mode` は `mode` を個別に上書きします。"""
    if f.shape[1] != params.c_in:
        raise ShapeError(f"spci {params.name}: input shape {f.shape} does not match c_in={params.c_in}")
    bn_mode = bn_mode or mode
    dropout_mode = dropout_mode or mode

    w_s = w_p = w_c = None
    s = f
    if params.ssg_on:
        s, w_s = ssg_forward(f, params.ssg, tape)
    alpha = tensor.conv2d(s, params.transform, tape)
    beta = alpha
    if params.pfm_on:
        beta, w_p = pfm_forward(alpha, params.pfm, tape)
    gamma = beta
    if params.cdm_on:
        gamma, w_c = cdm_forward(beta, params.cdm, bn_mode, tape)
    fused = tensor.add(alpha, beta, gamma, tape)
    out = tensor.dropout(fused, params.dropout, dropout_mode, seed, tape)
    return out, SpciDiagnostics(alpha=alpha, beta=beta, gamma=gamma, w_s=w_s, w_p=w_p, w_c=w_c)


# *****************************************************
# 初期化
# *****************************************************
def uniform_conv(
    rng: np.random.Generator, name: str, c_in: int, c_out: int, kernel: int, precision: Precision = "single"
) -> ConvLayer:
    """重みは U(-√(6/fan_in), √(6/fan_in))、バイアスは 0 の畳み込み層。"""
    bound = math.sqrt(6.0 / (c_in * kernel * kernel))
    layer = ConvLayer.zeros(name, c_in, c_out, kernel, precision)
    layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
    return layer


def init_spci(
    c_in: int,
    c_out: int,
    r: int = DEFAULT_REDUCTION,
    p: float = DEFAULT_DROPOUT,
    seed: int = 0,
    precision: Precision = "single",
    name: str = "spci",
) -> SpciParams:
    """fan-in でスケールした一様分布で重みを初期化します。バイアスは 0 です。"""
    if c_in < 1 or c_out < 1:
        raise ValueError(f"spci channel counts must be >= 1, got c_in={c_in}, c_out={c_out}")
    if r < 1:
        raise ValueError(f"reduction must be >= 1, got {r}")
    rng = np.random.default_rng(seed)
    ssg_mid = ssg_mid_channels(c_in, r)
    cdm_mid = cdm_mid_channels(c_out)
    ssg = SsgParams(
        conv1=uniform_conv(rng, f"{name}.ssg.conv1", c_in, ssg_mid, 1, precision),
        conv2=uniform_conv(rng, f"{name}.ssg.conv2", ssg_mid, c_in, 1, precision),
        reduction=r,
    )
    transform = uniform_conv(rng, f"{name}.transform", c_in, c_out, 1, precision)
    pfm = PfmParams(conv7=uniform_conv(rng, f"{name}.pfm.conv7", 2, 1, 7, precision))
    cdm = CdmParams(
        conv1=uniform_conv(rng, f"{name}.cdm.conv1", c_out, cdm_mid, 1, precision),
        bn1=BatchNormLayer.identity(f"{name}.cdm.bn1", cdm_mid, precision),
        conv2=uniform_conv(rng, f"{name}.cdm.conv2", cdm_mid, cdm_mid, 3, precision),
        bn2=BatchNormLayer.identity(f"{name}.cdm.bn2", cdm_mid, precision),
        conv3=uniform_conv(rng, f"{name}.cdm.conv3", cdm_mid, c_out, 1, precision),
    )
    return SpciParams(transform=transform, ssg=ssg, pfm=pfm, cdm=cdm, dropout=p, name=name)


def identity_transform(name: str, channels: int, precision: Precision = "single") -> ConvLayer:
    """チャネル恒等写像となる 1x1 変換。"""
    layer = ConvLayer.zeros(name, channels, channels, 1, precision)
    layer.weight[:, :, 0, 0] = np.eye(channels)
    return layer
