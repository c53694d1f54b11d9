# Licensed under the MIT License.
"""本番カーネルとコードを共有しない検証用オラクルとコスト計数。

オラクルは倍精度のスカラー ループで書かれており、`spci_tensor` の畳み込みを
呼びません。コストは FLOPs = 2*MACs の規約で数えます。
"""
from __future__ import annotations

import functools
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np

import spci_block as block
import spci_tensor as tensor
from spci_backbone import Backbone
from spci_block import CdmParams, PfmParams, SpciParams, SsgParams
from spci_codec import format_report
from spci_tensor import BatchNormLayer, ConvLayer, ShapeError, Tape, Tensor
from spci_utils import log_to_output

RELATIVE_FLOOR = 1e-8
KINK_MARGIN = 1e-3
FLOPS_CONVENTION = "2*MACs"
STAGE_CONV_CONVENTION = (
    "stage convolutions are counted at output resolution as stride-2 convolutions; "
    "the kernel runs them at full resolution and then subsamples, which is 4x these MACs"
)
REFERENCE_CONTEXT = (
    "whole-detector figures of 3.1M parameters and 8.3 GFLOPs cover the full detector "
    "and are not checkable at module level"
)


class GradCheckError(AssertionError):
    """relu や max の折れ点から離れた検査点が見つかりません。"""

    pass  # pylint: disable=unnecessary-pass


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a-n| / max(|a|, |n|, 1e-8) を要素ごとに返します。"""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), RELATIVE_FLOOR)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> Tuple[float, Tuple[int, ...]]:
    """最大相対誤差とその座標。"""
    errors = relative_error(analytic, numeric)
    if errors.size == 0:
        return 0.0, ()
    index = np.unravel_index(int(np.argmax(errors)), errors.shape)
    return float(errors[index]), tuple(int(i) for i in index)


# *****************************************************
# 畳み込みと式のオラクル
# *****************************************************
def naive_conv_oracle(x: Tensor, layer: ConvLayer) -> Tensor:
    """ゼロパディングの畳み込みを定義どおりの入れ子ループで計算します (倍精度)。"""
    if x.shape[1] != layer.c_in:
        raise ShapeError(
            f"naive_conv_oracle {layer.name}: input shape {x.shape} has {x.shape[1]} channels, "
            f"layer weight {layer.weight.shape} expects {layer.c_in}"
        )
    batch, c_in, height, width = x.shape
    k = layer.kernel
    pad = k // 2
    data = x.data.astype(np.float64).tolist()
    weight = layer.weight.astype(np.float64).tolist()
    bias = [float(b) if layer.use_bias else 0.0 for b in layer.bias]
    out = np.zeros((batch, layer.c_out, height, width), dtype=np.float64)
    for n in range(batch):
        for o in range(layer.c_out):
            for i in range(height):
                for j in range(width):
                    total = bias[o]
                    for c in range(c_in):
                        for u in range(k):
                            row = i + u - pad
                            if not 0 <= row < height:
                                continue
                            for v in range(k):
                                col = j + v - pad
                                if 0 <= col < width:
                                    total += data[n][c][row][col] * weight[o][c][u][v]
                    out[n, o, i, j] = total
    return Tensor(out)


def _conv(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    return naive_conv_oracle(Tensor(np.asarray(x, dtype=np.float64)), layer).data


def _sigmoid(values: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-values))


def _batchnorm_eval(x: np.ndarray, layer: BatchNormLayer) -> np.ndarray:
    def column(values):
        return np.asarray(values, dtype=np.float64)[None, :, None, None]

    return column(layer.gamma) * (x - column(layer.running_mean)) / np.sqrt(
        column(layer.running_var) + layer.eps
    ) + column(layer.beta)


def ssg_oracle(f: np.ndarray, params: SsgParams) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(f, dtype=np.float64)
    descriptor = x.mean(axis=(2, 3), keepdims=True)
    w_s = _sigmoid(_conv(np.maximum(_conv(descriptor, params.conv1), 0.0), params.conv2))
    return x * w_s, w_s


def pfm_oracle(f: np.ndarray, params: PfmParams) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(f, dtype=np.float64)
    stacked = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    w_p = _sigmoid(_conv(stacked, params.conv7))
    return x * w_p, w_p


def cdm_oracle(f: np.ndarray, params: CdmParams) -> Tuple[np.ndarray, np.ndarray]:
    """BN は eval モード (移動統計量) で計算します。"""
    x = np.asarray(f, dtype=np.float64)
    x1 = np.maximum(_batchnorm_eval(_conv(x, params.conv1), params.bn1), 0.0)
    x2 = np.maximum(_batchnorm_eval(_conv(x1, params.conv2), params.bn2), 0.0)
    w_c = _sigmoid(_conv(x2, params.conv3))
    return x * w_c, w_c


def spci_oracle(f: np.ndarray, params: SpciParams) -> np.ndarray:
    """eval モードの SPCI ブロック。dropout は恒等写像です。"""
    s = ssg_oracle(f, params.ssg)[0] if params.ssg_on else np.asarray(f, dtype=np.float64)
    alpha = _conv(s, params.transform)
    beta = pfm_oracle(alpha, params.pfm)[0] if params.pfm_on else alpha
    gamma = cdm_oracle(beta, params.cdm)[0] if params.cdm_on else beta
    return alpha + beta + gamma


# *****************************************************
# 有限差分
# *****************************************************
def finite_diff_grad(fwd: Callable[[], float], params: Sequence[np.ndarray], h: float = 1e-4) -> List[np.ndarray]:
    """中心差分 (f(θ+h) - f(θ-h)) / 2h。配列は一時的にその場で書き換えられ、元の値に戻されます。"""
    if h <= 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    grads = []
    for array in params:
        grad = np.zeros(array.shape, dtype=np.float64)
        flat = array.reshape(-1)
        grad_flat = grad.reshape(-1)
        if not np.shares_memory(flat, array):
            raise ValueError("finite_diff_grad needs contiguous parameter arrays")
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = float(fwd())
            flat[i] = original - h
            lower = float(fwd())
            flat[i] = original
            grad_flat[i] = (upper - lower) / (2.0 * h)
        grads.append(grad)
    return grads


@attrs.define(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: Tuple[int, ...]


@attrs.define(frozen=True)
class GradCheckReport:
    """パラメータごとの最大相対誤差と合否。"""

    entries: Tuple[GradCheckEntry, ...]
    h: float
    tolerance: float
    kink_margin: float
    seed: int

    @property
    def max_rel_error(self) -> float:
        return max((entry.max_rel_error for entry in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda entry: entry.max_rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def text(self) -> str:
        pairs: List[Tuple[str, object]] = [
            ("h", self.h),
            ("tolerance", self.tolerance),
            ("seed", self.seed),
            ("kink_margin", self.kink_margin),
        ]
        for entry in self.entries:
            pairs.append((f"{entry.name}.max_rel_error", entry.max_rel_error))
            pairs.append((f"{entry.name}.worst_index", entry.worst_index or (0,)))
        worst = self.worst
        pairs.append(("max_rel_error", self.max_rel_error))
        pairs.append(("worst", worst.name if worst else "none"))
        pairs.append(("passed", self.passed))
        return format_report(pairs)


def _spci_loss(x: np.ndarray, params: SpciParams) -> float:
    out, _ = block.spci_forward(Tensor(x), params, mode="eval")
    return float(out.data.sum())


def gradcheck_spci(
    channels: int = 8,
    size: int = 6,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    seed: int = 0,
    attempts: int = 50,
    params: Optional[SpciParams] = None,
) -> GradCheckReport:
    """出力総和の損失について、解析勾配と中心差分を全パラメータと入力で比較します。

    relu 入力または max の上位差が KINK_MARGIN 未満の検査点は捨て、次のシードで入力を引き直します。
    """
    base = block.init_spci(channels, channels, seed=seed, precision="double") if params is None else params
    base = base.astype("double")
    for attempt in range(attempts):
        trial_seed = seed + attempt
        x = np.random.default_rng(trial_seed).standard_normal((1, base.c_in, size, size))
        tape = Tape()
        watched = tape.watch(Tensor(x))
        out, _ = block.spci_forward(watched, base, mode="eval", tape=tape)
        margin = tape.kink_margin()
        if margin < KINK_MARGIN:
            log_to_output(f"gradcheck: seed {trial_seed} rejected, kink margin {margin:.3g}")
            continue
        grads = tensor.backward(tape, np.ones(out.shape))

        entries: List[GradCheckEntry] = []
        for layer in block.iter_layers(base, enabled_only=True):
            for field, array in layer.param_items():
                name = f"{layer.name}.{field}"
                (numeric,) = finite_diff_grad(functools.partial(_spci_loss, x, base), [array], h)
                entries.append(GradCheckEntry(name, *max_relative_error(grads.param(name), numeric)))
        x_buffer = np.array(x, copy=True)
        (numeric,) = finite_diff_grad(functools.partial(_spci_loss, x_buffer, base), [x_buffer], h)
        entries.append(GradCheckEntry("input", *max_relative_error(grads.wrt(watched), numeric)))
        return GradCheckReport(tuple(entries), h, tolerance, margin, trial_seed)
    raise GradCheckError(f"no test point with kink margin >= {KINK_MARGIN} in {attempts} attempts from seed {seed}")


# *****************************************************
# コスト計数
# *****************************************************
@attrs.define(frozen=True)
class CostEntry:
    """1 つの演算のパラメータ数、MAC 数、要素ごとの演算数。"""

    name: str
    kind: str
    params: int = 0
    macs: int = 0
    ops: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@attrs.define(frozen=True)
class CostReport:
    """層ごとのコストと合計。合計は走査順によらず部分の和です。"""

    input_shape: Tuple[int, ...]
    entries: Tuple[CostEntry, ...]
    context: Optional[str] = None
    notes: Tuple[Tuple[str, str], ...] = ()

    @property
    def total_params(self) -> int:
        return sum(entry.params for entry in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(entry.macs for entry in self.entries)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def total_ops(self) -> int:
        return sum(entry.ops for entry in self.entries)

    def entry(self, name: str) -> CostEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def text(self) -> str:
        pairs: List[Tuple[str, object]] = [
            ("input_shape", self.input_shape),
            ("flops_convention", FLOPS_CONVENTION),
        ]
        pairs += list(self.notes)
        for entry in self.entries:
            if entry.params:
                pairs.append((f"{entry.name}.params", entry.params))
            if entry.macs:
                pairs.append((f"{entry.name}.macs", entry.macs))
            if entry.ops:
                pairs.append((f"{entry.name}.ops", entry.ops))
        pairs += [
            ("total_params", self.total_params),
            ("total_macs", self.total_macs),
            ("total_flops", self.total_flops),
            ("total_elementwise_ops", self.total_ops),
        ]
        if self.context:
            pairs.append(("reference_context", self.context))
        return format_report(pairs)


def conv_cost(layer: ConvLayer, shape: Sequence[int]) -> CostEntry:
    """C_out*C_in*k^2 (+C_out) 個のパラメータと、出力 1 画素あたり C_out*C_in*k^2 の MAC。"""
    n, c_in, h, w = shape
    if c_in != layer.c_in:
        raise ShapeError(f"conv_cost {layer.name}: input shape {tuple(shape)} does not match c_in={layer.c_in}")
    k2 = layer.kernel * layer.kernel
    params = layer.c_out * layer.c_in * k2 + (layer.c_out if layer.use_bias else 0)
    return CostEntry(layer.name, "conv", params, layer.c_out * layer.c_in * k2 * n * h * w)


class _CostCounter:
    """順伝播と同じ順に層を辿り、CostEntry を集めます。"""

    def __init__(self):
        self.entries: List[CostEntry] = []

    def conv(self, layer: ConvLayer, n: int, h: int, w: int) -> None:
        self.entries.append(conv_cost(layer, (n, layer.c_in, h, w)))

    def batchnorm(self, layer: BatchNormLayer, elements: int) -> None:
        self.entries.append(CostEntry(layer.name, "batchnorm", 4 * layer.channels, 0, elements))

    def elementwise(self, name: str, kind: str, elements: int) -> None:
        self.entries.append(CostEntry(name, kind, 0, 0, elements))

    def spci(self, params: SpciParams, shape: Sequence[int]) -> None:
        n, c_in, h, w = shape
        if c_in != params.c_in:
            raise ShapeError(f"count_cost: input shape {tuple(shape)} does not match c_in={params.c_in}")
        c = params.c_out
        name = params.name
        if params.ssg_on:
            ssg = params.ssg
            mid = ssg.conv1.c_out
            self.elementwise(f"{name}.ssg.pool", "pool", n * c_in)
            self.conv(ssg.conv1, n, 1, 1)
            self.elementwise(f"{name}.ssg.relu", "relu", n * mid)
            self.conv(ssg.conv2, n, 1, 1)
            self.elementwise(f"{name}.ssg.sigmoid", "sigmoid", n * c_in)
            self.elementwise(f"{name}.ssg.mul", "mul", n * c_in * h * w)
        self.conv(params.transform, n, h, w)
        if params.pfm_on:
            self.elementwise(f"{name}.pfm.pool_avg", "pool", n * h * w)
            self.elementwise(f"{name}.pfm.pool_max", "pool", n * h * w)
            self.conv(params.pfm.conv7, n, h, w)
            self.elementwise(f"{name}.pfm.sigmoid", "sigmoid", n * h * w)
            self.elementwise(f"{name}.pfm.mul", "mul", n * c * h * w)
        if params.cdm_on:
            cdm = params.cdm
            mid = cdm.mid_channels
            self.conv(cdm.conv1, n, h, w)
            self.batchnorm(cdm.bn1, n * mid * h * w)
            self.elementwise(f"{name}.cdm.relu1", "relu", n * mid * h * w)
            self.conv(cdm.conv2, n, h, w)
            self.batchnorm(cdm.bn2, n * mid * h * w)
            self.elementwise(f"{name}.cdm.relu2", "relu", n * mid * h * w)
            self.conv(cdm.conv3, n, h, w)
            self.elementwise(f"{name}.cdm.sigmoid", "sigmoid", n * c * h * w)
            self.elementwise(f"{name}.cdm.mul", "mul", n * c * h * w)
        self.elementwise(f"{name}.add", "add", n * c * h * w)
        self.elementwise(f"{name}.dropout", "dropout", n * c * h * w)

    def backbone(self, model: Backbone, batch: int) -> None:
        for stage in model.stages:
            # stride 2 の畳み込みとして出力解像度で数えます
            _, c_out, h, w = model.tap_shape(stage.spec.name, batch)
            self.conv(stage.conv, batch, h, w)
            self.elementwise(f"{stage.spec.name.lower()}.relu", "relu", batch * c_out * h * w)
            if stage.spec.name in model.spci:
                self.spci(model.spci[stage.spec.name], (batch, c_out, h, w))


def count_cost(target: Union[SpciParams, Backbone], shape: Sequence[int]) -> CostReport:
    """SPCI ブロック ([N,C,H,W]) またはバックボーン ([N,C,H,W] または N) のコスト。"""
    counter = _CostCounter()
    if isinstance(target, Backbone):
        batch = shape if isinstance(shape, int) else shape[0]
        input_shape = (batch, *target.input_shape)
        if not isinstance(shape, int) and tuple(shape) != input_shape:
            raise ShapeError(f"count_cost: shape {tuple(shape)} does not match backbone input {input_shape}")
        counter.backbone(target, batch)
        context = REFERENCE_CONTEXT if target.spci else None
        notes = (("stage_conv_convention", STAGE_CONV_CONVENTION),)
    else:
        input_shape = tuple(int(d) for d in shape)
        if len(input_shape) != 4:
            raise ShapeError(f"count_cost: expected [N,C,H,W], got {input_shape}")
        counter.spci(target, input_shape)
        context = REFERENCE_CONTEXT
        notes = ()
    return CostReport(input_shape=input_shape, entries=tuple(counter.entries), context=context, notes=notes)


def cost_delta(baseline: Backbone, inserted: Backbone, batch: int = 1) -> CostEntry:
    """2 つのバックボーンのパラメータ数、MAC 数、要素演算数の差。"""
    before = count_cost(baseline, batch)
    after = count_cost(inserted, batch)
    return CostEntry(
        name="delta",
        kind="delta",
        params=after.total_params - before.total_params,
        macs=after.total_macs - before.total_macs,
        ops=after.total_ops - before.total_ops,
    )


def tap_spci_cost(model: Backbone, batch: int = 1) -> Dict[str, CostReport]:
    """挿入済みの各 SPCI ブロックを、そのタップの形状で数えます。"""
    return {
        name: count_cost(params, model.tap_shape(name, batch))
        for name, params in model.spci.items()
    }
