# Licensed under the MIT License.
"""NCHW テンソルエンジン。

各プリミティブは順伝播を計算し、テープが渡された場合は逆伝播に必要な
GradRecord を 1 件だけ追記します。`backward` はテープを逆順に消費します。

畳み込みの総和は `numpy.einsum` の縮約順に従います。同じ numpy ビルドでは
結果はビット単位で再現されます。
"""
from __future__ import annotations

import itertools
from typing import Any, Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import attrs
import numpy as np

Precision = Literal["single", "double"]
Mode = Literal["train", "eval"]

DTYPES: Dict[str, type] = {"single": np.float32, "double": np.float64}
KERNEL_SIZES = (1, 3, 7)

_TENSOR_IDS = itertools.count()


class ShapeError(ValueError):
    """入力の形状が演算の要求と一致しません。"""

    pass  # pylint: disable=unnecessary-pass


class TapeStateError(RuntimeError):
    """テープは既に逆伝播で消費されています。"""

    pass  # pylint: disable=unnecessary-pass


def precision_of(array: np.ndarray) -> Precision:
    """配列の dtype に対応する精度名を返します。"""
    return "double" if array.dtype == np.float64 else "single"


def _freeze(data: Any) -> np.ndarray:
    array = np.array(data, copy=True)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float32)
    if array.ndim != 4:
        raise ShapeError(f"tensor must be rank 4 [N,C,H,W], got shape {array.shape}")
    if min(array.shape) < 1:
        raise ShapeError(f"tensor dimensions must be positive, got shape {array.shape}")
    array.setflags(write=False)
    return array


@attrs.define(frozen=True, eq=False)
class Tensor:
    """不変の NCHW 値配列。"""

    data: np.ndarray = attrs.field(converter=_freeze)
    uid: int = attrs.field(init=False, factory=lambda: next(_TENSOR_IDS))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def precision(self) -> Precision:
        return precision_of(self.data)

    def astype(self, precision: Precision) -> Tensor:
        return Tensor(self.data.astype(DTYPES[precision]))

    def numpy(self) -> np.ndarray:
        """書き込み可能なコピーを返します。"""
        return np.array(self.data, copy=True)

    @classmethod
    def zeros(cls, shape: Sequence[int], precision: Precision = "single") -> Tensor:
        return cls(np.zeros(tuple(shape), dtype=DTYPES[precision]))

    @classmethod
    def full(cls, shape: Sequence[int], value: float, precision: Precision = "single") -> Tensor:
        return cls(np.full(tuple(shape), value, dtype=DTYPES[precision]))


@attrs.define(eq=False)
class ConvLayer:
    """stride 1、same パディングの畳み込み層。"""

    name: str
    weight: np.ndarray = attrs.field()
    bias: np.ndarray = attrs.field()
    use_bias: bool = True

    @weight.validator
    def _check_weight(self, _attribute, value):
        if value.ndim != 4 or value.shape[2] != value.shape[3]:
            raise ShapeError(f"{self.name}: weight must be [C_out,C_in,k,k], got {value.shape}")
        if value.shape[2] not in KERNEL_SIZES:
            raise ShapeError(f"{self.name}: kernel size must be one of {KERNEL_SIZES}, got {value.shape[2]}")

    @bias.validator
    def _check_bias(self, _attribute, value):
        if value.shape != (self.weight.shape[0],):
            raise ShapeError(f"{self.name}: bias must be [{self.weight.shape[0]}], got {value.shape}")

    @property
    def c_out(self) -> int:
        return int(self.weight.shape[0])

    @property
    def c_in(self) -> int:
        return int(self.weight.shape[1])

    @property
    def kernel(self) -> int:
        return int(self.weight.shape[2])

    @classmethod
    def zeros(
        cls, name: str, c_in: int, c_out: int, kernel: int, precision: Precision = "single"
    ) -> ConvLayer:
        dtype = DTYPES[precision]
        return cls(
            name=name,
            weight=np.zeros((c_out, c_in, kernel, kernel), dtype=dtype),
            bias=np.zeros(c_out, dtype=dtype),
        )

    def param_items(self) -> Iterator[Tuple[str, np.ndarray]]:
        """学習対象のパラメータ配列を (フィールド名, 配列) で列挙します。"""
        yield "weight", self.weight
        if self.use_bias:
            yield "bias", self.bias

    def astype(self, precision: Precision) -> ConvLayer:
        dtype = DTYPES[precision]
        return attrs.evolve(self, weight=self.weight.astype(dtype), bias=self.bias.astype(dtype))


@attrs.define(eq=False)
class BatchNormLayer:
    """チャネルごとのアフィン正規化と移動統計量。"""

    name: str
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray = attrs.field()
    eps: float = 1e-5
    momentum: float = 0.1

    @running_var.validator
    def _check_running_var(self, _attribute, value):
        if not np.all(value > 0):
            raise ValueError(f"{self.name}: running_var entries must be strictly positive")
        for field in ("gamma", "beta", "running_mean"):
            if getattr(self, field).shape != value.shape:
                raise ShapeError(
                    f"{self.name}: {field} shape {getattr(self, field).shape} != {value.shape}"
                )

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    @classmethod
    def identity(cls, name: str, channels: int, precision: Precision = "single") -> BatchNormLayer:
        dtype = DTYPES[precision]
        return cls(
            name=name,
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def param_items(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffer_items(self) -> Iterator[Tuple[str, np.ndarray]]:
        """学習されない移動統計量を列挙します。"""
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def astype(self, precision: Precision) -> BatchNormLayer:
        dtype = DTYPES[precision]
        return attrs.evolve(
            self,
            gamma=self.gamma.astype(dtype),
            beta=self.beta.astype(dtype),
            running_mean=self.running_mean.astype(dtype),
            running_var=self.running_var.astype(dtype),
        )


Layer = Union[ConvLayer, BatchNormLayer]


@attrs.define(frozen=True, eq=False)
class GradRecord:
    """1 回の順伝播演算に対する逆伝播用の記録。"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    layer: Optional[Layer] = None
    saved: Dict[str, Any] = attrs.field(factory=dict)


@attrs.define(eq=False)
class Tape:
    """1 回の順伝播で追記される GradRecord の列。"""

    records: List[GradRecord] = attrs.field(factory=list)
    watched: Optional[Tensor] = None
    consumed: bool = False

    def watch(self, x: Tensor) -> Tensor:
        """勾配を求める元の入力を登録します。"""
        self.ensure_open()
        self.watched = x
        return x

    def record(self, record: GradRecord) -> None:
        self.ensure_open()
        self.records.append(record)

    def kink_margin(self) -> float:
        """relu 入力の最小 |t| と max プーリングの最小上位差のうち小さい方。"""
        margin = float("inf")
        for rec in self.records:
            if "kink" in rec.saved:
                margin = min(margin, float(rec.saved["kink"]))
        return margin

    def ensure_open(self) -> None:
        if self.consumed:
            raise TapeStateError("tape was already consumed by backward; run a new forward pass")


def _record(tape: Optional[Tape], op: str, inputs: Tuple[Tensor, ...], output: Tensor, **kwargs) -> Tensor:
    if tape is not None:
        tape.record(GradRecord(op=op, inputs=inputs, output=output, **kwargs))
    return output


def _same_shape(op: str, *tensors: Tensor) -> None:
    shapes = [t.shape for t in tensors]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"{op}: shapes must match, got {' vs '.join(str(s) for s in shapes)}")


# *****************************************************
# 畳み込み
# *****************************************************
def _windows(x: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # [N, C, H, W, k, k]
    return np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))


def _same_conv(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    return np.einsum("nchwuv,ocuv->nohw", _windows(x, weight.shape[-1]), weight, optimize=True)


def conv2d(x: Tensor, layer: ConvLayer, tape: Optional[Tape] = None) -> Tensor:
    """stride 1、ゼロパディング ⌊k/2⌋ の 2 次元畳み込み。"""
    if x.shape[1] != layer.c_in:
        raise ShapeError(
            f"conv2d {layer.name}: input shape {x.shape} has {x.shape[1]} channels, "
            f"layer weight {layer.weight.shape} expects {layer.c_in}"
        )
    out = _same_conv(x.data, layer.weight)
    if layer.use_bias:
        out = out + layer.bias[None, :, None, None]
    return _record(tape, "conv2d", (x,), Tensor(out), layer=layer)


def _conv2d_backward(rec: GradRecord, grad: np.ndarray):
    x = rec.inputs[0].data
    layer: ConvLayer = rec.layer
    grad_weight = np.einsum("nchwuv,nohw->ocuv", _windows(x, layer.kernel), grad, optimize=True)
    flipped = np.flip(layer.weight, axis=(2, 3)).transpose(1, 0, 2, 3)
    grad_x = _same_conv(grad, flipped)
    params = {"weight": grad_weight}
    if layer.use_bias:
        params["bias"] = grad.sum(axis=(0, 2, 3))
    return (grad_x,), params


def subsample(x: Tensor, factor: int = 2, tape: Optional[Tape] = None) -> Tensor:
    """行と列を `factor` 個おきに取り出します (先頭はインデックス 0)。"""
    if factor < 1:
        raise ValueError(f"subsample factor must be positive, got {factor}")
    out = Tensor(x.data[:, :, ::factor, ::factor])
    return _record(tape, "subsample", (x,), out, saved={"factor": factor})


def _subsample_backward(rec: GradRecord, grad: np.ndarray):
    factor = rec.saved["factor"]
    grad_x = np.zeros_like(rec.inputs[0].data, dtype=grad.dtype)
    grad_x[:, :, ::factor, ::factor] = grad
    return (grad_x,), {}


# *****************************************************
# プーリング
# *****************************************************
_POOL_AXES = {"spatial": (2, 3), "channel": (1,)}


def _top_two_gap(values: np.ndarray) -> float:
    if values.shape[1] < 2:
        return float("inf")
    ordered = np.sort(values, axis=1)
    return float(np.min(ordered[:, -1] - ordered[:, -2]))


def pool(
    x: Tensor,
    mode: Literal["avg", "max"],
    axis: Literal["spatial", "channel"],
    tape: Optional[Tape] = None,
) -> Tensor:
    """空間軸 ([N,C,1,1]) またはチャネル軸 ([N,1,H,W]) の大域プーリング。"""
    if axis not in _POOL_AXES:
        raise ValueError(f"unknown pool axis {axis!r}")
    data = x.data
    saved: Dict[str, Any] = {"mode": mode, "axis": axis}
    if mode == "avg":
        out = data.mean(axis=_POOL_AXES[axis], keepdims=True)
    elif mode == "max":
        n, c, h, w = x.shape
        if axis == "spatial":
            flat = data.reshape(n, c, h * w)
            index = np.argmax(flat, axis=2)
            out = np.take_along_axis(flat, index[..., None], axis=2).reshape(n, c, 1, 1)
            saved["kink"] = _top_two_gap(flat.transpose(0, 2, 1))
        else:
            index = np.argmax(data, axis=1)
            out = np.take_along_axis(data, index[:, None], axis=1)
            saved["kink"] = _top_two_gap(data)
        saved["index"] = index
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _record(tape, "pool", (x,), Tensor(out), saved=saved)


def _pool_backward(rec: GradRecord, grad: np.ndarray):
    x = rec.inputs[0].data
    n, c, h, w = x.shape
    mode, axis = rec.saved["mode"], rec.saved["axis"]
    if mode == "avg":
        count = h * w if axis == "spatial" else c
        return (np.broadcast_to(grad / count, x.shape).astype(grad.dtype),), {}
    index = rec.saved["index"]
    if axis == "spatial":
        grad_x = np.zeros((n, c, h * w), dtype=grad.dtype)
        np.put_along_axis(grad_x, index[..., None], grad.reshape(n, c, 1), axis=2)
        return (grad_x.reshape(n, c, h, w),), {}
    grad_x = np.zeros(x.shape, dtype=grad.dtype)
    np.put_along_axis(grad_x, index[:, None], grad, axis=1)
    return (grad_x,), {}


# *****************************************************
# 要素ごとの演算
# *****************************************************
def _sigmoid(values: np.ndarray) -> np.ndarray:
    decay = np.exp(-np.abs(values))
    out = np.where(values >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay)).astype(values.dtype)
    # 飽和しても開区間 (0,1) に収める
    info = np.finfo(values.dtype)
    return np.clip(out, info.tiny, np.nextafter(values.dtype.type(1), values.dtype.type(0)))


def pointwise(x: Tensor, fn: Literal["relu", "sigmoid"], tape: Optional[Tape] = None) -> Tensor:
    """要素ごとの relu または sigmoid。"""
    saved: Dict[str, Any] = {"fn": fn}
    if fn == "relu":
        out = np.maximum(x.data, x.data.dtype.type(0))
        saved["kink"] = float(np.min(np.abs(x.data)))
    elif fn == "sigmoid":
        out = _sigmoid(x.data)
    else:
        raise ValueError(f"unknown pointwise function {fn!r}")
    return _record(tape, "pointwise", (x,), Tensor(out), saved=saved)


def _pointwise_backward(rec: GradRecord, grad: np.ndarray):
    if rec.saved["fn"] == "relu":
        # relu'(0) = 0
        return (grad * (rec.inputs[0].data > 0),), {}
    s = rec.output.data
    return (grad * s * (1 - s),), {}


def batchnorm(x: Tensor, layer: BatchNormLayer, mode: Mode, tape: Optional[Tape] = None) -> Tensor:
    """チャネルごとの正規化とアフィン変換。train では移動統計量を更新します。"""
    n, c, h, w = x.shape
    if c != layer.channels:
        raise ShapeError(
            f"batchnorm {layer.name}: input shape {x.shape} has {c} channels, layer has {layer.channels}"
        )
    data = x.data
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise ShapeError(f"batchnorm {layer.name}: train mode needs N*H*W >= 2, got shape {x.shape}")
        mean = data.mean(axis=(0, 2, 3))
        var = data.var(axis=(0, 2, 3))
        layer.running_mean = (
            (1 - layer.momentum) * layer.running_mean + layer.momentum * mean
        ).astype(layer.running_mean.dtype)
        layer.running_var = (
            (1 - layer.momentum) * layer.running_var + layer.momentum * var * count / (count - 1)
        ).astype(layer.running_var.dtype)
    elif mode == "eval":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    x_hat = (data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = layer.gamma[None, :, None, None] * x_hat + layer.beta[None, :, None, None]
    saved = {"mode": mode, "x_hat": x_hat, "inv_std": inv_std}
    return _record(tape, "batchnorm", (x,), Tensor(out.astype(data.dtype)), layer=layer, saved=saved)


def _batchnorm_backward(rec: GradRecord, grad: np.ndarray):
    layer: BatchNormLayer = rec.layer
    x_hat, inv_std = rec.saved["x_hat"], rec.saved["inv_std"]
    params = {"gamma": (grad * x_hat).sum(axis=(0, 2, 3)), "beta": grad.sum(axis=(0, 2, 3))}
    grad_hat = grad * layer.gamma[None, :, None, None]
    scale = inv_std[None, :, None, None]
    if rec.saved["mode"] == "eval":
        return (grad_hat * scale,), params
    count = grad.shape[0] * grad.shape[2] * grad.shape[3]
    grad_x = (scale / count) * (
        count * grad_hat
        - grad_hat.sum(axis=(0, 2, 3), keepdims=True)
        - x_hat * (grad_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return (grad_x,), params


def concat_channel(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """チャネル方向の連結。a のチャネルが先に並びます。"""
    (na, ca, ha, wa), (nb, _, hb, wb) = a.shape, b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channel: batch/spatial dims differ, {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return _record(tape, "concat_channel", (a, b), out, saved={"split": ca})


def _concat_backward(rec: GradRecord, grad: np.ndarray):
    split = rec.saved["split"]
    return (grad[:, :split], grad[:, split:]), {}


def mul_broadcast(x: Tensor, w: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """w を [N,C,1,1]、[N,1,H,W] または [N,C,H,W] として x に掛けます。"""
    n, c, h, wd = x.shape
    if w.shape not in ((n, c, 1, 1), (n, 1, h, wd), (n, c, h, wd)):
        raise ShapeError(f"mul_broadcast: weight shape {w.shape} does not broadcast to {x.shape}")
    return _record(tape, "mul_broadcast", (x, w), Tensor(x.data * w.data))


def _mul_backward(rec: GradRecord, grad: np.ndarray):
    x, w = rec.inputs
    axes = tuple(i for i in range(4) if w.shape[i] == 1 and x.shape[i] != 1)
    grad_w = (grad * x.data).sum(axis=axes, keepdims=True) if axes else grad * x.data
    return (grad * w.data, grad_w), {}


def add(a: Tensor, b: Tensor, c: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """3 項の要素ごとの和。"""
    _same_shape("add", a, b, c)
    return _record(tape, "add", (a, b, c), Tensor(a.data + b.data + c.data))


def _add_backward(_rec: GradRecord, grad: np.ndarray):
    return (grad, grad, grad), {}


def dropout(x: Tensor, p: float, mode: Mode, seed: int, tape: Optional[Tape] = None) -> Tensor:
    """逆ドロップアウト。eval では恒等写像です。"""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0,1), got {p}")
    if mode == "eval":
        return _record(tape, "dropout", (x,), Tensor(x.data), saved={"scale": None})
    keep = np.random.default_rng(seed).random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.data.dtype)
    return _record(tape, "dropout", (x,), Tensor(x.data * scale), saved={"scale": scale})


def _dropout_backward(rec: GradRecord, grad: np.ndarray):
    scale = rec.saved["scale"]
    return (grad if scale is None else grad * scale,), {}


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tuple[float, Tensor]:
    """[N,K,1,1] のロジットに対する平均交差エントロピーとその勾配。"""
    n, k = logits.shape[:2]
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[2:] != (1, 1) or labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.reshape(n, k).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_prob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_prob[np.arange(n), labels].mean())
    grad = np.exp(log_prob)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, Tensor(grad.reshape(n, k, 1, 1).astype(logits.data.dtype))


_BACKWARD: Dict[str, Callable[[GradRecord, np.ndarray], Tuple[tuple, Dict[str, np.ndarray]]]] = {
    "conv2d": _conv2d_backward,
    "subsample": _subsample_backward,
    "pool": _pool_backward,
    "pointwise": _pointwise_backward,
    "batchnorm": _batchnorm_backward,
    "concat_channel": _concat_backward,
    "mul_broadcast": _mul_backward,
    "add": _add_backward,
    "dropout": _dropout_backward,
}


# *****************************************************
# 逆伝播
# *****************************************************
@attrs.define(eq=False)
class Gradients:
    """backward の結果。入力は tensor で、パラメータは `<層名>.<フィールド>` で引きます。"""

    inputs: Dict[int, np.ndarray] = attrs.field(factory=dict)
    params: Dict[str, np.ndarray] = attrs.field(factory=dict)

    def wrt(self, x: Tensor) -> np.ndarray:
        return self.inputs.get(x.uid, np.zeros_like(x.data))

    def param(self, name: str) -> np.ndarray:
        return self.params[name]


def _accumulate(table: Dict[Any, np.ndarray], key: Any, value: np.ndarray) -> None:
    if key in table:
        table[key] = table[key] + value
    else:
        table[key] = np.array(value, copy=True)


def backward(tape: Tape, seed_grad: Union[Tensor, np.ndarray], output: Optional[Tensor] = None) -> Gradients:
    """テープを逆順に消費し、パラメータと元の入力の勾配を返します。

    `output` を省略すると最後に記録された出力から逆伝播します。
    """
    tape.ensure_open()
    if output is None:
        if tape.records:
            output = tape.records[-1].output
        elif tape.watched is not None:
            output = tape.watched
        else:
            raise TapeStateError("tape is empty: nothing was recorded or watched")
    seed = seed_grad.data if isinstance(seed_grad, Tensor) else np.asarray(seed_grad)
    if seed.shape != output.shape:
        raise ShapeError(f"backward: seed_grad shape {seed.shape} != output shape {output.shape}")

    result = Gradients()
    pending: Dict[int, np.ndarray] = {output.uid: np.array(seed, copy=True)}
    for rec in reversed(tape.records):
        grad = pending.pop(rec.output.uid, None)
        if grad is None:
            continue
        input_grads, param_grads = _BACKWARD[rec.op](rec, grad)
        for tensor, grad_in in zip(rec.inputs, input_grads):
            if grad_in is not None:
                _accumulate(pending, tensor.uid, grad_in)
        for field, grad_param in param_grads.items():
            _accumulate(result.params, f"{rec.layer.name}.{field}", grad_param)
    tape.consumed = True
    result.inputs = pending
    return result
