# Licensed under the MIT License.
"""SPCT テンソル、SPCI 重みマニフェスト、グレースケール画像、テキストレポートの符号化。"""
from __future__ import annotations

import io
import os
import pathlib
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np

import spci_block as block
from spci_block import CdmParams, PfmParams, SpciParams, SsgParams
from spci_tensor import DTYPES, BatchNormLayer, ConvLayer, ShapeError, Tensor, precision_of

MAGIC = "SPCT1"
WIRE_DTYPES = {"single": np.dtype("<f4"), "double": np.dtype("<f8")}
MANIFEST_HEADER_KEYS = ("c_in", "c_out", "r", "c_mid_cdm", "dropout", "flags")

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """ファイルのヘッダーまたはマニフェストの書式が不正です。"""

    pass  # pylint: disable=unnecessary-pass


class TruncatedFileError(FormatError):
    """ヘッダーが示すよりもペイロードが短いファイルです。"""

    pass  # pylint: disable=unnecessary-pass


class ManifestShapeError(ShapeError):
    """テンソルの形状がマニフェストと一致しません。"""

    pass  # pylint: disable=unnecessary-pass


# *****************************************************
# SPCT
# *****************************************************
class SpctWriter:
    """ストリームへの SPCT テンソルの書き込みを管理します。"""

    def __init__(self, writer: BinaryIO):
        self._writer = writer

    def write(self, array: np.ndarray) -> None:
        """4 次元配列をヘッダー行とリトルエンディアンのペイロードとして書き込みます。"""
        if array.ndim != 4:
            raise ShapeError(f"SPCT payload must be rank 4, got shape {array.shape}")
        precision = precision_of(array)
        header = " ".join([MAGIC, *(str(d) for d in array.shape), precision])
        self._writer.write(f"{header}\n".encode("ascii"))
        self._writer.write(np.ascontiguousarray(array, dtype=WIRE_DTYPES[precision]).tobytes())


class SpctReader:
    """ストリームからの SPCT テンソルの読み取りを管理します。"""

    def __init__(self, reader: BinaryIO, source: str = "<stream>"):
        self._reader = reader
        self._source = source

    def read(self) -> np.ndarray:
        """ヘッダーを検証し、ペイロードを読み取ります。"""
        shape, precision = self._read_header()
        wire = WIRE_DTYPES[precision]
        expected = int(np.prod(shape)) * wire.itemsize
        payload = self._reader.read(expected)
        if len(payload) < expected:
            raise TruncatedFileError(
                f"{self._source}: payload has {len(payload)} bytes, header promises {expected}"
            )
        if self._reader.read(1):
            raise FormatError(f"{self._source}: trailing bytes after {expected}-byte payload")
        return np.frombuffer(payload, dtype=wire).astype(DTYPES[precision]).reshape(shape)

    def _read_header(self) -> Tuple[Tuple[int, ...], str]:
        line = self._reader.readline(256)
        if not line.endswith(b"\n"):
            raise FormatError(f"{self._source}: missing SPCT header line")
        try:
            fields = line.decode("ascii").split()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self._source}: SPCT header is not ASCII") from exc
        if len(fields) != 6 or fields[0] != MAGIC:
            raise FormatError(f"{self._source}: malformed SPCT header {line!r}")
        try:
            shape = tuple(int(d) for d in fields[1:5])
        except ValueError as exc:
            raise FormatError(f"{self._source}: non-integer dimension in header {line!r}") from exc
        if min(shape) < 1:
            raise FormatError(f"{self._source}: dimensions must be positive, got {shape}")
        if fields[5] not in WIRE_DTYPES:
            raise FormatError(f"{self._source}: unknown precision {fields[5]!r}")
        return shape, fields[5]


def encode_array(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    SpctWriter(buffer).write(array)
    return buffer.getvalue()


def decode_array(content: bytes, source: str = "<bytes>") -> np.ndarray:
    return SpctReader(io.BytesIO(content), source).read()


def save_tensor(x: Tensor, path: PathLike) -> None:
    pathlib.Path(path).write_bytes(encode_array(x.data))


def load_tensor(path: PathLike) -> Tensor:
    with open(path, "rb") as stream:
        return Tensor(SpctReader(stream, os.fspath(path)).read())


# *****************************************************
# マニフェスト
# *****************************************************
def _shape_text(shape: Sequence[int]) -> str:
    return "x".join(str(d) for d in shape)


def _parse_shape(text: str, where: str) -> Tuple[int, ...]:
    try:
        shape = tuple(int(d) for d in text.split("x"))
    except ValueError as exc:
        raise FormatError(f"{where}: malformed shape {text!r}") from exc
    if not shape or min(shape) < 1:
        raise FormatError(f"{where}: malformed shape {text!r}")
    return shape


def _rank4_shape(shape: Sequence[int]) -> Tuple[int, ...]:
    return tuple(shape) + (1,) * (4 - len(shape))


def _as_rank4(array: np.ndarray) -> np.ndarray:
    return array.reshape(_rank4_shape(array.shape))


def _relative(layer_name: str, block_name: str) -> str:
    prefix = f"{block_name}."
    return layer_name[len(prefix) :] if layer_name.startswith(prefix) else layer_name


def _flags_text(params: SpciParams) -> str:
    return " ".join(f"{flag}={int(getattr(params, f'{flag}_on'))}" for flag in ("ssg", "pfm", "cdm"))


def save_spci(params: SpciParams, path: PathLike) -> pathlib.Path:
    """マニフェストとパラメータごとの SPCT ファイルを書き出します。"""
    manifest = pathlib.Path(path)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    cdm_mid = params.cdm.mid_channels if params.cdm is not None else block.cdm_mid_channels(params.c_out)
    reduction = params.ssg.reduction if params.ssg is not None else block.DEFAULT_REDUCTION
    lines = [
        "# spci weight manifest",
        f"c_in {params.c_in}",
        f"c_out {params.c_out}",
        f"r {reduction}",
        f"c_mid_cdm {cdm_mid}",
        f"dropout {params.dropout!r}",
        f"flags {_flags_text(params)}",
    ]
    for layer in block.iter_layers(params):
        items = list(layer.param_items())
        if isinstance(layer, BatchNormLayer):
            items += list(layer.buffer_items())
        for field, array in items:
            name = f"{_relative(layer.name, params.name)}.{field}"
            file_name = f"{manifest.stem}.{name}.spct"
            (manifest.parent / file_name).write_bytes(encode_array(_as_rank4(array)))
            lines.append(f"{name} {_shape_text(array.shape)} {file_name}")
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


@attrs.define
class _ManifestEntry:
    shape: Tuple[int, ...]
    path: pathlib.Path


def _parse_flags(text: str, where: str) -> Dict[str, bool]:
    flags = {"ssg": True, "pfm": True, "cdm": True}
    for item in text.split():
        key, _, value = item.partition("=")
        if key not in flags or value not in ("0", "1"):
            raise FormatError(f"{where}: malformed flag {item!r}")
        flags[key] = value == "1"
    return flags


def _read_manifest(path: pathlib.Path) -> Tuple[Dict[str, str], Dict[str, _ManifestEntry]]:
    header: Dict[str, str] = {}
    entries: Dict[str, _ManifestEntry] = {}
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: manifest is not UTF-8 text: {exc}") from exc
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{path}:{number}"
        key, _, rest = line.partition(" ")
        if key in MANIFEST_HEADER_KEYS:
            if key in header:
                raise FormatError(f"{where}: duplicate header line {key!r}")
            header[key] = rest.strip()
            continue
        fields = line.split()
        if len(fields) != 3:
            raise FormatError(f"{where}: expected 'layer.name shape path', got {line!r}")
        if fields[0] in entries:
            raise FormatError(f"{where}: duplicate parameter {fields[0]!r}")
        entries[fields[0]] = _ManifestEntry(_parse_shape(fields[1], where), path.parent / fields[2])
    missing = [key for key in MANIFEST_HEADER_KEYS if key not in header]
    if missing:
        raise FormatError(f"{path}: missing header lines {missing}")
    return header, entries


def _header_int(header: Dict[str, str], key: str, path: pathlib.Path) -> int:
    try:
        value = int(header[key])
    except ValueError as exc:
        raise FormatError(f"{path}: header {key} must be an integer, got {header[key]!r}") from exc
    if value < 1:
        raise FormatError(f"{path}: header {key} must be positive, got {value}")
    return value


class _ManifestLoader:
    """ヘッダーから期待形状を求め、SPCT ファイルを検証しながら読み込みます。"""

    def __init__(self, path: pathlib.Path, entries: Dict[str, _ManifestEntry], block_name: str):
        self._path = path
        self._entries = entries
        self._block_name = block_name
        self._used: List[str] = []

    def has(self, name: str) -> bool:
        return f"{name}.weight" in self._entries or f"{name}.gamma" in self._entries

    def array(self, name: str, shape: Tuple[int, ...]) -> Optional[np.ndarray]:
        entry = self._entries.get(name)
        if entry is None:
            return None
        self._used.append(name)
        if entry.shape != shape:
            raise ManifestShapeError(
                f"{self._path}: {name} is listed as {_shape_text(entry.shape)}, "
                f"header implies {_shape_text(shape)}"
            )
        with open(entry.path, "rb") as stream:
            array = SpctReader(stream, os.fspath(entry.path)).read()
        if array.shape != _rank4_shape(shape):
            raise ManifestShapeError(
                f"{entry.path}: file holds {_shape_text(array.shape)}, manifest lists {_shape_text(shape)}"
            )
        return array.reshape(shape)

    def required(self, name: str, shape: Tuple[int, ...]) -> np.ndarray:
        array = self.array(name, shape)
        if array is None:
            raise FormatError(f"{self._path}: missing parameter {name!r}")
        return array

    def conv(self, name: str, c_in: int, c_out: int, kernel: int) -> ConvLayer:
        weight = self.required(f"{name}.weight", (c_out, c_in, kernel, kernel))
        bias = self.array(f"{name}.bias", (c_out,))
        return ConvLayer(
            name=f"{self._block_name}.{name}",
            weight=weight,
            bias=np.zeros(c_out, dtype=weight.dtype) if bias is None else bias,
            use_bias=bias is not None,
        )

    def batchnorm(self, name: str, channels: int) -> BatchNormLayer:
        arrays = {
            field: self.required(f"{name}.{field}", (channels,))
            for field in ("gamma", "beta", "running_mean", "running_var")
        }
        if not np.all(arrays["running_var"] > 0):
            raise FormatError(f"{self._path}: {name}.running_var entries must be strictly positive")
        return BatchNormLayer(name=f"{self._block_name}.{name}", **arrays)

    def check_all_used(self) -> None:
        unknown = sorted(set(self._entries) - set(self._used))
        if unknown:
            raise FormatError(f"{self._path}: unknown or unused parameters {unknown}")


def load_spci(path: PathLike, name: str = "spci") -> SpciParams:
    """マニフェストから SpciParams を読み込みます。"""
    manifest = pathlib.Path(path)
    header, entries = _read_manifest(manifest)
    c_in = _header_int(header, "c_in", manifest)
    c_out = _header_int(header, "c_out", manifest)
    reduction = _header_int(header, "r", manifest)
    cdm_mid = _header_int(header, "c_mid_cdm", manifest)
    try:
        dropout = float(header["dropout"])
    except ValueError as exc:
        raise FormatError(f"{manifest}: header dropout must be a number") from exc
    if not 0 <= dropout < 1:
        raise FormatError(f"{manifest}: header dropout must be in [0,1), got {dropout}")
    flags = _parse_flags(header["flags"], f"{manifest}: flags")

    loader = _ManifestLoader(manifest, entries, name)
    transform = loader.conv("transform", c_in, c_out, 1)
    ssg = pfm = cdm = None
    if flags["ssg"] or loader.has("ssg.conv1"):
        ssg_mid = block.ssg_mid_channels(c_in, reduction)
        ssg = SsgParams(
            conv1=loader.conv("ssg.conv1", c_in, ssg_mid, 1),
            conv2=loader.conv("ssg.conv2", ssg_mid, c_in, 1),
            reduction=reduction,
        )
    if flags["pfm"] or loader.has("pfm.conv7"):
        pfm = PfmParams(conv7=loader.conv("pfm.conv7", 2, 1, 7))
    if flags["cdm"] or loader.has("cdm.conv1"):
        cdm = CdmParams(
            conv1=loader.conv("cdm.conv1", c_out, cdm_mid, 1),
            bn1=loader.batchnorm("cdm.bn1", cdm_mid),
            conv2=loader.conv("cdm.conv2", cdm_mid, cdm_mid, 3),
            bn2=loader.batchnorm("cdm.bn2", cdm_mid),
            conv3=loader.conv("cdm.conv3", cdm_mid, c_out, 1),
        )
    loader.check_all_used()
    return SpciParams(
        transform=transform,
        ssg=ssg,
        pfm=pfm,
        cdm=cdm,
        dropout=dropout,
        ssg_on=flags["ssg"],
        pfm_on=flags["pfm"],
        cdm_on=flags["cdm"],
        name=name,
    )


# *****************************************************
# グレースケール画像
# *****************************************************
@attrs.define(frozen=True, eq=False)
class Heatmap:
    """注意マップを 8 ビットのグレースケール画像にしたもの。"""

    source: str
    name: str
    raster: np.ndarray

    @classmethod
    def from_attention(cls, source: str, name: str, values: np.ndarray) -> Heatmap:
        """(0,1) の値を round(v*255) で [0,255] に写します。"""
        if values.ndim != 2:
            raise ShapeError(f"heatmap {name}: expected a 2-D map, got shape {values.shape}")
        raster = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
        return cls(source=source, name=name, raster=raster)

    def encode(self) -> bytes:
        height, width = self.raster.shape
        return f"P5\n{width} {height}\n255\n".encode("ascii") + self.raster.tobytes()

    def save(self, directory: PathLike) -> pathlib.Path:
        target = pathlib.Path(directory) / f"{self.name}.pgm"
        target.write_bytes(self.encode())
        return target


# *****************************************************
# テキストレポート
# *****************************************************
def format_value(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    if isinstance(value, (tuple, list)):
        return "x".join(format_value(v) for v in value)
    return str(value)


def format_report(pairs: Iterable[Tuple[str, object]]) -> str:
    """1 行に 1 つの `name value` を並べます。"""
    return "".join(f"{name} {format_value(value)}\n" for name, value in pairs)
