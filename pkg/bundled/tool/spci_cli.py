# Licensed under the MIT License.
"""SPCI のコマンドライン インターフェイス。

終了コード: 0 成功、1 検査失敗または学習の発散、2 設定エラー、
3 入出力またはファイル形式のエラー、4 形状エラー。
"""
from __future__ import annotations

import argparse
import json
import math
import os
import pathlib
import sys
import traceback
from typing import Callable, Dict, List, Optional, Sequence, Tuple


# **********************************************************
# バンドルされたライブラリをインポートする前に、sys.path を更新します。
# **********************************************************
def update_sys_path(path_to_add: str, strategy: str) -> None:
    """Add given path to `sys.path`."""
    if path_to_add not in sys.path and os.path.isdir(path_to_add):
        if strategy == "useBundled":
            sys.path.insert(0, path_to_add)
        elif strategy == "fromEnvironment":
            sys.path.append(path_to_add)


# numpy、attrs、cattrs などのバンドル ライブラリをインポートできることを確認します。
update_sys_path(
    os.fspath(pathlib.Path(__file__).parent.parent / "libs"),
    os.getenv("SPCI_IMPORT_STRATEGY", "useBundled"),
)

# **********************************************************
# CLI に必要なインポートはこれより下になります。
# **********************************************************
# pylint: disable=wrong-import-position,import-error
import attrs
import numpy as np

import spci_backbone as backbone_mod
import spci_block as block
import spci_codec as codec
import spci_settings as settings
import spci_tensor as tensor
import spci_verify as verify
from spci_backbone import Backbone
from spci_settings import BackboneConfig, ConfigError, RunConfig
from spci_tensor import ShapeError, Tensor
from spci_utils import configure_logging, derive_seed, log_always, log_error, log_to_output, log_warning

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SHAPE = 4

SYNTHETIC_INPUTS = ("zeros", "ones", "checkerboard", "noise", "ramp")
DEFAULT_INPUT = "noise"
DIVERGENCE_FACTOR = 10.0


class TrainingDivergedError(RuntimeError):
    """学習損失が初期値の DIVERGENCE_FACTOR 倍を超えたか、有限でなくなりました。"""

    def __init__(self, step: int, loss: float, initial: float, losses: List[float]):
        super().__init__(f"training diverged at step {step}: loss {loss:.6g} vs initial {initial:.6g}")
        self.step = step
        self.loss = loss
        self.initial = initial
        self.losses = losses


class CheckFailedError(AssertionError):
    """勾配検査が許容誤差を超えました。"""

    def __init__(self, report: str):
        super().__init__("gradient check exceeded tolerance")
        self.report = report


# *****************************************************
# 入力
# *****************************************************
def synthetic_input(name: str, shape: Sequence[int], seed: int = 0) -> Tensor:
    """合成入力。noise は標準正規分布、ramp は W 方向に 0 から 1 へ線形に増加します。"""
    n, c, h, w = shape
    if name == "zeros":
        data = np.zeros(shape)
    elif name == "ones":
        data = np.ones(shape)
    elif name == "checkerboard":
        rows, cols = np.indices((h, w))
        data = np.broadcast_to(((rows + cols) % 2 == 0).astype(np.float64), shape)
    elif name == "noise":
        data = np.random.default_rng(seed).standard_normal(shape)
    elif name == "ramp":
        ramp = np.linspace(0.0, 1.0, w) if w > 1 else np.zeros(1)
        data = np.broadcast_to(ramp, (n, c, h, w))
    else:
        raise ConfigError(f"unknown synthetic input {name!r}; expected one of {', '.join(SYNTHETIC_INPUTS)}")
    return Tensor(np.asarray(data, dtype=np.float32))


def load_input(run: RunConfig, model: Backbone) -> Tensor:
    source = run.input or DEFAULT_INPUT
    if source in SYNTHETIC_INPUTS:
        return synthetic_input(source, (1, *model.input_shape), derive_seed(model.config.seed, "input"))
    return codec.load_tensor(source)


def load_backbone(run: RunConfig, cfg: BackboneConfig) -> Backbone:
    model = backbone_mod.build_backbone(cfg)
    if run.weights is not None:
        weights = pathlib.Path(run.weights)
        if not weights.is_dir():
            raise FileNotFoundError(f"weights directory not found: {weights}")
        model = backbone_mod.load_spci_weights(model, weights)
    return model


def _out_dir(run: RunConfig) -> pathlib.Path:
    out = pathlib.Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(run: RunConfig, file_name: str, text: str) -> pathlib.Path:
    target = _out_dir(run) / file_name
    target.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return target


# *****************************************************
# サブコマンド
# *****************************************************
def _summary_pairs(name: str, x: Tensor) -> List[Tuple[str, object]]:
    data = x.data.astype(np.float64)
    return [
        (f"{name}.shape", x.shape),
        (f"{name}.min", float(data.min())),
        (f"{name}.max", float(data.max())),
        (f"{name}.mean", float(data.mean())),
    ]


def _forward(run: RunConfig, cfg: BackboneConfig):
    model = load_backbone(run, cfg)
    x = load_input(run, model)
    log_to_output(f"Input shape {x.shape}, SPCI at {', '.join(model.spci) or 'none'}")
    return backbone_mod.forward_with_taps(
        model, x, seed=cfg.seed, bn_mode=run.bn_mode, dropout_mode=run.dropout_mode
    )


def run_forward(run: RunConfig, cfg: BackboneConfig) -> int:
    """タップを SPCT ファイルに書き出し、形状と最小・最大・平均の要約を出力します。"""
    taps, _ = _forward(run, cfg)
    out = _out_dir(run)
    pairs: List[Tuple[str, object]] = []
    for name, value in taps.items():
        codec.save_tensor(value, out / f"{name.lower()}.spct")
        pairs += _summary_pairs(name, value)
    _emit(run, "summary.txt", codec.format_report(pairs))
    return EXIT_OK


def emit_heatmaps(run: RunConfig, cfg: BackboneConfig) -> int:
    """注意マップごとに 1 枚のグレースケール画像を書き出します。"""
    _, diagnostics = _forward(run, cfg)
    out = _out_dir(run)
    written: List[pathlib.Path] = []
    for tap, diag in diagnostics.items():
        prefix = tap.lower()
        for n in range(diag.alpha.shape[0]):
            if diag.w_s is not None:
                strip = diag.w_s.data[n, :, 0, 0][None, :]
                written.append(codec.Heatmap.from_attention("w_s", f"{prefix}_w_s_n{n}", strip).save(out))
            if diag.w_p is not None:
                plane = diag.w_p.data[n, 0]
                written.append(codec.Heatmap.from_attention("w_p", f"{prefix}_w_p_n{n}", plane).save(out))
            if diag.w_c is not None:
                for c in range(diag.w_c.shape[1]):
                    plane = diag.w_c.data[n, c]
                    written.append(
                        codec.Heatmap.from_attention("w_c", f"{prefix}_w_c_n{n}_c{c}", plane).save(out)
                    )
    if not written:
        log_warning("No attention maps: no SPCI block with an enabled submodule")
    pairs: List[Tuple[str, object]] = [("heatmaps", len(written))]
    pairs += [("file", path.name) for path in written]
    _emit(run, "heatmaps.txt", codec.format_report(pairs))
    return EXIT_OK


def run_cost(run: RunConfig, cfg: BackboneConfig) -> int:
    """バックボーン全体のコストと、SPCI を挿入しない場合との差。"""
    model = load_backbone(run, cfg)
    report = verify.count_cost(model, 1)
    baseline = backbone_mod.build_backbone(attrs.evolve(cfg, spci_at=()))
    delta = verify.cost_delta(baseline, model)
    text = report.text() + codec.format_report(
        [
            ("spci_overhead.params", delta.params),
            ("spci_overhead.macs", delta.macs),
            ("spci_overhead.flops", delta.flops),
        ]
    )
    _emit(run, "cost.txt", text)
    return EXIT_OK


def run_gradcheck(run: RunConfig, cfg: BackboneConfig) -> int:
    """C=8、6x6、倍精度で SPCI ブロックの勾配を検査します。"""
    params = block.init_spci(8, 8, r=cfg.reduction, p=cfg.dropout, seed=cfg.seed, precision="double")
    params = params.with_flags(cfg.ssg_on, cfg.pfm_on, cfg.cdm_on)
    report = verify.gradcheck_spci(seed=cfg.seed, params=params)
    text = report.text()
    _emit(run, "gradcheck.txt", text)
    if not report.passed:
        raise CheckFailedError(text)
    return EXIT_OK


def train_toy(run: RunConfig, cfg: BackboneConfig) -> List[float]:
    """トイ分類器を SGD で学習し、各ステップの (更新前の) 損失を返します。"""
    model = backbone_mod.build_toy_classifier(cfg.seed, cfg.ssg_on, cfg.pfm_on, cfg.cdm_on)
    x, labels = backbone_mod.toy_batch(run.batch, derive_seed(cfg.seed, "input"))
    losses: List[float] = []
    for step in range(run.steps):
        tape = tensor.Tape()
        logits = backbone_mod.toy_forward(
            model,
            x,
            tape,
            bn_mode=run.bn_mode,
            dropout_mode=run.dropout_mode,
            seed=derive_seed(cfg.seed, "dropout", step),
        )
        loss, seed_grad = tensor.softmax_cross_entropy(logits, labels)
        losses.append(loss)
        if not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * losses[0]:
            raise TrainingDivergedError(step, loss, losses[0], losses)
        grads = tensor.backward(tape, seed_grad)
        for layer in model.iter_layers():
            for field, array in layer.param_items():
                grad = grads.params.get(f"{layer.name}.{field}")
                if grad is not None:
                    array -= (run.lr * grad).astype(array.dtype)
        log_to_output(f"step {step} loss {loss:.6g}")
    return losses


def _loss_lines(losses: Sequence[float]) -> str:
    return "".join(f"{step} {loss:.17g}\n" for step, loss in enumerate(losses))


def run_train_toy(run: RunConfig, cfg: BackboneConfig) -> int:
    out = _out_dir(run)
    try:
        losses = train_toy(run, cfg)
    except TrainingDivergedError as exc:
        (out / "loss.txt").write_text(_loss_lines(exc.losses), encoding="utf-8")
        sys.stdout.write(
            codec.format_report([("diverged_at", exc.step), ("initial_loss", exc.initial), ("loss", exc.loss)])
        )
        raise
    (out / "loss.txt").write_text(_loss_lines(losses), encoding="utf-8")
    pairs: List[Tuple[str, object]] = [("steps", len(losses))]
    if losses:
        pairs += [
            ("initial_loss", losses[0]),
            ("final_loss", losses[-1]),
            ("loss_ratio", losses[-1] / losses[0] if losses[0] else 0.0),
        ]
    _emit(run, "train.txt", codec.format_report(pairs))
    log_always(f"train-toy finished after {len(losses)} steps, losses in {out / 'loss.txt'}")
    return EXIT_OK


def run_init_weights(run: RunConfig, cfg: BackboneConfig) -> int:
    """シードから初期化した SPCI の重みをタップごとのマニフェストに書き出します。"""
    model = backbone_mod.build_backbone(cfg)
    paths = backbone_mod.save_backbone_weights(model, _out_dir(run))
    sys.stdout.write(codec.format_report([("manifest", p.name) for p in paths]))
    return EXIT_OK


def run_ablation(run: RunConfig, cfg: BackboneConfig) -> int:
    """プリセット B1..B7 を同じ入力で実行し、タップの統計とコストを行ごとに出力します。"""
    pairs: List[Tuple[str, object]] = []
    x: Optional[Tensor] = None
    for name in backbone_mod.PRESETS:
        row = backbone_mod.preset(name, cfg)
        model = backbone_mod.build_backbone(row)
        if x is None:
            x = load_input(run, model)
        taps, _ = backbone_mod.forward_with_taps(
            model, x, seed=row.seed, bn_mode=run.bn_mode, dropout_mode=run.dropout_mode
        )
        for tap, value in taps.items():
            pairs += _summary_pairs(f"{name}.{tap}", value)
        report = verify.count_cost(model, 1)
        pairs += [
            (f"{name}.spci_at", ",".join(row.spci_at) or "none"),
            (f"{name}.flags", f"ssg={int(row.ssg_on)} pfm={int(row.pfm_on)} cdm={int(row.cdm_on)}"),
            (f"{name}.params", report.total_params),
            (f"{name}.flops", report.total_flops),
        ]
    pairs.append(("flops_convention", verify.FLOPS_CONVENTION))
    _emit(run, "ablation.txt", codec.format_report(pairs))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, BackboneConfig], int]] = {
    "forward": run_forward,
    "heatmap": emit_heatmaps,
    "cost": run_cost,
    "gradcheck": run_gradcheck,
    "train-toy": run_train_toy,
    "init-weights": run_init_weights,
    "ablation": run_ablation,
}


# *****************************************************
# 引数の解析と終了コード
# *****************************************************
def _common_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--input", help="SPCT file or synthetic pattern: " + ", ".join(SYNTHETIC_INPUTS))
    parent.add_argument("--weights", help="directory holding <tap>.manifest files")
    parent.add_argument("--seed", type=int, help="seed for initialization, inputs and dropout")
    parent.add_argument("--out", help="output directory")
    parent.add_argument("--config", help="backbone config file (key = value lines)")
    parent.add_argument("--spci-at", dest="spci_at", choices=tuple(settings.SPCI_AT_CHOICES))
    for flag in ("ssg", "pfm", "cdm"):
        parent.add_argument(f"--disable-{flag}", dest=f"disable_{flag}", action="store_true")
    parent.add_argument("--bn-mode", dest="bn_mode", choices=settings.MODES)
    parent.add_argument("--dropout-mode", dest="dropout_mode", choices=settings.MODES)
    parent.add_argument("--verbose", action="store_true", default=None)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spci", description="SPCI attention block tools")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parent = _common_flags()
    for name in COMMANDS:
        sub = subparsers.add_parser(name, parents=[parent])
        if name == "train-toy":
            sub.add_argument("--steps", type=int)
            sub.add_argument("--lr", type=float)
            sub.add_argument("--batch", type=int)
    return parser


def _dispatch(argv: Sequence[str]) -> int:
    namespace = build_parser().parse_args(list(argv))
    run = settings.run_from_values(vars(namespace))
    configure_logging(run.verbose)
    log_to_output(f"CWD: {os.getcwd()}")
    paths = "\n   ".join(sys.path)
    log_to_output(f"sys.path used to run:\n   {paths}")
    cfg = settings.resolve_backbone(run)
    log_to_output(f"Run settings:\n{json.dumps(settings.unstructure(run), indent=4, ensure_ascii=False)}")
    log_to_output(f"Backbone settings:\n{json.dumps(settings.unstructure(cfg), indent=4, ensure_ascii=False)}")
    return COMMANDS[run.command](run, cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """引数を解析してサブコマンドを実行し、終了コードを返します。"""
    configure_logging()
    try:
        return _dispatch(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        log_error(f"configuration error: {exc}")
        return EXIT_CONFIG
    except codec.FormatError as exc:
        log_error(f"format error: {exc}")
        return EXIT_IO
    except ShapeError as exc:
        log_error(f"shape error: {exc}")
        return EXIT_SHAPE
    except OSError as exc:
        log_error(f"I/O error: {exc}")
        return EXIT_IO
    except (TrainingDivergedError, verify.GradCheckError) as exc:
        log_error(str(exc))
        return EXIT_CHECK_FAILED
    except CheckFailedError as exc:
        log_error(f"{exc}\n{exc.report}")
        return EXIT_CHECK_FAILED
    except Exception:
        log_error(traceback.format_exc(chain=True))
        raise


if __name__ == "__main__":
    sys.exit(main())
