# Licensed under the MIT License.
"""
Tests for the command-line interface, run in-process.
"""
import numpy as np
import pytest
from hamcrest import assert_that, contains_string, greater_than, is_, less_than_or_equal_to

import spci_backbone as backbone_mod
import spci_cli
import spci_codec as codec
import spci_verify as verify
from spci_settings import BackboneConfig
from spci_tensor import Tensor

from .spci_test_client import utils


def _run(*args, out=None):
    extra = ("--out", str(out)) if out is not None else ()
    return utils.run_cli(*args, *extra)


def _report(path):
    return utils.parse_report(path.read_text(encoding="utf-8"))


def test_forward_on_zeros_gives_zero_taps(tmp_path):
    result = _run("forward", "--input", "zeros", out=tmp_path)

    assert_that(result.returncode, is_(spci_cli.EXIT_OK))
    summary = _report(tmp_path / "summary.txt")
    assert_that(summary["P3.shape"], is_("1x32x8x8"))
    assert_that(summary["P5.shape"], is_("1x128x2x2"))
    for tap in ("P3", "P5"):
        for stat in ("min", "max", "mean"):
            assert_that(summary[f"{tap}.{stat}"], is_("0"))
    assert_that(codec.load_tensor(tmp_path / "p3.spct").shape, is_((1, 32, 8, 8)))
    assert_that(result.stdout, is_((tmp_path / "summary.txt").read_text(encoding="utf-8")))


def test_forward_is_deterministic(tmp_path):
    first = _run("forward", "--seed", "5", out=tmp_path / "a")
    second = _run("forward", "--seed", "5", out=tmp_path / "b")

    assert_that((first.returncode, second.returncode), is_((0, 0)))
    for name in ("summary.txt", "p3.spct", "p5.spct"):
        assert_that((tmp_path / "a" / name).read_bytes(), is_((tmp_path / "b" / name).read_bytes()))


def _assert_same_files(actual, golden):
    names = sorted(path.name for path in golden.iterdir())
    assert_that(sorted(path.name for path in actual.iterdir()), is_(names))
    for name in names:
        assert_that((actual / name).read_bytes(), is_((golden / name).read_bytes()), name)


@pytest.mark.parametrize("seed", ["0", "3"])
def test_forward_matches_golden(tmp_path, seed):
    golden = utils.golden_or_skip("forward_zeros")
    result = _run("forward", "--input", "zeros", "--seed", seed, out=tmp_path)
    assert_that(result.returncode, is_(0))
    _assert_same_files(tmp_path, golden)


def test_heatmap_matches_golden(tmp_path):
    golden = utils.golden_or_skip("heatmap_zeros")
    result = _run("heatmap", "--input", "zeros", "--seed", "0", out=tmp_path)
    assert_that(result.returncode, is_(0))
    _assert_same_files(tmp_path, golden)


def test_train_toy_matches_golden(tmp_path):
    golden = utils.golden_or_skip("train_toy", "loss.txt")
    _run("train-toy", "--seed", "0", out=tmp_path)
    assert_that((tmp_path / "loss.txt").read_bytes(), is_(golden.read_bytes()))


def test_forward_reads_an_spct_input(tmp_path):
    codec.save_tensor(Tensor.full((1, 3, 64, 64), 0.5), tmp_path / "x.spct")
    result = _run("forward", "--input", str(tmp_path / "x.spct"), out=tmp_path / "out")
    assert_that(result.returncode, is_(0))
    assert_that(float(_report(tmp_path / "out" / "summary.txt")["P3.max"]), greater_than(0.0))


def test_heatmap_writes_one_image_per_map(tmp_path):
    result = _run("heatmap", "--input", "checkerboard", out=tmp_path)

    assert_that(result.returncode, is_(0))
    assert_that((tmp_path / "p3_w_s_n0.pgm").read_bytes()[:12], is_(b"P5\n32 1\n255\n"))
    assert_that((tmp_path / "p3_w_p_n0.pgm").read_bytes()[:11], is_(b"P5\n8 8\n255\n"))
    assert_that((tmp_path / "p5_w_c_n0_c127.pgm").read_bytes()[:11], is_(b"P5\n2 2\n255\n"))
    assert_that(len((tmp_path / "p3_w_p_n0.pgm").read_bytes()), is_(11 + 64))
    # P3: 1 + 1 + 32 枚、P5: 1 + 1 + 128 枚
    assert_that(_report(tmp_path / "heatmaps.txt")["heatmaps"], is_("164"))


def test_heatmap_skips_disabled_submodules(tmp_path):
    _run("heatmap", "--disable-ssg", "--disable-cdm", "--spci-at", "p3", out=tmp_path)

    names = sorted(path.name for path in tmp_path.glob("*.pgm"))
    assert_that(names, is_(["p3_w_p_n0.pgm"]))


def test_cost_reports_the_overhead(tmp_path):
    result = _run("cost", out=tmp_path)

    assert_that(result.returncode, is_(0))
    report = _report(tmp_path / "cost.txt")
    blocks = verify.tap_spci_cost(backbone_mod.build_backbone(BackboneConfig())).values()
    params = sum(block_cost.total_params for block_cost in blocks)
    macs = sum(block_cost.total_macs for block_cost in blocks)
    assert_that(report["spci_overhead.params"], is_(str(params)))
    assert_that(report["spci_overhead.flops"], is_(str(2 * macs)))
    assert_that(report["flops_convention"], is_("2*MACs"))
    assert_that(report["reference_context"], contains_string("not checkable"))


def test_cost_without_spci_has_no_overhead(tmp_path):
    _run("cost", "--spci-at", "none", out=tmp_path)
    assert_that(_report(tmp_path / "cost.txt")["spci_overhead.params"], is_("0"))


def test_gradcheck_passes(tmp_path):
    result = _run("gradcheck", out=tmp_path)

    assert_that(result.returncode, is_(spci_cli.EXIT_OK))
    assert_that(_report(tmp_path / "gradcheck.txt")["passed"], is_("1"))


def test_train_toy_halves_the_loss_reproducibly(tmp_path):
    first = _run("train-toy", out=tmp_path / "a")
    second = _run("train-toy", out=tmp_path / "b")

    assert_that((first.returncode, second.returncode), is_((0, 0)))
    losses = (tmp_path / "a" / "loss.txt").read_text(encoding="utf-8").splitlines()
    assert_that(len(losses), is_(200))
    assert_that(losses[0].split()[0], is_("0"))
    assert_that(float(_report(tmp_path / "a" / "train.txt")["loss_ratio"]), less_than_or_equal_to(0.5))
    assert_that((tmp_path / "a" / "loss.txt").read_bytes(), is_((tmp_path / "b" / "loss.txt").read_bytes()))


def test_train_toy_with_zero_rate_keeps_the_loss(tmp_path):
    result = _run("train-toy", "--steps", "5", "--lr", "0", out=tmp_path)

    assert_that(result.returncode, is_(0))
    values = {line.split()[1] for line in (tmp_path / "loss.txt").read_text(encoding="utf-8").splitlines()}
    assert_that(len(values), is_(1))


def test_train_toy_divergence_exits_with_one(tmp_path):
    result = _run("train-toy", "--steps", "20", "--lr", "1e6", out=tmp_path)

    assert_that(result.returncode, is_(spci_cli.EXIT_CHECK_FAILED))
    assert_that(result.stdout, contains_string("diverged_at"))
    assert_that(result.stderr, contains_string("training diverged"))


def test_init_weights_round_trip_through_forward(tmp_path):
    created = _run("init-weights", "--seed", "2", out=tmp_path / "weights")
    plain = _run("forward", "--seed", "2", out=tmp_path / "plain")
    loaded = _run("forward", "--seed", "2", "--weights", str(tmp_path / "weights"), out=tmp_path / "loaded")

    assert_that((created.returncode, plain.returncode, loaded.returncode), is_((0, 0, 0)))
    manifests = sorted(p.name for p in (tmp_path / "weights").glob("*.manifest"))
    assert_that(manifests, is_(["p3.manifest", "p5.manifest"]))
    for name in ("p3.spct", "p5.spct"):
        assert_that((tmp_path / "loaded" / name).read_bytes(), is_((tmp_path / "plain" / name).read_bytes()))


def test_ablation_lists_every_preset(tmp_path):
    result = _run("ablation", out=tmp_path)

    assert_that(result.returncode, is_(0))
    report = _report(tmp_path / "ablation.txt")
    for name in backbone_mod.PRESETS:
        assert_that(report[f"{name}.P3.shape"], is_("1x32x8x8"))
        assert_that(report[f"{name}.P5.shape"], is_("1x128x2x2"))
    assert_that(report["B1.spci_at"], is_("none"))
    assert_that(report["B2.flags"], is_("ssg=0 pfm=1 cdm=1"))
    assert_that(int(report["B7.params"]), greater_than(int(report["B1.params"])))
    assert_that(report["flops_convention"], is_("2*MACs"))


def test_verbose_logs_the_settings(tmp_path):
    result = _run("cost", "--verbose", out=tmp_path)
    assert_that(result.stderr, contains_string("Backbone settings"))
    assert_that(_run("cost", out=tmp_path).stderr, is_(""))


@pytest.mark.parametrize(
    "args",
    [
        ("predict",),
        ("forward", "--spci-at", "p4"),
        ("forward", "--config", "absent.cfg"),
    ],
)
def test_configuration_errors_exit_with_two(tmp_path, args):
    assert_that(_run(*args, out=tmp_path).returncode, is_(spci_cli.EXIT_CONFIG))


def test_bad_config_key_exits_with_two(tmp_path):
    config = tmp_path / "bad.cfg"
    config.write_text("depth = 3\n", encoding="utf-8")
    result = _run("forward", "--config", str(config), out=tmp_path)
    assert_that(result.returncode, is_(spci_cli.EXIT_CONFIG))
    assert_that(result.stderr, contains_string("unknown key"))


def test_io_errors_exit_with_three(tmp_path):
    truncated = tmp_path / "short.spct"
    truncated.write_bytes(codec.encode_array(np.zeros((1, 3, 64, 64), dtype=np.float32))[:-4])

    assert_that(_run("forward", "--input", str(tmp_path / "absent.spct"), out=tmp_path).returncode, is_(3))
    assert_that(_run("forward", "--weights", str(tmp_path / "absent"), out=tmp_path).returncode, is_(3))
    assert_that(_run("forward", "--input", str(truncated), out=tmp_path).returncode, is_(3))


def test_shape_errors_exit_with_four(tmp_path):
    codec.save_tensor(Tensor.zeros((1, 3, 32, 32)), tmp_path / "small.spct")
    _run("init-weights", out=tmp_path / "weights")
    config = tmp_path / "wide.cfg"
    config.write_text("channels = 8,16,64,64,128\n", encoding="utf-8")

    assert_that(_run("forward", "--input", str(tmp_path / "small.spct"), out=tmp_path).returncode, is_(4))
    weights = str(tmp_path / "weights")
    wrong_width = _run("forward", "--config", str(config), "--weights", weights, out=tmp_path)
    assert_that(wrong_width.returncode, is_(spci_cli.EXIT_SHAPE))


def test_corrupted_manifest_exits_with_three(tmp_path):
    _run("init-weights", out=tmp_path)
    (tmp_path / "p3.manifest").write_text("c_in 32\n", encoding="utf-8")
    assert_that(_run("forward", "--weights", str(tmp_path), out=tmp_path / "out").returncode, is_(3))


def test_zero_running_variance_in_weights_exits_with_three(tmp_path):
    _run("init-weights", out=tmp_path)
    # P3 は 32 チャネルなので C_mid = 16
    codec.save_tensor(Tensor.zeros((16, 1, 1, 1)), tmp_path / "p3.cdm.bn1.running_var.spct")

    result = _run("forward", "--weights", str(tmp_path), out=tmp_path / "out")

    assert_that(result.returncode, is_(spci_cli.EXIT_IO))
    assert_that(result.stderr, contains_string("running_var"))


def test_manifest_that_is_not_utf8_exits_with_three(tmp_path):
    _run("init-weights", out=tmp_path)
    with open(tmp_path / "p3.manifest", "ab") as stream:
        stream.write(b"\xff\xfe")

    result = _run("forward", "--weights", str(tmp_path), out=tmp_path / "out")

    assert_that(result.returncode, is_(spci_cli.EXIT_IO))
    assert_that(result.stderr, contains_string("not UTF-8"))


def test_config_that_is_not_utf8_exits_with_two(tmp_path):
    config = tmp_path / "binary.cfg"
    config.write_bytes(b"seed = 1\n\xff\n")

    result = _run("forward", "--config", str(config), out=tmp_path)

    assert_that(result.returncode, is_(spci_cli.EXIT_CONFIG))
    assert_that(result.stderr, contains_string("cannot read config file"))


def test_heatmap_without_maps_warns(tmp_path, monkeypatch):
    monkeypatch.setenv("SPCI_SHOW_NOTIFICATION", "onWarning")

    result = _run("heatmap", "--spci-at", "none", out=tmp_path)

    assert_that(result.returncode, is_(0))
    assert_that(result.stderr, contains_string("[WARNING] No attention maps"))
    assert_that(_report(tmp_path / "heatmaps.txt")["heatmaps"], is_("0"))
