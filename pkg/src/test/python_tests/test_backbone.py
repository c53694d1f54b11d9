# Licensed under the MIT License.
"""
Tests for the toy backbone, SPCI insertion and the toy classifier.
"""
import numpy as np
import pytest
from hamcrest import assert_that, calling, has_key, is_, not_, raises

import spci_backbone as backbone_mod
import spci_tensor as tensor
import spci_verify as verify
from spci_codec import ManifestShapeError
from spci_settings import BackboneConfig, ConfigError
from spci_tensor import ShapeError, Tape, Tensor

from .spci_test_client import utils


def _small(**changes) -> BackboneConfig:
    values = {"input_size": (32, 32), "channels": (4, 4, 8, 8, 16), "spci_at": ("P3", "P5")}
    values.update(changes)
    return BackboneConfig(**values)


def test_default_tap_shapes():
    model = backbone_mod.build_backbone(BackboneConfig())
    taps, diagnostics = backbone_mod.forward_with_taps(model, Tensor.zeros((2, 3, 64, 64)))

    assert_that(taps["P3"].shape, is_((2, 32, 8, 8)))
    assert_that(taps["P5"].shape, is_((2, 128, 2, 2)))
    assert_that(sorted(diagnostics), is_(["P3", "P5"]))
    assert_that(model.tap_shape("P1", 2), is_((2, 8, 32, 32)))


@pytest.mark.parametrize("spci_at", [(), ("P3",), ("P5",), ("P3", "P5")])
def test_insertion_keeps_tap_shapes(spci_at):
    model = backbone_mod.build_backbone(_small(spci_at=spci_at))
    x = utils.random_tensor(0, (1, 3, 32, 32), precision="single")
    taps, _ = backbone_mod.forward_with_taps(model, x)

    assert_that(sorted(taps), is_(["P3", "P5"]))
    assert_that(taps["P3"].shape, is_((1, 8, 4, 4)))
    assert_that(taps["P5"].shape, is_((1, 16, 1, 1)))


def test_p4_insertion_adds_a_tap():
    model = backbone_mod.build_backbone(_small(spci_at=("P4",)))
    assert_that(model.output_taps(), is_(("P3", "P4", "P5")))


def test_zero_input_gives_zero_taps():
    model = backbone_mod.build_backbone(_small())
    taps, _ = backbone_mod.forward_with_taps(model, Tensor.zeros((1, 3, 32, 32)))
    for value in taps.values():
        assert_that(bool(np.all(value.data == 0.0)), is_(True))


def test_build_and_forward_are_deterministic():
    x = utils.random_tensor(4, (1, 3, 32, 32), precision="single")
    first, _ = backbone_mod.forward_with_taps(backbone_mod.build_backbone(_small(seed=3)), x)
    second, _ = backbone_mod.forward_with_taps(backbone_mod.build_backbone(_small(seed=3)), x)
    other, _ = backbone_mod.forward_with_taps(backbone_mod.build_backbone(_small(seed=4)), x)

    for name in ("P3", "P5"):
        assert_that(np.array_equal(first[name].data, second[name].data), is_(True))
    assert_that(np.array_equal(first["P3"].data, other["P3"].data), is_(False))


def test_insertion_cost_equals_block_costs():
    inserted = backbone_mod.build_backbone(_small())
    baseline = backbone_mod.build_backbone(_small(spci_at=()))

    delta = verify.cost_delta(baseline, inserted)
    blocks = verify.tap_spci_cost(inserted).values()

    assert_that(delta.params, is_(sum(report.total_params for report in blocks)))
    assert_that(delta.macs, is_(sum(report.total_macs for report in blocks)))
    assert_that(delta.ops, is_(sum(report.total_ops for report in blocks)))


def test_input_size_must_be_a_multiple_of_32():
    assert_that(
        calling(BackboneConfig).with_args(input_size=(60, 60)),
        raises(ConfigError, "multiples of 32"),
    )


def test_forward_rejects_wrong_input_shape():
    model = backbone_mod.build_backbone(_small())
    assert_that(
        calling(backbone_mod.forward_with_taps).with_args(model, Tensor.zeros((1, 3, 64, 64))),
        raises(ShapeError, "does not match"),
    )


def _gradient_from(tap: str):
    model = backbone_mod.build_backbone(_small())
    tape = Tape()
    x = tape.watch(utils.random_tensor(7, (1, 3, 32, 32), precision="single"))
    taps, _ = backbone_mod.forward_with_taps(model, x, tape=tape)
    return x, tensor.backward(tape, np.ones(taps[tap].shape), output=taps[tap])


def test_gradient_flows_from_p3():
    x, grads = _gradient_from("P3")

    assert_that(bool(np.any(grads.param("p3.transform.weight") != 0)), is_(True))
    assert_that(bool(np.any(grads.param("p1.conv.weight") != 0)), is_(True))
    assert_that(bool(np.any(grads.wrt(x) != 0)), is_(True))
    assert_that(grads.params, not_(has_key("p4.conv.weight")))
    assert_that(grads.params, not_(has_key("p5.transform.weight")))


def test_gradient_flows_from_p5():
    _, grads = _gradient_from("P5")

    for name in ("p5.transform.weight", "p5.cdm.conv3.weight", "p4.conv.weight", "p3.transform.weight"):
        assert_that(grads.params, has_key(name))


def test_presets():
    assert_that(backbone_mod.preset("B1").spci_at, is_(()))
    assert_that(backbone_mod.preset("B2").ssg_on, is_(False))
    assert_that(backbone_mod.preset("B2").spci_at, is_(("P3", "P5")))
    assert_that(backbone_mod.preset("B5").spci_at, is_(("P3",)))
    assert_that(backbone_mod.preset("B6").spci_at, is_(("P5",)))
    full = backbone_mod.preset("B7", _small(pfm_on=False))
    assert_that((full.pfm_on, full.input_size), is_((True, (32, 32))))
    assert_that(calling(backbone_mod.preset).with_args("B8"), raises(ConfigError))


def test_weights_round_trip(tmp_path):
    source = backbone_mod.build_backbone(_small(seed=1))
    source.spci["P5"].transform.weight[...] *= 2
    paths = backbone_mod.save_backbone_weights(source, tmp_path)
    fresh = backbone_mod.build_backbone(_small(seed=1, dropout=0.2))
    target = backbone_mod.load_spci_weights(fresh, tmp_path)
    x = utils.random_tensor(2, (1, 3, 32, 32), precision="single")

    expected, _ = backbone_mod.forward_with_taps(source, x)
    actual, _ = backbone_mod.forward_with_taps(target, x)

    assert_that(sorted(p.name for p in paths), is_(["p3.manifest", "p5.manifest"]))
    assert_that(np.array_equal(actual["P5"].data, expected["P5"].data), is_(True))


def test_loaded_flags_are_limited_by_config(tmp_path):
    backbone_mod.save_backbone_weights(backbone_mod.build_backbone(_small()), tmp_path)
    loaded = backbone_mod.load_spci_weights(backbone_mod.build_backbone(_small(cdm_on=False)), tmp_path)
    assert_that(loaded.spci["P3"].cdm_on, is_(False))
    assert_that(loaded.spci["P3"].ssg_on, is_(True))


def test_weights_for_other_widths_are_rejected(tmp_path):
    backbone_mod.save_backbone_weights(backbone_mod.build_backbone(_small()), tmp_path)
    wider = backbone_mod.build_backbone(_small(channels=(4, 4, 16, 16, 16)))
    assert_that(
        calling(backbone_mod.load_spci_weights).with_args(wider, tmp_path),
        raises(ManifestShapeError, "tap P3"),
    )


def test_toy_batch_cycles_through_classes():
    x, labels = backbone_mod.toy_batch(6, seed=0)
    assert_that(x.shape, is_((6, 1, 16, 16)))
    assert_that(labels.tolist(), is_([0, 1, 2, 3, 0, 1]))


def test_toy_patterns_differ():
    patterns = [backbone_mod.toy_pattern(label) for label in range(len(backbone_mod.TOY_CLASSES))]
    for i, first in enumerate(patterns):
        for second in patterns[i + 1 :]:
            assert_that(np.array_equal(first, second), is_(False))
    assert_that(float(patterns[3].sum()), is_(64.0))


def test_toy_classifier_gives_one_logit_per_class():
    model = backbone_mod.build_toy_classifier(seed=0)
    x, _ = backbone_mod.toy_batch(4, seed=1)
    assert_that(backbone_mod.toy_forward(model, x).shape, is_((4, 4, 1, 1)))
