import numpy as np

from unet3d import autodiff
from unet3d.autodiff import OpRule
from unet3d.checks import TOLERANCE, check_op, run_suite, suite


def test_suite_covers_every_op_once():
    names = list(suite(0))
    assert len(names) == len(set(names))
    for op in ("conv3d", "tconv3d", "maxpool3d", "relu", "batchnorm_train", "batchnorm_infer", "softmax",
               "concat", "dice_loss", "unet"):
        assert op in names


def test_suite_passes_for_two_seeds():
    for seed in (0, 7):
        errs = run_suite(seed)
        assert max(errs.values()) < TOLERANCE, errs


def test_report_lines():
    lines = []
    run_suite(1, lines.append)
    assert len(lines) == len(suite(1)) and all(line.endswith("ok") for line in lines)


def test_check_op_flags_broken_rule(monkeypatch):
    rule = autodiff.OPS["concat"]

    def swapped(*args):
        ga, gb = rule.backward(*args)
        return gb[:, :ga.shape[1]] if gb.shape[1] >= ga.shape[1] else ga, gb

    monkeypatch.setitem(autodiff.OPS, "concat", OpRule(rule.forward, swapped))
    rng = np.random.default_rng(0)
    n = rng.standard_normal
    assert check_op("concat", [n((1, 2, 2, 2, 2)), n((1, 3, 2, 2, 2))], rng) > TOLERANCE
