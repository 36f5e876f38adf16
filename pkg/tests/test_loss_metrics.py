import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unet3d.autodiff import Tape
from unet3d.loss_metrics import (DICE_EPS, TOTAL_ROW, DiceReport, aggregate, dice_loss_class, dsc_hard,
                                 one_hot, per_class_losses, record_total_loss, total_loss, total_row)
from unet3d.tensor import ShapeError, Tensor


def test_dice_class_examples():
    r = np.zeros(10)
    r[:4] = 1
    assert dice_loss_class(r.copy(), r) == -1.0
    assert abs(dice_loss_class(np.array([0.5, 0.5]), np.array([1.0, 0.0])) + 0.5) < 1e-7
    assert dice_loss_class(np.zeros(5), np.zeros(5)) == -1.0
    with pytest.raises(ShapeError):
        dice_loss_class(np.zeros(3), np.zeros(4))


def test_total_loss_examples():
    labels = np.random.default_rng(0).integers(0, 3, size=(2, 3, 3, 3))
    r = one_hot(labels, 3, np.float64)
    assert abs(total_loss(r, r) + 1) < 1e-6
    p = np.random.default_rng(1).dirichlet(np.ones(3), size=(2, 3, 3, 3)).transpose(0, 4, 1, 2, 3)
    assert total_loss(p, r, [0, 0, 0]) == 0
    # two-class toy with L_0 = -1 and L_1 = -0.5
    p2 = np.array([1, 0, 0.5, 0.5]).reshape(1, 2, 1, 1, 2)
    r2 = np.array([1, 0, 1, 0]).reshape(1, 2, 1, 1, 2).astype(np.float64)
    losses = per_class_losses(p2, r2)
    assert losses[0] == -1.0 and abs(losses[1] + 0.5) < 1e-7
    assert abs(total_loss(p2, r2) + 0.75) < 1e-7
    with pytest.raises(ShapeError):
        total_loss(p2, r2, [1, 1, 1])


def test_total_loss_bounds():
    rng = np.random.default_rng(2)
    for _ in range(20):
        L = int(rng.integers(2, 6))
        p = rng.dirichlet(np.ones(L), size=(1, 3, 4, 2)).transpose(0, 4, 1, 2, 3)
        r = one_hot(rng.integers(0, L, size=(1, 3, 4, 2)), L, np.float64)
        assert -1.0 <= total_loss(p, r) <= 0.0


def test_hard_dice_loss_matches_dsc():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.random((6, 5, 4)) < rng.uniform(0.05, 0.6)
        b = rng.random((6, 5, 4)) < rng.uniform(0.05, 0.6)
        loss = dice_loss_class(a.astype(np.float64), b.astype(np.float64))
        assert abs(loss + dsc_hard(a.astype(np.uint8), b.astype(np.uint8), 1) / 100) < 1e-6


def test_dice_permutation_invariant_bitwise():
    rng = np.random.default_rng(4)
    p = rng.random(997) * 10 ** rng.uniform(-6, 3, size=997)
    r = (rng.random(997) < 0.3).astype(np.float64)
    perm = rng.permutation(997)
    assert dice_loss_class(p, r) == dice_loss_class(p[perm], r[perm])


def test_dice_tape_matches_direct_and_weights():
    rng = np.random.default_rng(5)
    p = rng.dirichlet(np.ones(3), size=(2, 2, 2, 2)).transpose(0, 4, 1, 2, 3)
    r = one_hot(rng.integers(0, 3, size=(2, 2, 2, 2)), 3, np.float64)
    tape = Tape()
    node = record_total_loss(tape, tape.leaf(Tensor(p)), r, [1.0, 2.0, 0.5])
    assert tape.value(node).item() == total_loss(p, r, [1.0, 2.0, 0.5])
    with pytest.raises(ValueError):
        total_loss(p, r, [1, -1, 1])


def test_dsc_hard_examples():
    m = np.array([1, 1, 0, 0], np.uint8)
    assert dsc_hard(m, m, 1) == 100
    assert dsc_hard(m, 1 - m, 1) == 0
    assert dsc_hard(np.array([1, 1, 0]), np.array([0, 1, 1]), 1) == 50
    assert dsc_hard(np.zeros(4), np.zeros(4), 3) == 100


def test_one_hot():
    oh = one_hot(np.array([[0, 2, 1]]).reshape(1, 1, 1, 3), 3)
    assert oh.shape == (1, 3, 1, 1, 3)
    assert oh[0, :, 0, 0].T.tolist() == [[1, 0, 0], [0, 0, 1], [0, 1, 0]]
    with pytest.raises(ValueError):
        one_hot(np.array([3]).reshape(1, 1, 1, 1), 3)


def test_aggregate_examples():
    rep = aggregate({"a": [1.0, 1.0], "b": [0.8, 0.9], "c": [0.7, 0.7]})
    s = rep.stats()
    assert s["a"] == {"avg": 1.0, "std": 0.0, "min": 1.0, "max": 1.0}
    assert abs(s["b"]["avg"] - 0.85) < 1e-12 and abs(s["b"]["std"] - math.sqrt(0.005)) < 1e-12
    single = aggregate({"x": [0.7]}).stats()["x"]
    assert single["avg"] == 0.7 and single["std"] == 0.0
    with pytest.raises(ValueError):
        aggregate({"x": []})


TABLE_TRAIN = {  # avg, std, min, max per organ
    "artery": (84.1, 5.0, 66.9, 91.7), "vein": (77.5, 8.9, 29.2, 89.2), "liver": (96.6, 1.1, 91.4, 98.5),
    "spleen": (96.3, 2.0, 79.8, 98.9), "stomach": (95.6, 7.7, 0.0, 99.7),
    "gallbladder": (90.1, 10.9, 0.0, 97.8), "pancreas": (85.5, 8.9, 28.0, 95.5),
}
TABLE_TEST = {
    "artery": (83.5, 4.1, 73.7, 91.1), "vein": (80.5, 6.8, 49.0, 89.4), "liver": (97.1, 1.0, 93.5, 98.3),
    "spleen": (97.7, 0.8, 95.2, 98.9), "stomach": (96.1, 7.9, 49.4, 98.9),
    "gallbladder": (85.1, 15.7, 28.6, 97.4), "pancreas": (84.9, 9.1, 52.5, 95.1),
}


@pytest.mark.parametrize("table,expected", [(TABLE_TRAIN, (89.4, 6.4, 42.2, 95.9)),
                                            (TABLE_TEST, (89.3, 6.5, 63.1, 95.6))])
def test_total_row_reproduces_reference_tables(table, expected):
    rows = [dict(zip(("avg", "std", "min", "max"), v)) for v in table.values()]
    total = total_row(rows)
    assert [round(total[k], 1) for k in ("avg", "std", "min", "max")] == list(expected)


def test_report_csv(tmp_path):
    rep = aggregate({"liver": [90.0, 95.0, 100.0], "spleen": [80.0, 70.0, 75.0]}, ["a", "b", "c"])
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "class,Avg,Std,Min,Max"
    assert lines[1] == "liver,95.0,5.0,90.0,100.0"
    assert lines[-1].startswith(TOTAL_ROW + ",85.0,5.0,80.0,")
    back = DiceReport.read_csv(tmp_path / "r.csv")
    assert back["spleen"]["avg"] == 75.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=12))
def test_summary_ordering(values):
    s = aggregate({"k": values}).stats()["k"]
    assert s["min"] <= s["avg"] + 1e-9 and s["avg"] <= s["max"] + 1e-9 and s["std"] >= 0


def test_eps_is_small():
    assert DICE_EPS == 1e-7
