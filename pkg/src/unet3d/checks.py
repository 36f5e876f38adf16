"""Finite-difference gradient suite over every differentiable op.

Each check contracts the op output with a fixed random tensor, so the
scalar under test has generic, non-vanishing gradients, and compares the
tape gradient of every input against central differences in float64.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tape, central_difference, gradcheck, max_relative_error
from .loss_metrics import one_hot
from .tensor import Tensor
from .unet import UNetConfig, build, record_forward

TOLERANCE = 1e-4
EPS = 1e-5


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _contracted(tape: Tape, node: int, weights: np.ndarray) -> int:
    w = tape.constant(Tensor(weights))
    return tape.record("sum", [tape.record("mul", [node, w])])


def check_op(kind: str, inputs: list[np.ndarray], rng, differentiable=None, eps=EPS, **ctx) -> float:
    """Max relative error over all differentiable inputs of ``kind``."""
    differentiable = range(len(inputs)) if differentiable is None else differentiable
    probe = Tape()
    out = probe.record(kind, [probe.constant(Tensor(a)) for a in inputs], **ctx)
    weights = rng.standard_normal(probe.value(out).shape)
    worst = 0.0
    for k in differentiable:
        def f(tape, xid, k=k):
            ids = [xid if j == k else tape.constant(Tensor(a)) for j, a in enumerate(inputs)]
            return _contracted(tape, tape.record(kind, ids, **ctx), weights)
        worst = max(worst, gradcheck(f, Tensor(inputs[k]), eps))
    return worst


def check_dice(rng, eps=EPS) -> float:
    """Weighted Dice total loss of softmax(logits) against a one-hot target."""
    logits = rng.standard_normal((2, 3, 3, 2, 3))
    labels = rng.integers(0, 3, size=(2, 3, 2, 3))
    r = one_hot(labels, 3, dtype=np.float64)
    w = [1.0, 0.5, 2.0]

    def f(tape, xid):
        probs = tape.record("softmax", [xid])
        return tape.record("dice_total", [probs, tape.constant(Tensor(r))], weights=w)

    err = gradcheck(f, Tensor(logits), eps)
    # also directly on probabilities, away from the simplex constraint
    p = rng.uniform(0.05, 0.95, size=r.shape)
    return max(err, check_op("dice_total", [p, r], rng, differentiable=[0], weights=w))


def check_unet(rng, eps=EPS) -> float:
    """Whole tiny network in train mode (BN on) against every parameter tensor."""
    cfg = UNetConfig(levels=2, base_channels=2, num_classes=3)
    params = build(cfg, int(rng.integers(1 << 31)), dtype=np.float64)
    for name in params.trainable_names():
        if name.endswith(".b") or name.endswith(".beta"):
            params[name] = Tensor(rng.standard_normal(params[name].shape) * 0.1)
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 4, 4, 4)))
    labels = rng.integers(0, 3, size=(2, 4, 4, 4))
    r = Tensor(one_hot(labels, 3, dtype=np.float64))

    def loss(store):
        tape = Tape()
        logits, leaves = record_forward(store, x, tape, "train")
        probs = tape.record("softmax", [logits])
        return tape, tape.record("dice_total", [probs, tape.constant(r)]), leaves

    tape, out, leaves = loss(params)
    grads = tape.backward(out)
    worst = 0.0
    for name in ("enc1.conv1.w", "up1.w", "dec1.conv2.w", "head.bn.gamma"):
        def fn(arr, name=name):
            store = params.copy()
            store[name] = Tensor(arr.copy())
            t, o, _ = loss(store)
            return t.value(o).item()
        numeric = central_difference(fn, params[name].data, eps)
        worst = max(worst, max_relative_error(grads[leaves[name]].data, numeric))
    return worst


def suite(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    return {
        "conv3d": lambda: check_op("conv3d", [n((2, 2, 3, 4, 5)), n((3, 2, 3, 3, 3)), n((1, 3, 1, 1, 1))], rng),
        "conv3d_1x1": lambda: check_op("conv3d", [n((1, 3, 2, 3, 2)), n((2, 3, 1, 1, 1)), n((1, 2, 1, 1, 1))], rng),
        "tconv3d": lambda: check_op("tconv3d", [n((2, 2, 2, 3, 2)), n((3, 2, 2, 2, 2)), n((1, 3, 1, 1, 1))], rng),
        "maxpool3d": lambda: check_op("maxpool3d", [_distinct(rng, (1, 2, 4, 4, 4))], rng),
        "relu": lambda: check_op("relu", [_away_from_zero(rng, (1, 2, 3, 4, 5))], rng),
        "batchnorm_train": lambda: check_op("batchnorm_train", [n((2, 3, 2, 3, 2)), 1 + 0.1 * n((1, 3, 1, 1, 1)),
                                                                n((1, 3, 1, 1, 1))], rng),
        "batchnorm_infer": lambda: check_op("batchnorm_infer", [n((2, 3, 2, 3, 2)), n((1, 3, 1, 1, 1)), n((1, 3, 1, 1, 1)),
                                                                n((1, 3, 1, 1, 1)), rng.uniform(0.5, 2, (1, 3, 1, 1, 1))],
                                            rng, differentiable=[0, 1, 2]),
        "softmax": lambda: check_op("softmax", [n((2, 4, 2, 3, 2))], rng),
        "concat": lambda: check_op("concat", [n((1, 2, 2, 3, 2)), n((1, 3, 2, 3, 2))], rng),
        "dice_loss": lambda: check_dice(rng),
        "unet": lambda: check_unet(rng),
    }


def _distinct(rng, shape):
    # well-separated values so +-eps never changes a block maximum
    vals = rng.permutation(int(np.prod(shape))).astype(np.float64) * 0.01
    return vals.reshape(shape)


def run_suite(seed: int = 0, report: Callable[[str], None] | None = None) -> dict[str, float]:
    results = {}
    for name, check in suite(seed).items():
        err = check()
        results[name] = err
        if report is not None:
            status = "ok" if err < TOLERANCE else "FAIL"
            report(f"{name:16s} max rel err {err:.3e}  {status}")
    return results
