"""Adam and the training loop."""
from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .augment import AugmentConfig
from .autodiff import Tape
from .data import PatchSource, normalize_intensity
from .loss_metrics import dsc_hard, one_hot, record_total_loss
from .tensor import Tensor
from .unet import ParamStore, UNetConfig, build, load_checkpoint, record_forward, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = ["iteration", "phase", "loss", "mean_dice"]


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params: ParamStore, grads: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update of every trainable tensor, in place."""
    names = params.trainable_names()
    missing = [n for n in names if n not in grads]
    if missing:
        raise KeyError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in names:
        theta = params[name].data
        g = np.asarray(grads[name].data, dtype=theta.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        params[name] = Tensor((theta - step).astype(theta.dtype))


@dataclass
class TrainPlan:
    iterations: int = 500
    batch_size: int = 3
    patch: int = 64
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    lr: float = 1e-2
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    class_weights: list | None = None
    tile_depth: int | None = None
    overlap: int = 8
    # iteration (0-based) -> learning rate; None keeps lr constant
    lr_schedule: Callable[[int], float] | None = None
    # re-estimate BN running statistics on the clean training volumes at the end
    recalibrate_bn: bool = False

    def __post_init__(self):
        for key in ("batch_size", "patch"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        for key in ("iterations", "eval_every", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative")


@dataclass
class TrainResult:
    params: ParamStore
    state: AdamState
    iteration: int
    log_path: Path
    checkpoint: Path


def batch_mean_dice(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean hard Dice (fraction) over foreground classes for a batch."""
    pred = np.argmax(probs, axis=1)
    L = probs.shape[1]
    return float(np.mean([dsc_hard(pred, labels, k) for k in range(1, L)])) / 100.0


def train_step(params: ParamStore, state: AdamState, x: np.ndarray, labels: np.ndarray,
               class_weights=None):
    """Forward, Dice loss, backward, Adam. Returns (loss, batch mean Dice)."""
    tape = Tape()
    logits, leaves = record_forward(params, Tensor(x), tape, mode="train")
    probs = tape.record("softmax", [logits])
    r = one_hot(labels, params.config.num_classes, dtype=x.dtype)
    loss = record_total_loss(tape, probs, r, class_weights)
    grads = tape.backward(loss)
    dice = batch_mean_dice(tape.value(probs).data, labels)
    value = tape.value(loss).item()
    adam_step(params, {n: grads[i] for n, i in leaves.items()}, state)
    return value, dice


def recalibrate_bn(params: ParamStore, images, window=(-200.0, 400.0)) -> None:
    """Replace BN running statistics by population statistics over ``images``.

    Each volume is passed through the network in train mode (cropped to the
    network divisor); per-layer batch moments are pooled by voxel count.
    """
    work = params.copy()
    div = params.config.divisor
    pooled: dict[str, list] = {}
    for image in images:
        vox = np.asarray(getattr(image, "voxels", image))
        vox = vox[tuple(slice(0, s - s % div) for s in vox.shape)]
        x = normalize_intensity(vox.astype(np.float32), window)[None, None].astype(params["head.w"].dtype)
        stats: dict = {}
        record_forward(work, Tensor(x), Tape(), "train", stats)
        count = vox.size
        for bn, (mean, var) in stats.items():
            acc = pooled.setdefault(bn, [0, 0.0, 0.0])
            acc[0] += count
            acc[1] = acc[1] + count * mean.astype(np.float64)
            acc[2] = acc[2] + count * (var.astype(np.float64) + mean.astype(np.float64) ** 2)
    for bn, (n, s1, s2) in pooled.items():
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0.0)
        for stat, value in (("running_mean", mean), ("running_var", var)):
            old = params[f"{bn}.{stat}"]
            params[f"{bn}.{stat}"] = Tensor(value.reshape(old.shape).astype(old.dtype))


def _adam_tensors(state: AdamState) -> "OrderedDict[str, Tensor]":
    out = OrderedDict()
    for name in state.m:
        out[f"adam.m/{name}"] = Tensor(state.m[name])
        out[f"adam.v/{name}"] = Tensor(state.v[name])
    return out


def save_training_checkpoint(path, params: ParamStore, state: AdamState, iteration: int,
                             extra: dict | None = None) -> None:
    meta = {"adam": state.hyper()}
    meta.update(extra or {})
    save_checkpoint(path, params, iteration, _adam_tensors(state), meta)


def load_training_checkpoint(path):
    ckpt = load_checkpoint(path)
    hyper = ckpt.extra.get("adam", {})
    state = AdamState(**hyper)
    for key, t in ckpt.tensors.items():
        kind, _, name = key.partition("/")
        if kind == "adam.m":
            state.m[name] = np.array(t.data)
        elif kind == "adam.v":
            state.v[name] = np.array(t.data)
    return ckpt.params, state, ckpt.iteration, ckpt.extra


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _log_rows_upto(path: Path, iteration: int) -> list[list[str]]:
    # rows logged after the resume point are replayed, so drop them
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if int(r[0]) <= iteration]


def train(config: UNetConfig, source: PatchSource, plan: TrainPlan, out_dir,
          test_cases=None, resume=None) -> TrainResult:
    """Run ``plan.iterations`` Adam steps on batches from ``source``.

    Writes ``log.csv`` (iteration, phase, loss, mean_dice) and checkpoints to
    ``out_dir``; the final state always lands in ``final.ckpt``. ``test_cases``
    is a list of (image Volume, LabelVolume) scored every ``eval_every`` steps.
    """
    from .evaluation import score_cases

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if plan.patch % config.divisor:
        raise ValueError(f"patch extent {plan.patch} is not divisible by {config.divisor}")
    if source.patch != plan.patch or source.batch_size != plan.batch_size:
        raise ValueError("patch source does not match the training plan")

    if resume is not None:
        params, state, start, _ = load_training_checkpoint(resume)
        if params.config != config:
            raise ValueError("checkpoint config differs from the requested config")
    else:
        params = build(config, plan.seed)
        state = AdamState(lr=plan.lr)
        start = 0

    log_path = out_dir / "log.csv"
    kept = _log_rows_upto(log_path, start) if resume is not None else []
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        writer.writerows(kept)
        for it in range(start, plan.iterations):
            if plan.lr_schedule is not None:
                state.lr = float(plan.lr_schedule(it))
            x, labels = source.batch(it)
            loss, dice = train_step(params, state, x, labels, plan.class_weights)
            done = it + 1
            writer.writerow([done, "train", _fmt(loss), _fmt(dice)])
            log.info("iter %d loss %.4f dice %.3f", done, loss, dice)
            if plan.eval_every and test_cases and done % plan.eval_every == 0:
                tloss, tdice = score_cases(params, test_cases, plan.tile_depth, plan.overlap)
                writer.writerow([done, "test", _fmt(tloss), _fmt(tdice)])
                log.info("iter %d test loss %.4f dice %.3f", done, tloss, tdice)
            if plan.checkpoint_every and done % plan.checkpoint_every == 0:
                save_training_checkpoint(out_dir / f"checkpoint_{done:06d}.ckpt", params, state, done)
            fh.flush()
    if plan.recalibrate_bn and params.config.use_batchnorm:
        recalibrate_bn(params, source.images, source.window)
    final = out_dir / "final.ckpt"
    done = max(start, plan.iterations)
    save_training_checkpoint(final, params, state, done)
    return TrainResult(params, state, done, log_path, final)
