"""Soft Dice loss, hard Dice coefficient and Dice report aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tape, register_op
from .tensor import ShapeError, Tensor

DICE_EPS = 1e-7


def exact_sum(values) -> float:
    # correctly rounded, hence independent of element order
    return math.fsum(np.asarray(values, dtype=np.float64).ravel().tolist())


def _class_sums(p, r):
    return exact_sum(p * r), exact_sum(p), exact_sum(r)


def _dice_from_sums(inter, psum, rsum, eps=DICE_EPS):
    return -(2.0 * inter + eps) / (psum + rsum + eps)


def dice_loss_class(p: Tensor | np.ndarray, r: Tensor | np.ndarray) -> float:
    """Soft Dice loss of one class channel; -1 is perfect agreement."""
    p, r = np.asarray(p), np.asarray(r)
    if p.shape != r.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {r.shape}")
    return _dice_from_sums(*_class_sums(p.astype(np.float64), r.astype(np.float64)))


def _weights(w, num_classes):
    w = np.ones(num_classes) if w is None else np.asarray(w, dtype=np.float64).ravel()
    if w.size != num_classes:
        raise ShapeError(f"{w.size} class weights for {num_classes} classes")
    if np.any(w < 0):
        raise ValueError("class weights must be non-negative")
    return w


def per_class_losses(p, r) -> list[float]:
    """Dice loss per class; sums run jointly over batch and space."""
    p, r = np.asarray(p), np.asarray(r)
    if p.shape != r.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {r.shape}")
    return [dice_loss_class(p[:, k], r[:, k]) for k in range(p.shape[1])]


def total_loss(p, r, w=None) -> float:
    """Mean over classes of weighted Dice losses."""
    losses = per_class_losses(p, r)
    w = _weights(w, len(losses))
    return math.fsum(wl * ll for wl, ll in zip(w, losses)) / len(losses)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(n, d, h, w) integer labels -> (n, L, d, h, w) indicator tensor."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes - 1}]")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1, axis=1)
    return out


def _dice_total_fwd(a, ctx):
    p, r = a
    w = _weights(ctx.get("weights"), p.shape[1])
    L = p.shape[1]
    sums = [_class_sums(p[:, k].astype(np.float64), r[:, k].astype(np.float64)) for k in range(L)]
    losses = [_dice_from_sums(*s) for s in sums]
    value = math.fsum(wl * ll for wl, ll in zip(w, losses)) / L
    return np.full((1, 1, 1, 1, 1), value, dtype=p.dtype), (sums, w)


def _dice_total_bwd(g, a, out, saved, ctx, needs):
    p, r = a
    sums, w = saved
    L = p.shape[1]
    scale = float(g.reshape(()))
    gp = np.empty_like(p)
    for k, (inter, psum, rsum) in enumerate(sums):
        den = psum + rsum + DICE_EPS
        num = 2.0 * inter + DICE_EPS
        c = scale * w[k] / L
        gp[:, k] = c * (num / den ** 2 - 2.0 * r[:, k] / den)
    return gp, None


register_op("dice_total", _dice_total_fwd, _dice_total_bwd)


def record_total_loss(tape: Tape, probs: int, onehot, weights=None) -> int:
    """Record the weighted Dice loss of probability node ``probs`` against ``onehot``."""
    r = onehot if isinstance(onehot, int) else tape.constant(Tensor(onehot))
    return tape.record("dice_total", [probs, r], weights=weights)


def dsc_hard(pred, gt, class_id: int) -> float:
    """Dice similarity coefficient (percent) of one class; both empty gives 100."""
    a = np.asarray(getattr(pred, "voxels", pred)) == class_id
    b = np.asarray(getattr(gt, "voxels", gt)) == class_id
    if a.shape != b.shape:
        raise ShapeError(f"extent mismatch {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / (na + nb)


# ---------------------------------------------------------------------------
# reports


def summarize(values: Sequence[float]) -> dict:
    """avg, sample std (0 for a single value), min, max."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one case")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"avg": float(v.mean()), "std": std, "min": float(v.min()), "max": float(v.max())}


STAT_KEYS = ("avg", "std", "min", "max")
TOTAL_ROW = "Total Avg."


def total_row(class_rows) -> dict:
    """Column-wise mean of per-class aggregate rows."""
    rows = list(class_rows)
    return {k: float(np.mean([r[k] for r in rows])) for k in STAT_KEYS}


@dataclass
class DiceReport:
    class_names: list[str]
    values: dict[str, list[float]]
    case_ids: list[str] = field(default_factory=list)
    background: list[float] | None = None

    def stats(self) -> dict[str, dict]:
        rows = {name: summarize(self.values[name]) for name in self.class_names}
        rows[TOTAL_ROW] = total_row(rows.values())
        return rows

    @property
    def total(self) -> dict:
        return self.stats()[TOTAL_ROW]

    def to_csv(self, path, decimals: int | None = 1) -> None:
        """Table layout; ``decimals=None`` writes full float precision."""
        fmt = repr if decimals is None else (lambda v: f"{v:.{decimals}f}")
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["class", "Avg", "Std", "Min", "Max"])
            for name, row in self.stats().items():
                out.writerow([name] + [fmt(float(row[k])) for k in STAT_KEYS])

    @staticmethod
    def read_csv(path) -> dict[str, dict]:
        with open(path, newline="") as fh:
            return {row["class"]: {k: float(row[k.capitalize()]) for k in STAT_KEYS}
                    for row in csv.DictReader(fh)}


def aggregate(cases: Mapping[str, Sequence[float]], case_ids=None, background=None) -> DiceReport:
    names = list(cases)
    for name in names:
        if len(cases[name]) < 1:
            raise ValueError(f"class {name} has no cases")
    return DiceReport(names, {n: [float(v) for v in cases[n]] for n in names},
                      list(case_ids or []), None if background is None else list(background))
