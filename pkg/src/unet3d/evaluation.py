"""Split-level evaluation and report comparison."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DatasetIndex, LabelVolume, Volume, read_image, read_labels
from .inference import argmax_labels, predict_volume
from .loss_metrics import STAT_KEYS, DiceReport, aggregate, dsc_hard, one_hot, total_loss
from .unet import ParamStore, load_checkpoint

log = logging.getLogger(__name__)

ORGANS = ["artery", "vein", "liver", "spleen", "stomach", "gallbladder", "pancreas"]


def default_class_names(num_classes: int) -> list[str]:
    if num_classes == len(ORGANS) + 1:
        return list(ORGANS)
    return [f"class{k}" for k in range(1, num_classes)]


@dataclass
class EvalRun:
    checkpoint: Path
    index: DatasetIndex
    split: str = "test"
    out_dir: Path = Path("eval")
    class_names: list[str] | None = None
    tile_depth: int | None = None
    overlap: int = 8


@dataclass
class EvalResult:
    report: DiceReport
    failures: dict[str, str] = field(default_factory=dict)
    csv_path: Path | None = None
    full_csv_path: Path | None = None
    json_path: Path | None = None


def score_case(labels: LabelVolume, pred: LabelVolume, num_classes: int) -> list[float]:
    """DSC percent for every class 0..L-1."""
    return [dsc_hard(pred, labels, k) for k in range(num_classes)]


def score_cases(params: ParamStore, cases, tile_depth=None, overlap=8):
    """Mean soft-Dice loss and mean foreground hard Dice (fraction) over cases."""
    L = params.config.num_classes
    losses, dices = [], []
    for image, labels in cases:
        probs = predict_volume(params, image, tile_depth, overlap)
        r = one_hot(labels.voxels[None], L)
        losses.append(total_loss(probs.data, r))
        pred = argmax_labels(probs)
        dices.append(np.mean(score_case(labels, pred, L)[1:]) / 100.0)
    return float(np.mean(losses)), float(np.mean(dices))


def evaluate_split(run: EvalRun, predictor: Callable[[Volume], LabelVolume] | None = None) -> EvalResult:
    """Predict and score every case of ``run.split``; write CSVs and per-case JSON.

    A case that cannot be read or predicted is recorded in ``failures`` and
    skipped. ``predictor`` replaces the checkpoint network when given.
    """
    cases = run.index.subset(run.split)
    if not cases:
        raise ValueError(f"split {run.split!r} is empty")
    if predictor is None:
        params = load_checkpoint(run.checkpoint).params
        L = params.config.num_classes

        def predictor(image):
            probs = predict_volume(params, image, run.tile_depth, run.overlap)
            return argmax_labels(probs, image.spacing)
    else:
        L = len(run.class_names) + 1 if run.class_names else None

    names = run.class_names
    rows, failures = [], {}
    per_class: dict[str, list[float]] | None = None
    background = []
    for case in cases:
        try:
            image = read_image(case.image)
            labels = read_labels(case.label)
            pred = predictor(image)
            if L is None:
                L = int(max(labels.voxels.max(), pred.voxels.max())) + 1
            scores = score_case(labels, pred, L)
        except Exception as exc:  # noqa: BLE001 - a bad case must not stop the run
            log.error("case %s failed: %s", case.case_id, exc)
            failures[case.case_id] = f"{type(exc).__name__}: {exc}"
            continue
        if names is None:
            names = default_class_names(L)
        if per_class is None:
            per_class = {n: [] for n in names}
        for name, s in zip(names, scores[1:]):
            per_class[name].append(s)
        background.append(scores[0])
        rows.append({"case_id": case.case_id, "background": scores[0], **dict(zip(names, scores[1:]))})

    if per_class is None:
        raise RuntimeError("every case failed")
    report = aggregate(per_class, [r["case_id"] for r in rows], background)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"dice_{run.split}.csv"
    json_path = out / f"cases_{run.split}.json"
    report.to_csv(csv_path)
    report.to_csv(out / f"dice_{run.split}_full.csv", decimals=None)
    json_path.write_text(json.dumps({"cases": rows, "failures": failures}, indent=2) + "\n")
    return EvalResult(report, failures, csv_path, out / f"dice_{run.split}_full.csv", json_path)


def compare_reports(a: DiceReport, b: DiceReport) -> dict[str, dict[str, float]]:
    """Signed differences a - b of every aggregate, per class and for the total row."""
    if a.class_names != b.class_names:
        raise ValueError("reports cover different classes")
    sa, sb = a.stats(), b.stats()
    return {name: {k: sa[name][k] - sb[name][k] for k in STAT_KEYS} for name in sa}
