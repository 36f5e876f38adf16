"""Command line entry point: ``unet3d <command> ...``.

Exit codes are shared by every command: 0 success, 2 usage or config
error (including missing inputs), 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from .augment import AugmentConfig
from .data import Case, DatasetIndex, PatchSource, Volume, gen_phantom, read_image, read_labels, split, write_mhd
from .evaluation import EvalRun, evaluate_split
from .inference import argmax_labels, predict_volume, upsample_labels
from .optim import TrainPlan, train
from .unet import UNetConfig, load_checkpoint

log = logging.getLogger("unet3d")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
ENV_THREADS = "UNET3D_THREADS"
ENV_LOG = "UNET3D_LOG"


class UsageError(Exception):
    """Bad arguments, invalid config or missing input; maps to exit code 2."""


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT0 = {"type": "integer", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}

CONFIG_SCHEMA = _obj({
    "model": _obj({
        "levels": _INT1,
        "base_channels": _INT1,
        "in_channels": _INT1,
        "num_classes": {"type": "integer", "minimum": 2},
        "use_batchnorm": {"type": "boolean"},
        "intensity_window": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
    }),
    "train": _obj({
        "iterations": _INT0,
        "batch_size": _INT1,
        "patch": _INT1,
        "eval_every": _INT0,
        "checkpoint_every": _INT0,
        "seed": _INT0,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "class_weights": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
        "tile_depth": {"type": ["integer", "null"], "minimum": 1},
        "overlap": _INT0,
        "recalibrate_bn": {"type": "boolean"},
    }),
    "augment": _obj({
        "enabled": {"type": "boolean"},
        "max_displacement": {"type": "number", "minimum": 0},
        "grid_spacing": _INT1,
        "max_rotation_deg": {"type": "number", "minimum": 0},
        "max_translation": {"type": "number", "minimum": 0},
        "image_fill": _NUM,
    }),
    "data": _obj({
        "index": {"type": "string"},
        "train_split": {"type": "string"},
        "test_split": {"type": "string"},
    }, required=["index"]),
    "out_dir": {"type": "string"},
}, required=["data", "out_dir"])


def validate_config(doc) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {err.message}") from None


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"config file {path} is not valid JSON: {err}") from None
    validate_config(doc)
    return doc, path.parent


def _sub(doc: dict, key: str, cls):
    known = {f.name for f in fields(cls)}
    return {k: (tuple(v) if isinstance(v, list) and k == "intensity_window" else v)
            for k, v in doc.get(key, {}).items() if k in known}


def _need_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise UsageError(f"output directory {out} is not writable: {err}") from None
    cases = []
    for i in range(args.count):
        seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        image, labels = gen_phantom(seed, args.extent, args.classes)
        cid = f"case_{i:03d}"
        write_mhd(image, out / f"{cid}.mhd")
        write_mhd(labels, out / f"{cid}_label.mhd")
        cases.append(Case(out / f"{cid}.mhd", out / f"{cid}_label.mhd", cid))
    index = DatasetIndex(cases)
    if args.count >= 2 and args.train_fraction < 1:
        index = split(index, args.train_fraction, args.seed)
    index.save(out / "index.json")
    print(f"wrote {args.count} phantom(s) and {out / 'index.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc, root = load_config(args.config)
    try:
        config = UNetConfig(**_sub(doc, "model", UNetConfig))
        augment = AugmentConfig(**_sub(doc, "augment", AugmentConfig))
        plan = TrainPlan(augment=augment, **_sub(doc, "train", TrainPlan))
    except (TypeError, ValueError) as err:
        raise UsageError(f"config error: {err}") from None
    data_cfg = doc["data"]
    index_path = _need_file(root / data_cfg["index"], "dataset index")
    try:
        index = DatasetIndex.load(index_path)
    except FileNotFoundError as err:
        raise UsageError(str(err)) from None
    train_split = data_cfg.get("train_split", "train")
    if not index.subset(train_split):
        raise UsageError(f"split {train_split!r} is empty")
    resume = _need_file(args.resume, "checkpoint") if args.resume else None

    source = PatchSource.from_index(index, plan.patch, train_split, batch_size=plan.batch_size,
                                    seed=plan.seed, augment=augment, window=config.intensity_window)
    test_cases = [(read_image(c.image), read_labels(c.label))
                  for c in index.subset(data_cfg.get("test_split", "test"))]
    result = train(config, source, plan, root / doc["out_dir"], test_cases or None, resume)
    print(f"trained to iteration {result.iteration}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    image = read_image(_need_file(args.input, "input volume"))
    if args.upsample < 1:
        raise UsageError("--upsample must be >= 1")
    probs, info = predict_volume(ckpt.params, image, args.tile_depth, args.overlap, return_info=True)
    labels = argmax_labels(probs, image.spacing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    write_mhd(labels, out / f"{stem}_labels.mhd")
    if args.upsample > 1:
        write_mhd(upsample_labels(labels, args.upsample), out / f"{stem}_labels_x{args.upsample}.mhd")
    if args.probabilities:
        for k in range(probs.shape[1]):
            write_mhd(Volume(np.ascontiguousarray(probs.data[0, k], dtype=np.float32), image.spacing),
                      out / f"{stem}_prob{k}.mhd")
    (out / f"{stem}_meta.json").write_text(json.dumps({
        "checkpoint": Path(args.checkpoint).name,
        "checkpoint_sha256": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(), "padding": info["padding"], "tile_starts": info["plan"].starts,
        "tile_depth": info["plan"].tile_depth, "overlap": info["plan"].overlap, "blend": info["plan"].blend,
    }, indent=2) + "\n")
    print(f"wrote {out / (stem + '_labels.mhd')}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt_path = _need_file(args.checkpoint, "checkpoint")
    index = DatasetIndex.load(_need_file(args.index, "dataset index"), check_files=False)
    if not index.subset(args.split):
        raise UsageError(f"split {args.split!r} is empty")
    names = args.class_names.split(",") if args.class_names else None
    run = EvalRun(ckpt_path, index, args.split, Path(args.out), names, args.tile_depth, args.overlap)
    result = evaluate_split(run)
    total = result.report.total
    print(f"{args.split}: mean foreground DSC {total['avg']:.1f} +- {total['std']:.1f}; report {result.csv_path}")
    if result.failures:
        for cid, msg in result.failures.items():
            print(f"failed case {cid}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run_suite

    results = run_suite(args.seed, print)
    bad = [k for k, v in results.items() if not v < TOLERANCE]
    print("all gradients ok" if not bad else f"failed: {', '.join(bad)}")
    return EXIT_OK if not bad else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unet3d", description="3D U-Net segmentation pipeline")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on BLAS worker threads (env {ENV_THREADS})")
    p.add_argument("--log-level", default=None, help=f"logging level name (env {ENV_LOG}, default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate synthetic phantoms and a dataset index")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--extent", type=int, default=64)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment one MetaImage volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--upsample", type=int, default=1)
    s.add_argument("--probabilities", action="store_true", help="also write per-class probability volumes")
    s.add_argument("--tile-depth", type=int, default=None)
    s.add_argument("--overlap", type=int, default=8)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--class-names", default=None, help="comma-separated foreground names")
    s.add_argument("--tile-depth", type=int, default=None)
    s.add_argument("--overlap", type=int, default=8)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _threads(args) -> int | None:
    if args.threads is not None:
        value = args.threads
    elif os.environ.get(ENV_THREADS):
        try:
            value = int(os.environ[ENV_THREADS])
        except ValueError:
            raise UsageError(f"{ENV_THREADS} must be an integer") from None
    else:
        return None
    if value < 1:
        raise UsageError("thread count must be >= 1")
    return value


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad usage
    level = (args.log_level or os.environ.get(ENV_LOG) or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args)
        if threads is None:
            return args.func(args)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
