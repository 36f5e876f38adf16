"""3D U-Net assembly: configuration, parameters, forward pass, checkpoints.

Channel plan for ``levels`` resolution levels and base width ``b``
(full scale: 4 levels, b = 32, 8 classes)::

    analysis level l:   c_prev -> b*2**(l-1) -> b*2**l      (two 3^3 convs)
    synthesis level l:  2^3 up-conv keeping b*2**(l+1) channels,
                        concat [encoder skip, up-conv output],
                        3*b*2**l -> b*2**l -> b*2**l        (two 3^3 convs)
    head:               1^3 conv 2*b -> num_classes

With batch normalization enabled, every convolution (including up-convs
and the head) is followed by BN; ReLU follows the 3^3 convs only.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .layers import BN_EPS, BN_MOMENTUM
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"U3DCKPT1"


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    base_channels: int = 32
    in_channels: int = 1
    num_classes: int = 8
    use_batchnorm: bool = True
    # HU window mapped linearly onto [0, 1] before the first layer
    intensity_window: tuple[float, float] = (-200.0, 400.0)

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError(f"invalid config {self}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        lo, hi = self.intensity_window
        if not hi > lo:
            raise ValueError("intensity_window must be (low, high) with high > low")
        object.__setattr__(self, "intensity_window", (float(lo), float(hi)))

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_window"] = list(self.intensity_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        if "intensity_window" in d:
            d["intensity_window"] = tuple(d["intensity_window"])
        return cls(**d)


@dataclass
class ParamStore:
    """Named parameter tensors in a fixed order.

    BN running statistics live here too but are not trainable.
    """

    config: UNetConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    trainable: set = field(default_factory=set)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        old = self.tensors.get(name)
        if old is not None and (old.shape != value.shape or old.dtype != value.dtype):
            raise ShapeError(f"{name}: cannot replace {old} with {value}")
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n in self.trainable]

    def add(self, name: str, value: Tensor, trainable: bool = True) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        self.tensors[name] = value
        if trainable:
            self.trainable.add(name)

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, OrderedDict(self.tensors), set(self.trainable))


def count_params(params: ParamStore) -> int:
    return sum(params[n].size for n in params.trainable_names())


def _layer_plan(cfg: UNetConfig):
    """Yield (prefix, kind, c_in, c_out, kernel, relu) in forward order."""
    b = cfg.base_channels
    prev = cfg.in_channels
    for lvl in range(1, cfg.levels + 1):
        mid, out = b * 2 ** (lvl - 1), b * 2 ** lvl
        yield f"enc{lvl}.conv1", "conv", prev, mid, 3, True
        yield f"enc{lvl}.conv2", "conv", mid, out, 3, True
        prev = out
    for lvl in range(cfg.levels - 1, 0, -1):
        yield f"up{lvl}", "tconv", prev, prev, 2, False
        c = b * 2 ** lvl
        yield f"dec{lvl}.conv1", "conv", prev + c, c, 3, True
        yield f"dec{lvl}.conv2", "conv", c, c, 3, True
        prev = c
    yield "head", "conv", prev, cfg.num_classes, 1, False


def build(config: UNetConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Create He-initialized weights (zero biases) for ``config``.

    fan_in is c_in * k**3 for convolutions and c_in for the 2^3 up-convs,
    whose output voxels each see a single kernel tap per input channel.
    """
    rng = np.random.default_rng(seed)
    params = ParamStore(config)
    for prefix, kind, ci, co, k, _ in _layer_plan(config):
        fan_in = ci if kind == "tconv" else ci * k ** 3
        w = rng.standard_normal((co, ci, k, k, k)) * np.sqrt(2.0 / fan_in)
        params.add(f"{prefix}.w", Tensor(w.astype(dtype)))
        params.add(f"{prefix}.b", Tensor(np.zeros((1, co, 1, 1, 1), dtype)))
        if config.use_batchnorm:
            one = np.ones((1, co, 1, 1, 1), dtype)
            zero = np.zeros((1, co, 1, 1, 1), dtype)
            params.add(f"{prefix}.bn.gamma", Tensor(one))
            params.add(f"{prefix}.bn.beta", Tensor(zero))
            params.add(f"{prefix}.bn.running_mean", Tensor(zero), trainable=False)
            params.add(f"{prefix}.bn.running_var", Tensor(one), trainable=False)
    return params


def check_input(config: UNetConfig, shape) -> None:
    if len(shape) != 5 or shape[1] != config.in_channels:
        raise ShapeError(f"expected (n, {config.in_channels}, d, h, w) input, got {shape}")
    div = config.divisor
    if any(s % div for s in shape[2:]):
        raise ShapeError(f"spatial extents {shape[2:]} must be divisible by {div}")


def record_forward(params: ParamStore, x: Tensor, tape: Tape, mode: str = "train", bn_stats: dict | None = None):
    """Record the network on ``tape``.

    Returns (logits node id, {parameter name: leaf id}) for trainable leaves.
    In train mode BN running statistics in ``params`` are updated in place,
    and the batch (mean, var) of every BN layer is stored in ``bn_stats``
    when given.
    """
    cfg = params.config
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    check_input(cfg, x.shape)
    leaves: dict[str, int] = {}

    def leaf(name):
        if name not in leaves:
            leaves[name] = tape.leaf(params[name], requires_grad=name in params.trainable)
        return leaves[name]

    def layer(h, prefix, kind, relu):
        op = "tconv3d" if kind == "tconv" else "conv3d"
        h = tape.record(op, [h, leaf(f"{prefix}.w"), leaf(f"{prefix}.b")])
        if cfg.use_batchnorm:
            bn = f"{prefix}.bn"
            if mode == "train":
                h = tape.record("batchnorm_train", [h, leaf(f"{bn}.gamma"), leaf(f"{bn}.beta")])
                _, _, mean, var = tape.nodes[h].saved
                if bn_stats is not None:
                    bn_stats[bn] = (mean, var)
                for stat, batch in (("running_mean", mean), ("running_var", var)):
                    old = params[f"{bn}.{stat}"].data
                    params[f"{bn}.{stat}"] = Tensor(
                        (BN_MOMENTUM * old + (1 - BN_MOMENTUM) * batch).astype(old.dtype))
            else:
                h = tape.record("batchnorm_infer", [
                    h, leaf(f"{bn}.gamma"), leaf(f"{bn}.beta"),
                    leaf(f"{bn}.running_mean"), leaf(f"{bn}.running_var")], eps=BN_EPS)
        if relu:
            h = tape.record("relu", [h])
        return h

    plan = {p: (kind, relu) for p, kind, _, _, _, relu in _layer_plan(cfg)}
    h = tape.constant(x)
    skips = []
    for lvl in range(1, cfg.levels + 1):
        if lvl > 1:
            h = tape.record("maxpool3d", [h])
        for conv in ("conv1", "conv2"):
            h = layer(h, f"enc{lvl}.{conv}", *plan[f"enc{lvl}.{conv}"])
        skips.append(h)
    for lvl in range(cfg.levels - 1, 0, -1):
        h = layer(h, f"up{lvl}", *plan[f"up{lvl}"])
        h = tape.record("concat", [skips[lvl - 1], h])
        for conv in ("conv1", "conv2"):
            h = layer(h, f"dec{lvl}.{conv}", *plan[f"dec{lvl}.{conv}"])
    h = layer(h, "head", *plan["head"])
    return h, {n: i for n, i in leaves.items() if n in params.trainable}


def forward(params: ParamStore, x: Tensor, tape: Tape | None = None, mode: str = "infer") -> Tensor:
    """Logits with the spatial extents of ``x`` and ``num_classes`` channels."""
    tape = Tape() if tape is None else tape
    out, _ = record_forward(params, x, tape, mode)
    return tape.value(out)


def receptive_field_radius(config: UNetConfig) -> int:
    """Largest offset (in input voxels, along one axis) that can influence an output voxel.

    Computed by propagating dependency intervals backwards through the
    architecture for every output phase modulo the coarsest stride.
    """
    def enc(lvl, lo, hi):
        lo, hi = lo - 2, hi + 2
        if lvl == 1:
            return lo, hi
        return enc(lvl - 1, 2 * lo, 2 * hi + 1)

    def dec(lvl, lo, hi):
        lo, hi = lo - 2, hi + 2
        coarse = enc if lvl + 1 == config.levels else dec
        below = coarse(lvl + 1, lo // 2, hi // 2)
        skip = enc(lvl, lo, hi)
        return min(below[0], skip[0]), max(below[1], skip[1])

    radius = 0
    for z in range(2 ** config.levels):
        lo, hi = enc(1, z, z) if config.levels == 1 else dec(1, z, z)
        radius = max(radius, z - lo, hi - z)
    return radius


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: ParamStore
    iteration: int = 0
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, params: ParamStore, iteration: int = 0,
                    tensors: dict | None = None, extra: dict | None = None) -> None:
    """Write magic, manifest length (u64 LE), JSON manifest, then raw LE payloads."""
    entries = []
    payloads = []
    offset = 0
    items = [("param", n, t) for n, t in params.items()]
    items += [("extra", n, t) for n, t in (tensors or {}).items()]
    for group, name, t in items:
        data = t.data.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entries.append({"group": group, "name": name, "shape": list(t.shape),
                        "dtype": t.dtype.name, "offset": offset, "nbytes": len(data),
                        "trainable": name in params.trainable if group == "param" else False})
        payloads.append(data)
        offset += len(data)
    manifest = {"format": 1, "config": params.config.to_dict(), "iteration": int(iteration),
                "extra": extra or {}, "tensors": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for p in payloads:
            fh.write(p)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    base = 16 + mlen
    params = ParamStore(UNetConfig.from_dict(manifest["config"]))
    extras = OrderedDict()
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise ValueError(f"{path}: payload for {e['name']} is truncated")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=start)
        t = Tensor(arr.astype(np.dtype(e["dtype"])).reshape(e["shape"]))
        if e["group"] == "param":
            params.add(e["name"], t, trainable=e["trainable"])
        else:
            extras[e["name"]] = t
    return Checkpoint(params, manifest["iteration"], extras, manifest["extra"])
