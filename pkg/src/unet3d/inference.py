"""Whole-volume prediction with overlapping z tiles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabelVolume, Volume, normalize_intensity
from .layers import softmax_forward
from .tensor import Tensor
from .unet import ParamStore, forward


@dataclass
class TilePlan:
    depth: int
    tile_depth: int
    overlap: int
    starts: list[int] = field(default_factory=list)
    blend: str = "linear-ramp"

    def ramp(self, start: int) -> np.ndarray:
        """Unnormalized weight of each slice of the tile beginning at ``start``."""
        t, ov = self.tile_depth, self.overlap
        j = np.arange(t, dtype=np.float64)
        w = np.ones(t)
        if ov > 0:
            if start > 0:
                w = np.minimum(w, (j + 1) / (ov + 1))
            if start + t < self.depth:
                w = np.minimum(w, (t - j) / (ov + 1))
        return w

    def weights(self) -> np.ndarray:
        """(tiles, depth) blending weights, normalized to sum to 1 per slice."""
        w = np.zeros((len(self.starts), self.depth))
        for i, s in enumerate(self.starts):
            w[i, s:s + self.tile_depth] = self.ramp(s)
        return w / w.sum(axis=0, keepdims=True)


def plan_tiles(depth: int, tile_depth: int, overlap: int, divisor: int = 1) -> TilePlan:
    """Starts 0, s, 2s, ... with stride tile_depth - overlap; the last start is clamped."""
    if not 0 < tile_depth <= depth:
        raise ValueError(f"tile depth {tile_depth} must lie in [1, {depth}]")
    if not 0 <= overlap < tile_depth:
        raise ValueError(f"overlap {overlap} must lie in [0, {tile_depth})")
    if tile_depth % divisor or overlap % divisor:
        raise ValueError(f"tile depth and overlap must be multiples of {divisor}")
    stride = tile_depth - overlap
    starts = []
    s = 0
    while s + tile_depth < depth:
        starts.append(s)
        s += stride
    starts.append(depth - tile_depth)
    return TilePlan(depth, tile_depth, overlap, starts)


def _pad_amounts(extent: int, divisor: int) -> tuple[int, int]:
    total = (-extent) % divisor
    return total // 2, total - total // 2


def predict_volume(params: ParamStore, volume: Volume, tile_depth: int | None = None,
                   overlap: int = 8, return_info: bool = False):
    """Per-voxel class probabilities, shape (1, L, d, h, w).

    Extents that are not multiples of the network divisor are reflect-padded
    and cropped back afterwards. Tile outputs are softmaxed and combined by
    normalized linear ramps over the overlaps, in tile order.
    """
    cfg = params.config
    div = cfg.divisor
    vox = np.asarray(volume.voxels)
    if min(vox.shape) < div:
        raise ValueError(f"volume {vox.shape} is smaller than the minimum network input {div}")
    dtype = params["head.w"].dtype
    x = normalize_intensity(vox, cfg.intensity_window).astype(dtype)
    pads = [_pad_amounts(e, div) for e in vox.shape]
    if any(sum(p) for p in pads):
        x = np.pad(x, pads, mode="reflect")
    depth = x.shape[0]
    if tile_depth is None:
        tile_depth = max(div, 64 // div * div)
    tile_depth = min(tile_depth, depth)
    if tile_depth == depth:
        overlap = 0
    plan = plan_tiles(depth, tile_depth, overlap, div)

    L = cfg.num_classes
    acc = np.zeros((L,) + x.shape, dtype=np.float64)
    wsum = np.zeros(depth, dtype=np.float64)
    for s in plan.starts:
        tile = Tensor(x[None, None, s:s + tile_depth])
        probs = softmax_forward(forward(params, tile, mode="infer").data)[0]
        w = plan.ramp(s)
        acc[:, s:s + tile_depth] += w[None, :, None, None] * probs
        wsum[s:s + tile_depth] += w
    out = acc / wsum[None, :, None, None]
    crop = tuple(slice(b, b + e) for (b, _), e in zip(pads, vox.shape))
    out = out[(slice(None),) + crop].astype(dtype)
    result = Tensor(out[None])
    if return_info:
        return result, {"plan": plan, "padding": pads}
    return result


def argmax_labels(prob, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Most probable class per voxel; ties go to the smallest class id."""
    p = np.asarray(getattr(prob, "data", prob))
    if p.ndim == 5:
        if p.shape[0] != 1:
            raise ValueError("argmax_labels expects a single volume")
        p = p[0]
    if p.shape[0] < 2:
        raise ValueError("need at least two classes")
    return LabelVolume(np.argmax(p, axis=0).astype(np.uint8), spacing)


def upsample_labels(labels: LabelVolume, factor: int) -> LabelVolume:
    """Nearest-neighbour block replication; spacing shrinks by ``factor``."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    v = labels.voxels
    for ax in range(3):
        v = np.repeat(v, factor, axis=ax)
    return LabelVolume(v, tuple(s / factor for s in labels.spacing))
