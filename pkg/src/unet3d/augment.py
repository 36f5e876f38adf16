"""Spatial augmentation: cubic B-spline free-form deformation plus a rigid
in-plane rotation and translation, composed into one displacement field
and applied by a single backward warp.

Vectors are in (z, y, x) voxel order throughout. Rotation is about the z
axis (the axial plane) around the volume center.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_FILL = -1000.0
LABEL_FILL = 0


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    max_displacement: float = 4.0
    grid_spacing: int = 24
    max_rotation_deg: float = 20.0
    max_translation: float = 20.0
    image_fill: float = IMAGE_FILL


@dataclass
class BSplineField:
    control: np.ndarray  # (gz, gy, gx, 3)
    spacing: int = 24
    max_displacement: float = 4.0


@dataclass
class RigidParams:
    angle_deg: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)


def control_grid_shape(shape, spacing: int) -> tuple[int, int, int]:
    # knots at -spacing, 0, spacing, ... plus two beyond the far edge
    return tuple((int(e) - 1) // spacing + 4 for e in shape)


def sample_field(shape, rng: np.random.Generator, spacing: int = 24,
                 max_displacement: float = 4.0) -> BSplineField:
    """Control displacements drawn per component from U(-max, max)."""
    grid = control_grid_shape(shape, spacing)
    ctrl = rng.uniform(-max_displacement, max_displacement, size=grid + (3,))
    return BSplineField(ctrl, spacing, max_displacement)


def sample_rigid(rng: np.random.Generator, max_rotation_deg: float = 20.0,
                 max_translation: float = 20.0) -> RigidParams:
    angle = rng.uniform(-max_rotation_deg, max_rotation_deg)
    shift = rng.uniform(-max_translation, max_translation, size=3)
    return RigidParams(float(angle), tuple(float(s) for s in shift))


def bspline_weights(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline basis values for fractional positions ``t`` in [0, 1)."""
    t = np.asarray(t, dtype=np.float64)
    t2, t3 = t * t, t * t * t
    return np.stack([
        (1 - t) ** 3 / 6,
        (3 * t3 - 6 * t2 + 4) / 6,
        (-3 * t3 + 3 * t2 + 3 * t + 1) / 6,
        t3 / 6,
    ], axis=-1)


def _axis_matrix(n: int, spacing: int, ncontrol: int) -> np.ndarray:
    u = np.arange(n) / spacing
    cell = np.floor(u).astype(int)
    w = bspline_weights(u - cell)
    m = np.zeros((n, ncontrol))
    for j in range(4):
        m[np.arange(n), cell + j] = w[:, j]
    return m


def bspline_displacement(field: BSplineField, shape) -> np.ndarray:
    """Dense (d, h, w, 3) displacement interpolated from the control grid."""
    gz, gy, gx, _ = field.control.shape
    mz = _axis_matrix(shape[0], field.spacing, gz)
    my = _axis_matrix(shape[1], field.spacing, gy)
    mx = _axis_matrix(shape[2], field.spacing, gx)
    out = np.tensordot(mz, field.control, axes=(1, 0))
    out = np.tensordot(my, out, axes=(1, 1)).transpose(1, 0, 2, 3)
    out = np.tensordot(mx, out, axes=(1, 2)).transpose(1, 2, 0, 3)
    return out


def dense_displacement(field: BSplineField | None, rigid: RigidParams, shape, center=None) -> np.ndarray:
    """disp(v) = T_rigid(v) - v + B(v), with T rotating about ``center`` then translating."""
    d, h, w = shape
    if center is None:
        center = ((d - 1) / 2, (h - 1) / 2, (w - 1) / 2)
    cz, cy, cx = center
    z, y, x = np.meshgrid(np.arange(d, dtype=np.float64), np.arange(h, dtype=np.float64),
                          np.arange(w, dtype=np.float64), indexing="ij")
    theta = np.deg2rad(rigid.angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    ry, rx = y - cy, x - cx
    tz, ty, tx = rigid.translation
    disp = np.empty((d, h, w, 3))
    disp[..., 0] = tz
    disp[..., 1] = (sin * rx + cos * ry + cy + ty) - y
    disp[..., 2] = (cos * rx - sin * ry + cx + tx) - x
    if field is not None:
        disp += bspline_displacement(field, shape)
    return disp


def _sample_coords(disp, origin):
    d, h, w, _ = disp.shape
    grid = np.stack(np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij"), axis=-1)
    return grid + np.asarray(origin, dtype=np.float64) + disp


def trilinear(volume: np.ndarray, coords: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``volume`` at fractional (z, y, x) ``coords``; corners outside read ``fill``."""
    shape = volume.shape
    base = np.floor(coords).astype(np.intp)
    frac = coords - base
    out = np.zeros(coords.shape[:-1], dtype=np.float64)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                idx = [base[..., a] + o for a, o in enumerate((dz, dy, dx))]
                valid = np.ones(out.shape, dtype=bool)
                for a in range(3):
                    valid &= (idx[a] >= 0) & (idx[a] < shape[a])
                    idx[a] = np.clip(idx[a], 0, shape[a] - 1)
                vals = np.where(valid, volume[idx[0], idx[1], idx[2]], fill)
                weight = ((frac[..., 0] if dz else 1 - frac[..., 0])
                          * (frac[..., 1] if dy else 1 - frac[..., 1])
                          * (frac[..., 2] if dx else 1 - frac[..., 2]))
                out += weight * vals
    return out


def nearest(volume: np.ndarray, coords: np.ndarray, fill) -> np.ndarray:
    idx = np.floor(coords + 0.5).astype(np.intp)
    valid = np.ones(coords.shape[:-1], dtype=bool)
    for a in range(3):
        valid &= (idx[..., a] >= 0) & (idx[..., a] < volume.shape[a])
    clipped = [np.clip(idx[..., a], 0, volume.shape[a] - 1) for a in range(3)]
    return np.where(valid, volume[clipped[0], clipped[1], clipped[2]], fill).astype(volume.dtype)


def warp(image: np.ndarray, labels: np.ndarray, disp: np.ndarray, origin=(0, 0, 0),
         image_fill: float = IMAGE_FILL):
    """Backward warp: out(v) = in(origin + v + disp(v)).

    Image trilinear, labels nearest neighbour; the output takes the extents
    of ``disp``. Images come back in their input dtype.
    """
    image = np.asarray(getattr(image, "voxels", image))
    labels = np.asarray(getattr(labels, "voxels", labels))
    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ")
    coords = _sample_coords(disp, origin)
    img = trilinear(image, coords, image_fill)
    if np.issubdtype(image.dtype, np.integer):
        img = np.rint(img)
    return img.astype(image.dtype), nearest(labels, coords, LABEL_FILL)


def augment_patch(image: np.ndarray, labels: np.ndarray, config: AugmentConfig,
                  rng: np.random.Generator, origin=(0, 0, 0), out_shape=None):
    """Draw one B-spline field and one rigid transform and apply them in a single warp.

    ``origin``/``out_shape`` select the output window inside the input, so a
    patch can be sampled straight from a full volume.
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    out_shape = tuple(image.shape) if out_shape is None else tuple(out_shape)
    if not config.enabled:
        sl = tuple(slice(o, o + s) for o, s in zip(origin, out_shape))
        return image[sl].copy(), labels[sl].copy()
    field = sample_field(out_shape, rng, config.grid_spacing, config.max_displacement)
    rigid = sample_rigid(rng, config.max_rotation_deg, config.max_translation)
    disp = dense_displacement(field, rigid, out_shape)
    return warp(image, labels, disp, origin, config.image_fill)
