import numpy as np
import pytest

from unet3d.augment import (AugmentConfig, BSplineField, RigidParams, augment_patch, bspline_displacement,
                            bspline_weights, control_grid_shape, dense_displacement, sample_field,
                            sample_rigid, warp)
from unet3d.data import gen_phantom


def test_sample_field_bounds_and_moments():
    field = sample_field((64, 64, 64), np.random.default_rng(0))
    assert field.control.shape == control_grid_shape((64, 64, 64), 24) + (3,)
    comps = np.concatenate([sample_field((64, 64, 64), np.random.default_rng(s)).control.ravel()
                            for s in range(160)])
    assert comps.size >= 100_000
    assert comps.min() >= -4 and comps.max() <= 4
    assert -0.05 < comps.mean() < 0.05


def test_sample_field_is_seeded():
    a = sample_field((32, 40, 48), np.random.default_rng(9)).control
    b = sample_field((32, 40, 48), np.random.default_rng(9)).control
    assert np.array_equal(a, b)


def test_control_grid_covers_volume():
    # every voxel needs control points cell .. cell+3
    for e in (1, 23, 24, 25, 64, 100):
        n = control_grid_shape((e, e, e), 24)[0]
        assert (e - 1) // 24 + 3 < n


def test_rigid_ranges():
    rng = np.random.default_rng(1)
    draws = [sample_rigid(rng) for _ in range(20000)]
    angles = np.array([d.angle_deg for d in draws])
    shifts = np.array([d.translation for d in draws])
    assert angles.min() >= -20 and angles.max() <= 20
    assert shifts.min() >= -20 and shifts.max() <= 20
    assert angles.min() < -19.9 and angles.max() > 19.9


def test_bspline_basis_partition_of_unity():
    t = np.linspace(0, 1, 101, endpoint=False)
    w = bspline_weights(t)
    assert np.allclose(w.sum(axis=-1), 1, atol=1e-14) and np.all(w >= 0)


def test_dense_bspline_bounded_by_max():
    rng = np.random.default_rng(2)
    for _ in range(5):
        field = sample_field((40, 30, 50), rng)
        assert np.abs(bspline_displacement(field, (40, 30, 50))).max() <= 4 + 1e-6
    extreme = BSplineField(np.full(control_grid_shape((30, 30, 30), 24) + (3,), 4.0))
    assert np.allclose(bspline_displacement(extreme, (30, 30, 30)), 4.0)


def test_displacement_examples():
    zero = BSplineField(np.zeros(control_grid_shape((5, 6, 7), 24) + (3,)))
    assert not dense_displacement(zero, RigidParams(), (5, 6, 7)).any()
    shift = dense_displacement(zero, RigidParams(0.0, (0.0, 0.0, 3.0)), (5, 6, 7))
    assert np.array_equal(shift[..., 2], np.full((5, 6, 7), 3.0)) and not shift[..., :2].any()
    rot = dense_displacement(None, RigidParams(90.0), (1, 3, 3), center=(0, 0, 0))
    mapped = np.array([0, 0, 1]) + rot[0, 0, 1]        # point (y=0, x=1)
    assert np.allclose(mapped, [0, 1, 0], atol=1e-6)


def test_warp_identity_and_integer_shift():
    img, lab = gen_phantom(3, 32, 4)
    zero = np.zeros(img.voxels.shape + (3,))
    wi, wl = warp(img, lab, zero)
    assert np.array_equal(wi, img.voxels) and np.array_equal(wl, lab.voxels)
    disp = np.zeros(img.voxels.shape + (3,))
    disp[..., 1] = 2
    _, sl = warp(img, lab, disp)
    assert np.array_equal(sl[:, :-2], lab.voxels[:, 2:]) and not sl[:, -2:].any()


def test_trilinear_half_voxel_ramp():
    x = np.arange(9, dtype=np.float64)
    ramp = np.broadcast_to(3 * x + 1, (4, 5, 9)).copy()
    disp = np.zeros((4, 5, 9, 3))
    disp[..., 2] = 0.5
    out, _ = warp(ramp, np.zeros((4, 5, 9), np.uint8), disp)
    assert np.max(np.abs(out[..., :-1] - (3 * (x[:-1] + 0.5) + 1))) < 1e-6


def test_out_of_bounds_fill():
    img = np.full((2, 2, 2), 50, np.int16)
    lab = np.full((2, 2, 2), 3, np.uint8)
    disp = np.full((2, 2, 2, 3), 10.0)
    wi, wl = warp(img, lab, disp)
    assert np.all(wi == -1000) and not wl.any()


def test_zero_randomness_is_bitwise_identity():
    img, lab = gen_phantom(4, 32, 5)
    cfg = AugmentConfig(max_displacement=0.0, max_rotation_deg=0.0, max_translation=0.0)
    for dtype in (np.int16, np.float32):
        out_i, out_l = augment_patch(img.voxels.astype(dtype), lab.voxels, cfg, np.random.default_rng(0))
        assert out_i.dtype == dtype
        assert np.array_equal(out_i, img.voxels.astype(dtype)) and np.array_equal(out_l, lab.voxels)


def test_augment_patch_disabled_and_seeded():
    img, lab = gen_phantom(5, 32, 4)
    off = augment_patch(img.voxels, lab.voxels, AugmentConfig(enabled=False), np.random.default_rng(0),
                        origin=(2, 3, 4), out_shape=(16, 16, 16))
    assert np.array_equal(off[0], img.voxels[2:18, 3:19, 4:20])
    a = augment_patch(img.voxels, lab.voxels, AugmentConfig(), np.random.default_rng(7))
    b = augment_patch(img.voxels, lab.voxels, AugmentConfig(), np.random.default_rng(7))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("seed", range(5))
def test_labels_never_invented(seed):
    img, lab = gen_phantom(seed, 32, 6)
    sub = np.where(lab.voxels == 3, 0, lab.voxels).astype(np.uint8)   # drop one class
    _, out = augment_patch(img.voxels, sub, AugmentConfig(), np.random.default_rng(seed),
                           origin=(4, 4, 4), out_shape=(24, 24, 24))
    assert set(np.unique(out)) <= set(np.unique(sub)) | {0}
