import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from unet3d.augment import AugmentConfig
from unet3d.data import (CLASS_STEP_HU, NOISE_SIGMA, Case, DatasetIndex, LabelVolume, MetaImageError,
                         PatchSource, Volume, class_center, downsample, gen_phantom, normalize_intensity,
                         patch_source, read_image, read_labels, read_mhd, split, write_mhd)


def test_uchar_layout(tmp_path):
    (tmp_path / "a.raw").write_bytes(bytes(range(8)))
    (tmp_path / "a.mhd").write_text("NDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\n"
                                    "ElementSpacing = 1 1 1\nElementDataFile = a.raw\n")
    vol = read_mhd(tmp_path / "a.mhd")
    assert isinstance(vol, LabelVolume) and vol.voxels[1, 1, 1] == 7 and vol.voxels[0, 0, 1] == 1


@pytest.mark.parametrize("dtype", [np.int16, np.float32, np.float64])
def test_round_trip_bitwise(tmp_path, dtype):
    rng = np.random.default_rng(0)
    vox = (rng.standard_normal((3, 4, 5)) * 1000).astype(dtype)
    vol = Volume(vox, (0.5, 0.7123456789012345, 1.0 / 3))
    write_mhd(vol, tmp_path / "v.mhd")
    back = read_mhd(tmp_path / "v.mhd")
    assert back.voxels.dtype == dtype and back.voxels.tobytes() == vox.tobytes()
    assert back.spacing == vol.spacing
    before = (tmp_path / "v.mhd").read_bytes(), (tmp_path / "v.raw").read_bytes()
    write_mhd(back, tmp_path / "v.mhd")
    assert ((tmp_path / "v.mhd").read_bytes(), (tmp_path / "v.raw").read_bytes()) == before


def test_header_order_is_fixed(tmp_path):
    write_mhd(LabelVolume(np.zeros((1, 2, 3), np.uint8)), tmp_path / "l.mhd")
    keys = [line.split(" = ")[0] for line in (tmp_path / "l.mhd").read_text().splitlines()]
    assert keys == ["ObjectType", "NDims", "BinaryData", "BinaryDataByteOrderMSB", "CompressedData",
                    "ElementSpacing", "DimSize", "ElementType", "ElementDataFile"]
    assert "DimSize = 3 2 1" in (tmp_path / "l.mhd").read_text()


def test_truncated_payload_names_sizes(tmp_path):
    write_mhd(Volume(np.zeros((2, 2, 2), np.int16)), tmp_path / "t.mhd")
    (tmp_path / "t.raw").write_bytes(b"\0" * 10)
    with pytest.raises(MetaImageError, match="expected 16 bytes, got 10"):
        read_mhd(tmp_path / "t.mhd")


def test_header_errors(tmp_path):
    (tmp_path / "m.mhd").write_text("NDims = 3\nElementType = MET_UCHAR\nElementDataFile = m.raw\n")
    with pytest.raises(MetaImageError, match="DimSize"):
        read_mhd(tmp_path / "m.mhd")
    (tmp_path / "n.mhd").write_text("NDims = 2\nDimSize = 2 2\nElementType = MET_UCHAR\nElementDataFile = n.raw\n")
    with pytest.raises(MetaImageError, match="NDims"):
        read_mhd(tmp_path / "n.mhd")
    write_mhd(Volume(np.zeros((2, 2, 2), np.int16)), tmp_path / "i.mhd")
    with pytest.raises(MetaImageError):
        read_labels(tmp_path / "i.mhd")
    write_mhd(LabelVolume(np.zeros((2, 2, 2), np.uint8)), tmp_path / "l.mhd")
    with pytest.raises(MetaImageError):
        read_image(tmp_path / "l.mhd")


def test_big_endian_and_local(tmp_path):
    vox = np.arange(8, dtype=">i2").reshape(2, 2, 2)
    head = ("NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nBinaryDataByteOrderMSB = True\n"
            "ElementDataFile = LOCAL\n").encode()
    (tmp_path / "b.mha").write_bytes(head + vox.tobytes())
    assert np.array_equal(read_mhd(tmp_path / "b.mha").voxels, np.arange(8).reshape(2, 2, 2))


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2)))


def test_downsample_examples():
    img = Volume(np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32), (1, 2, 3))
    lab = LabelVolume(np.ones((3, 4, 5), np.uint8))
    i1, l1 = downsample(img, lab, 1)
    assert np.array_equal(i1.voxels, img.voxels) and np.array_equal(l1.voxels, lab.voxels)
    i4, l4 = downsample(Volume(np.full((4, 4, 4), 5, np.int16)), LabelVolume(np.zeros((4, 4, 4), np.uint8)), 4)
    assert i4.voxels.shape == (1, 1, 1) and i4.voxels.item() == 5
    block = np.array([0, 0, 0, 7, 7, 7, 7, 7], np.uint8).reshape(2, 2, 2)
    assert downsample(Volume(np.zeros((2, 2, 2))), LabelVolume(block), 2)[1].voxels.item() == 7
    tie = np.array([5, 5, 5, 5, 2, 2, 2, 2], np.uint8).reshape(2, 2, 2)
    assert downsample(Volume(np.zeros((2, 2, 2))), LabelVolume(tie), 2)[1].voxels.item() == 2
    i2, _ = downsample(img, lab, 2)
    assert i2.spacing == (2, 4, 6) and i2.voxels.shape == (1, 2, 2)
    with pytest.raises(ValueError):
        downsample(img, lab, 4)


def test_downsample_preserves_mass():
    img = Volume(np.random.default_rng(1).uniform(-500, 500, (13, 10, 9)))
    out, _ = downsample(img, LabelVolume(np.zeros((13, 10, 9), np.uint8)), 3)
    assert abs(out.voxels.mean() - img.voxels[:12, :9, :9].mean()) < 1e-4


def _index(tmp_path, n):
    cases = []
    for i in range(n):
        for suffix in ("", "_label"):
            (tmp_path / f"c{i}{suffix}.mhd").write_text("")
        cases.append(Case(tmp_path / f"c{i}.mhd", tmp_path / f"c{i}_label.mhd", f"c{i}"))
    return DatasetIndex(cases)


def test_split_examples(tmp_path):
    idx = DatasetIndex([Case(f"i{i}", f"l{i}", str(i)) for i in range(377)])
    s = split(idx, 340 / 377, seed=0)
    assert len(s.subset("train")) == 340 and len(s.subset("test")) == 37
    assert [c.split for c in split(idx, 0.5, 3).cases] == [c.split for c in split(idx, 0.5, 3).cases]
    with pytest.raises(ValueError):
        split(idx, 1.0, 0)
    with pytest.raises(ValueError):
        split(DatasetIndex(idx.cases[:1]), 0.5, 0)


def test_index_save_load(tmp_path):
    idx = split(_index(tmp_path, 4), 0.5, 1)
    idx.save(tmp_path / "index.json")
    back = DatasetIndex.load(tmp_path / "index.json")
    assert [(c.case_id, c.split) for c in back.cases] == [(c.case_id, c.split) for c in idx.cases]
    assert '"image": "c0.mhd"' in (tmp_path / "index.json").read_text()
    (tmp_path / "c1.mhd").unlink()
    with pytest.raises(FileNotFoundError):
        DatasetIndex.load(tmp_path / "index.json")
    assert len(DatasetIndex.load(tmp_path / "index.json", check_files=False)) == 4


def test_phantom_determinism_and_coverage():
    a_img, a_lab = gen_phantom(11, 32, 8)
    b_img, b_lab = gen_phantom(11, 32, 8)
    assert a_img.voxels.tobytes() == b_img.voxels.tobytes() and a_lab.voxels.tobytes() == b_lab.voxels.tobytes()
    counts = np.bincount(a_lab.voxels.ravel(), minlength=8)
    assert np.all(counts[1:] >= 0.001 * a_lab.voxels.size)
    with pytest.raises(ValueError):
        gen_phantom(0, 16, 4)
    with pytest.raises(ValueError):
        gen_phantom(0, 32, 9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_phantom_intensity_bands(seed):
    img, lab = gen_phantom(seed, 48, 8)
    for k in range(8):
        vals = img.voxels[lab.voxels == k].astype(np.float64)
        assert abs(vals.mean() - class_center(k)) < 5
        assert np.all(np.abs(vals - class_center(k)) <= 6 * NOISE_SIGMA)
    assert CLASS_STEP_HU == 40


def test_normalize_intensity():
    out = normalize_intensity(np.array([-1000, -200, 100, 400, 3000]), (-200, 400))
    assert out.dtype == np.float32 and out.tolist() == [0, 0, 0.5, 1, 1]


def test_patch_source_full_extent_and_seed():
    img, lab = gen_phantom(1, 32, 3)
    src = PatchSource([img], [lab], 32, batch_size=1, seed=0)
    x, y = src.batch(0)
    assert np.array_equal(y[0], lab.voxels)
    assert np.array_equal(x[0, 0], normalize_intensity(img.voxels))
    aug = PatchSource([img, img], [lab, lab], 16, batch_size=3, seed=4, augment=AugmentConfig())
    first, again = aug.batch(0), aug.batch(0)
    assert np.array_equal(first[0], again[0]) and np.array_equal(first[1], again[1])
    assert first[0].shape == (3, 1, 16, 16, 16) and first[0].dtype == np.float32
    with pytest.raises(ValueError):
        PatchSource([img], [lab], 33)


def test_patch_source_distinct_volumes():
    vols = [np.full((8, 8, 8), i, np.int16) for i in range(4)]
    labs = [np.zeros((8, 8, 8), np.uint8)] * 4
    src = PatchSource(vols, labs, 4, batch_size=3, seed=2)
    for it in range(50):
        picked, _ = src.sample(it)
        assert len(set(picked)) == 3


def test_patch_source_generator(tmp_path):
    img, lab = gen_phantom(2, 32, 3)
    write_mhd(img, tmp_path / "a.mhd")
    write_mhd(lab, tmp_path / "a_label.mhd")
    idx = DatasetIndex([Case(tmp_path / "a.mhd", tmp_path / "a_label.mhd", "a")])
    gen = patch_source(idx, 16, seed=1)
    x, y = next(gen)
    assert x.shape == (16, 16, 16) and y.shape == (16, 16, 16)


def test_corner_uniformity_chi_square():
    # 64 admissible corners per axis, pooled into 8 equiprobable bins
    src = PatchSource([np.zeros((72, 72, 72), np.int16)], [np.zeros((72, 72, 72), np.uint8)], 9,
                      batch_size=1, seed=2024)
    corners = np.array([src.sample(i)[1][0] for i in range(1000)])
    for axis in range(3):
        counts = np.bincount(corners[:, axis] // 8, minlength=8)
        assert chisquare(counts).pvalue > 0.01


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_phantom_labels_in_range(seed):
    _, lab = gen_phantom(seed, 32, 5)
    assert lab.voxels.max() <= 4
