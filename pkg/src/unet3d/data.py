"""Volumes, MetaImage I/O, dataset indexing, phantoms and training patches.

Voxel arrays are indexed (z, y, x) with x fastest; spacing tuples follow
the same order. MetaImage headers list sizes and spacings x-first, so the
reader and writer reverse them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_patch

MET_TYPES = {
    "MET_UCHAR": np.dtype(np.uint8),
    "MET_SHORT": np.dtype(np.int16),
    "MET_FLOAT": np.dtype(np.float32),
    "MET_DOUBLE": np.dtype(np.float64),
}
_MET_NAMES = {v: k for k, v in MET_TYPES.items()}


class MetaImageError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive extents, got {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class LabelVolume(Volume):
    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.voxels.dtype, np.integer):
            raise TypeError(f"labels must be integers, got {self.voxels.dtype}")
        if self.voxels.size and (self.voxels.min() < 0 or self.voxels.max() > 255):
            raise ValueError("label values must lie in [0, 255]")
        self.voxels = self.voxels.astype(np.uint8, copy=False)


# ---------------------------------------------------------------------------
# MetaImage


def _raw_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def write_mhd(volume: Volume, path) -> None:
    """Write ``path`` (.mhd header) and its .raw payload next to it."""
    path = Path(path)
    vox = np.asarray(volume.voxels)
    if vox.ndim != 3 or min(vox.shape) < 1:
        raise MetaImageError(f"refusing to write volume of shape {vox.shape}")
    dtype = np.dtype(np.uint8) if isinstance(volume, LabelVolume) else vox.dtype
    if dtype not in _MET_NAMES:
        raise MetaImageError(f"no MetaImage element type for {dtype}")
    raw = _raw_path(path)
    d, h, w = vox.shape
    sz, sy, sx = volume.spacing
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"ElementSpacing = {sx!r} {sy!r} {sz!r}",
        f"DimSize = {w} {h} {d}",
        f"ElementType = {_MET_NAMES[dtype]}",
        f"ElementDataFile = {raw.name}",
    ]
    raw.write_bytes(np.ascontiguousarray(vox, dtype=dtype.newbyteorder("<")).tobytes())
    path.write_text("\n".join(header) + "\n")


def _parse_header(text: str) -> dict:
    fields = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def read_mhd(path) -> Volume:
    """Read a 3-D MetaImage. MET_UCHAR files come back as :class:`LabelVolume`."""
    path = Path(path)
    blob = path.read_bytes()
    # for .mha with ElementDataFile = LOCAL the payload follows the header line
    marker = blob.find(b"ElementDataFile")
    if marker < 0:
        raise MetaImageError(f"{path}: missing required key ElementDataFile")
    eol = blob.find(b"\n", marker)
    eol = len(blob) if eol < 0 else eol + 1
    fields = _parse_header(blob[:eol].decode("latin-1"))
    for key in ("NDims", "DimSize", "ElementType", "ElementDataFile"):
        if key not in fields:
            raise MetaImageError(f"{path}: missing required key {key}")
    if int(fields["NDims"]) != 3:
        raise MetaImageError(f"{path}: NDims = {fields['NDims']}, only 3 is supported")
    if fields.get("CompressedData", "False").lower() == "true":
        raise MetaImageError(f"{path}: compressed payloads are not supported")
    try:
        dtype = MET_TYPES[fields["ElementType"]]
    except KeyError:
        raise MetaImageError(f"{path}: unsupported ElementType {fields['ElementType']}") from None
    w, h, d = (int(v) for v in fields["DimSize"].split())
    spacing = fields.get("ElementSpacing", fields.get("ElementSize", "1 1 1"))
    sx, sy, sz = (float(v) for v in spacing.split())
    msb = fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    dtype = dtype.newbyteorder(">" if msb.lower() == "true" else "<")

    if fields["ElementDataFile"] == "LOCAL":
        payload = blob[eol:]
    else:
        payload = (path.parent / fields["ElementDataFile"]).read_bytes()
    expected = w * h * d * dtype.itemsize
    if len(payload) != expected:
        raise MetaImageError(f"{path}: payload size mismatch, expected {expected} bytes, got {len(payload)}")
    vox = np.frombuffer(payload, dtype=dtype).reshape(d, h, w).astype(dtype.newbyteorder("="))
    cls = LabelVolume if dtype == np.uint8 else Volume
    return cls(vox, (sz, sy, sx))


def read_image(path) -> Volume:
    vol = read_mhd(path)
    if isinstance(vol, LabelVolume):
        raise MetaImageError(f"{path}: expected an image, found MET_UCHAR labels")
    return vol


def read_labels(path) -> LabelVolume:
    vol = read_mhd(path)
    if not isinstance(vol, LabelVolume):
        raise MetaImageError(f"{path}: expected MET_UCHAR labels, found {vol.voxels.dtype}")
    return vol


# ---------------------------------------------------------------------------
# resampling


def downsample(image: Volume, labels: LabelVolume, factor: int):
    """Block-mean the image and majority-vote the labels over factor^3 blocks.

    Trailing partial blocks are dropped; label ties go to the smallest class.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ")
    if min(image.shape) < factor:
        raise ValueError(f"extents {image.shape} smaller than factor {factor}")
    if factor == 1:
        return Volume(image.voxels.copy(), image.spacing), LabelVolume(labels.voxels.copy(), labels.spacing)
    f = factor
    out = tuple(s // f for s in image.shape)
    sl = tuple(slice(0, o * f) for o in out)

    def blocks(a):
        b = a[sl].reshape(out[0], f, out[1], f, out[2], f).transpose(0, 2, 4, 1, 3, 5)
        return b.reshape(out + (f ** 3,))

    img = blocks(image.voxels.astype(np.float64)).mean(axis=-1).astype(np.float32)
    lab = blocks(labels.voxels)
    counts = np.stack([(lab == c).sum(axis=-1) for c in range(int(lab.max()) + 1)], axis=-1)
    votes = np.argmax(counts, axis=-1).astype(np.uint8)
    spacing = tuple(s * f for s in image.spacing)
    return Volume(img, spacing), LabelVolume(votes, tuple(s * f for s in labels.spacing))


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class Case:
    image: Path
    label: Path
    case_id: str
    split: str = "train"


@dataclass
class DatasetIndex:
    cases: list[Case] = field(default_factory=list)

    def __len__(self):
        return len(self.cases)

    def subset(self, split: str) -> list[Case]:
        return [c for c in self.cases if c.split == split]

    def save(self, path) -> None:
        path = Path(path)
        root = path.parent.resolve()

        def rel(p):
            p = Path(p).resolve()
            try:
                return p.relative_to(root).as_posix()
            except ValueError:
                return str(p)

        rows = [{"image": rel(c.image), "label": rel(c.label), "case_id": c.case_id, "split": c.split}
                for c in self.cases]
        path.write_text(json.dumps(rows, indent=2) + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetIndex":
        path = Path(path)
        rows = json.loads(path.read_text())
        cases = []
        seen = set()
        for row in rows:
            case = Case(path.parent / row["image"], path.parent / row["label"],
                        str(row["case_id"]), row.get("split", "train"))
            if case.case_id in seen:
                raise ValueError(f"duplicate case id {case.case_id}")
            seen.add(case.case_id)
            if check_files:
                for p in (case.image, case.label):
                    if not p.exists():
                        raise FileNotFoundError(f"case {case.case_id}: {p} does not exist")
            cases.append(case)
        return cls(cases)


def split(index: DatasetIndex, train_fraction: float, seed: int) -> DatasetIndex:
    """Seeded shuffle, then the first round(fraction * n) cases train, the rest test."""
    n = len(index)
    if n < 2:
        raise ValueError("need at least two cases to split")
    n_train = int(round(train_fraction * n))
    if not 0 < n_train < n:
        raise ValueError(f"train fraction {train_fraction} leaves an empty split for {n} cases")
    order = np.random.default_rng(seed).permutation(n)
    train = set(order[:n_train].tolist())
    return DatasetIndex([Case(c.image, c.label, c.case_id, "train" if i in train else "test")
                         for i, c in enumerate(index.cases)])


# ---------------------------------------------------------------------------
# phantoms

BACKGROUND_HU = -100.0
CLASS_STEP_HU = 40.0
NOISE_SIGMA = 10.0
MIN_CLASS_FRACTION = 0.001


def class_center(k: int) -> float:
    return BACKGROUND_HU if k == 0 else CLASS_STEP_HU * k


def _ellipsoid(rng, grid, extent):
    center = rng.uniform(0.2 * extent, 0.8 * extent, size=3)
    axes = rng.uniform(0.08 * extent, 0.22 * extent, size=3)
    # random rotation about z keeps shapes organ-like in the axial plane
    theta = rng.uniform(0, np.pi)
    z, y, x = (g - c for g, c in zip(grid, center))
    u = np.cos(theta) * x - np.sin(theta) * y
    v = np.sin(theta) * x + np.cos(theta) * y
    return (z / axes[0]) ** 2 + (v / axes[1]) ** 2 + (u / axes[2]) ** 2 <= 1.0


def _tube(rng, grid, extent):
    a = rng.uniform(0.1 * extent, 0.9 * extent, size=3)
    b = rng.uniform(0.1 * extent, 0.9 * extent, size=3)
    radius = rng.uniform(0.04 * extent, 0.07 * extent)
    seg = b - a
    pts = np.stack(grid, axis=-1) - a
    t = np.clip(pts @ seg / max(seg @ seg, 1e-12), 0.0, 1.0)
    dist2 = ((pts - t[..., None] * seg) ** 2).sum(axis=-1)
    return dist2 <= radius ** 2


def gen_phantom(seed: int, extent: int = 64, num_classes: int = 8, spacing=(1.0, 1.0, 1.0)):
    """Random multi-organ phantom: non-overlapping ellipsoids and tubes.

    Class k > 0 gets intensity 40*k, background -100, plus Gaussian noise
    (sigma 10, clipped at 5 sigma). Odd classes are tubes, even classes
    ellipsoids; each class covers at least 0.1% of the volume.
    """
    if extent < 32:
        raise ValueError("phantom extent must be >= 32")
    if not 2 <= num_classes <= 8:
        raise ValueError("num_classes must be in [2, 8]")
    rng = np.random.default_rng(seed)
    grid = np.meshgrid(*(np.arange(extent, dtype=np.float64),) * 3, indexing="ij")
    labels = np.zeros((extent,) * 3, dtype=np.uint8)
    need = math.ceil(MIN_CLASS_FRACTION * labels.size)
    for k in range(1, num_classes):
        shape_fn = _tube if k % 2 else _ellipsoid
        for _ in range(200):
            mask = shape_fn(rng, grid, extent) & (labels == 0)
            if mask.sum() >= need:
                labels[mask] = k
                break
        else:
            raise RuntimeError(f"could not place class {k} in a {extent}^3 phantom")
    centers = np.array([class_center(k) for k in range(num_classes)])
    noise = np.clip(rng.normal(0.0, NOISE_SIGMA, size=labels.shape), -5 * NOISE_SIGMA, 5 * NOISE_SIGMA)
    image = np.rint(centers[labels] + noise).astype(np.int16)
    return Volume(image, spacing), LabelVolume(labels, spacing)


# ---------------------------------------------------------------------------
# training patches


def normalize_intensity(voxels: np.ndarray, window=(-200.0, 400.0)) -> np.ndarray:
    """Clip to the HU ``window`` and map it linearly onto [0, 1]."""
    lo, hi = window
    return ((np.clip(voxels, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


class PatchSource:
    """Reproducible batches of (augmented) training patches.

    Batch ``i`` depends only on (seed, i): volumes are drawn uniformly
    (distinct when there are enough), corners uniformly, and slot ``s``
    is augmented with its own stream ``i * batch_size + s``.
    """

    def __init__(self, images, labels, patch: int, batch_size: int = 3, seed: int = 0,
                 augment: AugmentConfig | None = None, window=(-200.0, 400.0)):
        if not images:
            raise ValueError("need at least one training volume")
        self.images = [np.asarray(getattr(v, "voxels", v)) for v in images]
        self.labels = [np.asarray(getattr(v, "voxels", v)) for v in labels]
        self.patch = int(patch)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.augment = augment or AugmentConfig(enabled=False)
        self.window = window
        for img, lab in zip(self.images, self.labels):
            if img.shape != lab.shape:
                raise ValueError("image/label extents differ")
            if min(img.shape) < self.patch:
                raise ValueError(f"patch {self.patch} does not fit volume {img.shape}")

    @classmethod
    def from_index(cls, index: DatasetIndex, patch: int, split: str = "train", **kw) -> "PatchSource":
        cases = index.subset(split)
        images = [read_image(c.image) for c in cases]
        labels = [read_labels(c.label) for c in cases]
        return cls(images, labels, patch, **kw)

    def sample(self, iteration: int):
        """Volume indices and corners for batch ``iteration``."""
        rng = _stream(self.seed, 0, iteration)
        n = len(self.images)
        if n >= self.batch_size:
            vols = rng.choice(n, size=self.batch_size, replace=False)
        else:
            vols = rng.integers(0, n, size=self.batch_size)
        corners = []
        for v in vols:
            shape = self.images[v].shape
            corners.append(tuple(int(rng.integers(0, s - self.patch + 1)) for s in shape))
        return [int(v) for v in vols], corners

    def batch(self, iteration: int):
        """(x, labels): x is (B, 1, P, P, P) float32 in [0, 1], labels (B, P, P, P) uint8."""
        vols, corners = self.sample(iteration)
        p = self.patch
        xs, ys = [], []
        for slot, (v, corner) in enumerate(zip(vols, corners)):
            rng = _stream(self.seed, 1, iteration * self.batch_size + slot)
            img, lab = augment_patch(self.images[v], self.labels[v], self.augment, rng,
                                     origin=corner, out_shape=(p, p, p))
            xs.append(normalize_intensity(img.astype(np.float32), self.window))
            ys.append(lab)
        return np.stack(xs)[:, None].astype(np.float32), np.stack(ys)

    def __iter__(self):
        i = 0
        while True:
            yield self.batch(i)
            i += 1


def patch_source(index: DatasetIndex, patch: int, seed: int = 0, **kw):
    """Infinite stream of (image-patch, label-patch) pairs from the training split."""
    src = PatchSource.from_index(index, patch, batch_size=1, seed=seed, **kw)
    for x, y in src:
        yield x[0, 0], y[0]
