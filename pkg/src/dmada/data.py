"""Datasets, IDX I/O, synthetic domain shifts and the batch sampling protocol."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Flattened images in ``[0, 1]`` with optional integer labels.

    ``image_shape`` records ``(rows, cols)`` for IDX export and spatial
    transforms; ``images`` is always ``(N, rows * cols)``.
    """

    images: np.ndarray
    labels: np.ndarray | None
    name: str
    image_shape: tuple[int, int]
    n_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 2:
            raise ValueError(f"{self.name}: images must be (N, d), got {images.shape}")
        if images.shape[1] != self.image_shape[0] * self.image_shape[1]:
            raise ValueError(f"{self.name}: width {images.shape[1]} does not match image shape {self.image_shape}")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError(f"{self.name}: pixel values must lie in [0, 1]")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(images),):
                raise ValueError(f"{self.name}: {len(labels)} labels for {len(images)} images")
            if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise ValueError(f"{self.name}: labels outside [0, {self.n_classes})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def unlabeled(self) -> "LabeledDataset":
        return replace(self, labels=None)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            images=self.images[index],
            labels=None if self.labels is None else self.labels[index],
        )


@dataclass(frozen=True)
class DomainPair:
    source: LabeledDataset
    target: LabeledDataset

    def __post_init__(self):
        if self.source.labels is None:
            raise ValueError("source domain must be labeled")
        if self.source.dim != self.target.dim:
            raise ValueError(f"feature dimensions differ: {self.source.dim} vs {self.target.dim}")
        if self.source.n_classes != self.target.n_classes:
            raise ValueError("source and target must share the label space")

    @property
    def n_classes(self) -> int:
        return self.source.n_classes

    @property
    def dim(self) -> int:
        return self.source.dim

    def training_view(self) -> "DomainPair":
        """The pair as the trainer may see it: target labels removed."""
        return DomainPair(self.source, self.target.unlabeled())


# -- IDX -----------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than its magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    n = math.prod(dims)
    if len(blob) < header + n:
        raise IdxTruncatedError(f"{path}: payload has {len(blob) - header} bytes, expected {n}")
    if len(blob) > header + n:
        raise IdxTruncatedError(f"{path}: {len(blob) - header - n} unexpected trailing bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, name: str | None = None, n_classes: int = 10) -> LabeledDataset:
    """Read IDX ubyte images (and optionally labels); pixels are scaled by 1/255."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if len(labels) != len(raw):
            raise IdxCountMismatchError(f"{len(raw)} images but {len(labels)} labels")
    n, rows, cols = raw.shape
    images = raw.reshape(n, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, name or Path(images_path).stem, (rows, cols), n_classes)


def save_idx(ds: LabeledDataset, images_path, labels_path=None) -> None:
    """Write ``ds`` as IDX ubyte files; pixels are quantized to ``round(255 * x)``."""
    rows, cols = ds.image_shape
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(ds), rows, cols))
        fh.write(pixels.tobytes())
    if labels_path is not None:
        if ds.labels is None:
            raise ValueError(f"{ds.name}: no labels to write")
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(ds)))
            fh.write(ds.labels.astype(np.uint8).tobytes())


# -- transforms ----------------------------------------------------------

TRANSFORMS = ("invert", "rotate", "gaussian_noise", "intensity_scale")


def synth_shift(ds: LabeledDataset, transform: str, param: float | None = None, rng=None) -> LabeledDataset:
    """Apply one domain-shift transform; labels are kept and pixels clamped to ``[0, 1]``.

    ``rotate`` takes an angle in degrees within ``[-45, 45]``, ``gaussian_noise``
    a standard deviation ``>= 0`` (needs ``rng``), ``intensity_scale`` a factor
    in ``(0, 2]``.
    """
    x = ds.images
    if transform == "invert":
        out = 1.0 - x
    elif transform == "rotate":
        angle = float(param if param is not None else 0.0)
        if not -45.0 <= angle <= 45.0:
            raise ValueError(f"rotation angle {angle} outside [-45, 45] degrees")
        if angle == 0.0:
            out = x.copy()
        else:
            imgs = x.reshape(len(ds), *ds.image_shape)
            out = ndimage.rotate(imgs, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
            out = out.reshape(len(ds), -1)
    elif transform == "gaussian_noise":
        s = float(param if param is not None else 0.0)
        if s < 0:
            raise ValueError(f"noise level {s} must be non-negative")
        if rng is None:
            raise ValueError("gaussian_noise needs an rng")
        out = x + s * rng.standard_normal(x.shape)
    elif transform == "intensity_scale":
        c = float(param if param is not None else 1.0)
        if not 0.0 < c <= 2.0:
            raise ValueError(f"intensity scale {c} outside (0, 2]")
        out = c * x
    else:
        raise ValueError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")
    suffix = transform if param is None else f"{transform}({param:g})"
    return replace(ds, images=np.clip(out, 0.0, 1.0), name=f"{ds.name}+{suffix}")


def block_downsample(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Average non-overlapping ``factor x factor`` blocks (edges zero-padded)."""
    rows, cols = ds.image_shape
    pr, pc = -rows % factor, -cols % factor
    imgs = ds.images.reshape(len(ds), rows, cols)
    imgs = np.pad(imgs, ((0, 0), (pr // 2, pr - pr // 2), (pc // 2, pc - pc // 2)))
    r, c = imgs.shape[1] // factor, imgs.shape[2] // factor
    small = imgs.reshape(len(ds), r, factor, c, factor).mean(axis=(2, 4))
    return replace(ds, images=small.reshape(len(ds), r * c), image_shape=(r, c))


def upsample(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Nearest-neighbour upsampling by an integer factor."""
    rows, cols = ds.image_shape
    imgs = ds.images.reshape(len(ds), rows, cols)
    big = np.repeat(np.repeat(imgs, factor, axis=1), factor, axis=2)
    return replace(ds, images=big.reshape(len(ds), -1), image_shape=(rows * factor, cols * factor))


# -- built-in tasks ------------------------------------------------------

MOONS_CENTER = np.array([0.5, 0.25])
MOONS_SCALE = 4.0


def moons_to_unit(points: np.ndarray) -> np.ndarray:
    """Affine map from raw moon coordinates into the unit square."""
    return 0.5 + (points - MOONS_CENTER) / MOONS_SCALE


def unit_to_moons(points: np.ndarray) -> np.ndarray:
    return MOONS_CENTER + (points - 0.5) * MOONS_SCALE


def _moons(n: int, noise: float, rng: np.random.Generator):
    n_outer = n // 2
    n_inner = n - n_outer
    t_out = rng.uniform(0.0, np.pi, n_outer)
    t_in = rng.uniform(0.0, np.pi, n_inner)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    pts = np.concatenate([outer, inner])
    labels = np.concatenate([np.zeros(n_outer, np.int64), np.ones(n_inner, np.int64)])
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    perm = rng.permutation(n)
    return pts[perm], labels[perm]


PIVOTS = {"origin": np.zeros(2), "center": MOONS_CENTER}


def rotate_points(pts: np.ndarray, degrees: float, pivot: str = "origin") -> np.ndarray:
    th = np.deg2rad(degrees)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    c = PIVOTS[pivot]
    return (pts - c) @ rot.T + c


def moons_dataset(n: int, noise: float, rotation: float, rng: np.random.Generator, name: str,
                  pivot: str = "origin") -> LabeledDataset:
    pts, labels = _moons(n, noise, rng)
    pts = rotate_points(pts, rotation, pivot)
    return LabeledDataset(np.clip(moons_to_unit(pts), 0.0, 1.0), labels, name, (1, 2), n_classes=2)


MAX_MOONS_SHIFT = 45.0


def make_moons_pair(n: int, noise: float = 0.1, shift: float = 30.0, rng=None, pivot: str = "origin") -> DomainPair:
    """Two interleaved half circles; the target is rotated by ``shift`` degrees.

    The rotation pivots on the coordinate origin (the outer moon's centre) by
    default, or on the centre of the pair with ``pivot="center"``.  Points
    are then mapped into the unit square by :func:`moons_to_unit`.
    """
    if n < 2 or n % 2:
        raise ValueError(f"n must be an even number >= 2, got {n}")
    if abs(shift) > MAX_MOONS_SHIFT:
        raise ValueError(f"moons shift {shift} outside [-{MAX_MOONS_SHIFT:g}, {MAX_MOONS_SHIFT:g}] degrees")
    if pivot not in PIVOTS:
        raise ValueError(f"pivot must be one of {sorted(PIVOTS)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    src = moons_dataset(n, noise, 0.0, rng, "moons")
    tgt = moons_dataset(n, noise, shift, rng, f"moons+rot({shift:g})", pivot)
    return DomainPair(src, tgt)


def load_digits_8x8() -> LabeledDataset:
    """The 1797 bundled 8x8 handwritten digits, scaled into ``[0, 1]``."""
    from sklearn.datasets import load_digits

    d = load_digits()
    return LabeledDataset(d.data / 16.0, d.target, "digits8", (8, 8), n_classes=10)


def digits_pair(task: str = "invert", rng=None) -> DomainPair:
    """Split the bundled digits into disjoint halves and shift the target half.

    ``invert``: 8x8 source vs. inverted 8x8 target.
    ``rotate``: 16x16 (upsampled) source vs. rotated (25 deg) and noisy target.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    full = load_digits_8x8()
    perm = rng.permutation(len(full))
    half = len(full) // 2
    src, tgt = full.subset(perm[:half]), full.subset(perm[half:])
    if task == "invert":
        return DomainPair(replace(src, name="digits8"), synth_shift(tgt, "invert"))
    if task == "rotate":
        src, tgt = upsample(src, 2), upsample(tgt, 2)
        tgt = synth_shift(synth_shift(tgt, "rotate", 25.0), "gaussian_noise", 0.05, rng)
        return DomainPair(replace(src, name="digits16"), tgt)
    raise ValueError(f"unknown digits task {task!r}")


# -- sampling ------------------------------------------------------------

def protocol_subsample(pair: DomainPair, n_source: int, n_target: int, rng) -> DomainPair:
    """Class-stratified source subset and a uniform target subset, without replacement."""
    if n_source > len(pair.source) or n_target > len(pair.target):
        raise ValueError(
            f"requested {n_source}/{n_target} samples from {len(pair.source)}/{len(pair.target)}"
        )
    K = pair.n_classes
    labels = pair.source.labels
    per_class = np.full(K, n_source // K)
    # remainder goes to randomly chosen classes, keeping counts within one
    per_class[rng.permutation(K)[: n_source % K]] += 1
    picks = []
    for k in range(K):
        pool = np.flatnonzero(labels == k)
        if per_class[k] > len(pool):
            raise ValueError(f"class {k} has {len(pool)} samples, {per_class[k]} requested")
        picks.append(rng.choice(pool, size=per_class[k], replace=False))
    src_idx = rng.permutation(np.concatenate(picks))
    tgt_idx = rng.choice(len(pair.target), size=n_target, replace=False)
    return DomainPair(pair.source.subset(src_idx), pair.target.subset(tgt_idx))


class _IndexStream:
    """Endless stream of indices drawn permutation by permutation."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            out.append(self.perm[self.pos : self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


class BatchSampler:
    """Equal-size source/target batches; one epoch is one pass over the source."""

    def __init__(self, pair: DomainPair, batch_size: int, rng: np.random.Generator):
        if batch_size > len(pair.source) or batch_size > len(pair.target):
            raise ValueError(f"batch size {batch_size} exceeds a domain size")
        self.source = pair.source
        self.target_images = pair.target.images
        self.batch_size = batch_size
        self._src = _IndexStream(len(pair.source), rng)
        self._tgt = _IndexStream(len(pair.target), rng)

    @property
    def iterations_per_epoch(self) -> int:
        return math.ceil(len(self.source) / self.batch_size)

    def epoch(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        for _ in range(self.iterations_per_epoch):
            si = self._src.take(self.batch_size)
            ti = self._tgt.take(self.batch_size)
            yield self.source.images[si], self.source.labels[si], self.target_images[ti]


def batch_sampler(pair: DomainPair, batch_size: int, rng) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Endless stream of ``(x_s, y_s, x_t)`` batches; target labels are never read."""
    sampler = BatchSampler(pair.training_view(), batch_size, rng)
    while True:
        yield from sampler.epoch()
