"""Dataset ingestion and partitioning.

IDX-format image/label loading (big-endian, magic 0x803/0x801, plain or
gzipped), disjoint partitioning across source clients plus an unlabeled
target training shard and a labeled evaluation-only target test shard, and
a synthetic domain shift (rotation + intensity scale + noise) standing in
for a cross-domain target.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class LabeledSample(NamedTuple):
    image: np.ndarray
    label: int


@dataclass(frozen=True)
class LabeledSet:
    """Images (n, C, H, W) in [0,1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return LabeledSample(self.images[i], int(self.labels[i]))


@dataclass(frozen=True)
class UnlabeledSet:
    """Images only: the target client's training view carries no labels."""

    images: np.ndarray

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]


@dataclass(frozen=True)
class PartitionPlan:
    """How to split one labeled pool across the federation."""

    source_counts: tuple
    target_train: int
    target_test: int
    seed: int = 0
    label_skew: bool = False

    def __post_init__(self):
        counts = tuple(int(c) for c in self.source_counts)
        object.__setattr__(self, "source_counts", counts)
        if not counts or any(c <= 0 for c in counts):
            raise ConfigurationError("per-client sample counts must be positive")
        if self.target_train <= 0 or self.target_test <= 0:
            raise ConfigurationError("target train/test counts must be positive")

    @property
    def total(self):
        return sum(self.source_counts) + self.target_train + self.target_test


@dataclass(frozen=True)
class DomainShiftSpec:
    """Rotation (degrees), intensity scale, additive gaussian noise std."""

    rotation_degrees: float = 0.0
    intensity_scale: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if not -45.0 <= self.rotation_degrees <= 45.0:
            raise ConfigurationError("rotation must lie in [-45, 45] degrees")
        if not 0.0 < self.intensity_scale <= 2.0:
            raise ConfigurationError("intensity scale must lie in (0, 2]")
        if self.noise_std < 0.0:
            raise ConfigurationError("noise std must be non-negative")

    @property
    def is_identity(self):
        return (self.rotation_degrees == 0.0 and self.intensity_scale == 1.0
                and self.noise_std == 0.0)


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _read_header(buf, magic, n_dims, path):
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise FormatError(f"{path}: header truncated", offset=len(buf))
    fields = struct.unpack_from(f">{1 + n_dims}I", buf, 0)
    if fields[0] != magic:
        raise FormatError(f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{magic:08x}",
                          offset=0)
    return fields[1:], need


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair into a LabeledSet.

    Big-endian headers, unsigned-byte payloads; pixel bytes are normalized
    to [0,1] by dividing by 255. Plain and gzipped files both load.
    """
    img_buf = _open_maybe_gzip(images_path)
    (n_img, rows, cols), img_off = _read_header(img_buf, IMAGE_MAGIC, 3, images_path)
    expected = n_img * rows * cols
    if len(img_buf) - img_off != expected:
        raise FormatError(
            f"{images_path}: payload holds {len(img_buf) - img_off} bytes, "
            f"header promises {expected}", offset=img_off + min(len(img_buf) - img_off, expected))

    lbl_buf = _open_maybe_gzip(labels_path)
    (n_lbl,), lbl_off = _read_header(lbl_buf, LABEL_MAGIC, 1, labels_path)
    if len(lbl_buf) - lbl_off != n_lbl:
        raise FormatError(
            f"{labels_path}: payload holds {len(lbl_buf) - lbl_off} labels, "
            f"header promises {n_lbl}", offset=lbl_off + min(len(lbl_buf) - lbl_off, n_lbl))
    if n_img != n_lbl:
        raise FormatError(
            f"count mismatch: {n_img} images vs {n_lbl} labels", offset=4)

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=expected, offset=img_off)
    images = pixels.reshape(n_img, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=n_lbl, offset=lbl_off).astype(np.int64)
    return LabeledSet(images, labels)


def _skewed_assignment(labels, plan, rng):
    """Label-skew option: each client oversamples two preferred classes."""
    n_clients = len(plan.source_counts)
    classes = np.unique(labels)
    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    assigned = []
    for i, count in enumerate(plan.source_counts):
        preferred = [classes[(2 * i) % len(classes)], classes[(2 * i + 1) % len(classes)]]
        want_pref = count // 2
        take = []
        for c in preferred:
            grab = min(want_pref // 2 + want_pref % 2, len(pools[c]))
            take.extend(pools[c][:grab])
            pools[c] = pools[c][grab:]
        # fill up uniformly from the remaining pools
        spare = [idx for c in classes for idx in pools[c]]
        spare = list(rng.permutation(np.array(spare, dtype=np.int64))) if spare else []
        needed = count - len(take)
        if needed > len(spare):
            raise ConfigurationError("label-skew plan infeasible for these counts")
        take.extend(spare[:needed])
        used = set(take)
        for c in classes:
            pools[c] = [idx for idx in pools[c] if idx not in used]
        assigned.append(np.array(take, dtype=np.int64))
    remaining = np.array([idx for c in classes for idx in pools[c]], dtype=np.int64)
    remaining = rng.permutation(remaining)
    return assigned, remaining


def partition(samples, plan):
    """Split a labeled pool into disjoint shards.

    Returns (source_shards, target_train, target_test): N LabeledSets, one
    UnlabeledSet (labels dropped before the target ever sees them), and one
    labeled evaluation set. Same plan and pool give identical membership.
    """
    n = len(samples)
    if plan.total > n:
        raise ConfigurationError(
            f"plan needs {plan.total} samples but only {n} are available")
    rng = np.random.default_rng(plan.seed)
    if plan.label_skew:
        assigned, remaining = _skewed_assignment(samples.labels, plan, rng)
    else:
        perm = rng.permutation(n)
        assigned = []
        cursor = 0
        for count in plan.source_counts:
            assigned.append(perm[cursor:cursor + count])
            cursor += count
        remaining = perm[cursor:]
    shards = [LabeledSet(samples.images[idx], samples.labels[idx]) for idx in assigned]
    t_train = remaining[:plan.target_train]
    t_test = remaining[plan.target_train:plan.target_train + plan.target_test]
    target_train = UnlabeledSet(samples.images[t_train])
    target_test = LabeledSet(samples.images[t_test], samples.labels[t_test])
    return shards, target_train, target_test


def _rotation_maps(h, w, degrees):
    """Bilinear sampling maps for a rotation about the image center."""
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: output pixel -> source coordinates
    dy, dx = rows - cy, cols - cx
    src_y = cos * dy + sin * dx + cy
    src_x = -sin * dy + cos * dx + cx
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = src_y - y0
    wx = src_x - x0
    corners = []
    for oy, ox, weight in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                           (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        corners.append((np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1),
                        weight * inside))
    return corners


def rotate_images(images, degrees):
    """Bilinear rotation of an (n, C, H, W) batch about the image center.

    The resampling primitive behind apply_shift; multiples of 90 degrees map
    pixel centers onto pixel centers and are exact up to rounding.
    """
    _, _, h, w = images.shape
    corners = _rotation_maps(h, w, degrees)
    rotated = np.zeros_like(images)
    for yy, xx, weight in corners:
        rotated += images[:, :, yy, xx] * weight
    return rotated


def _shift_images(images, spec, seed):
    out = images
    if spec.rotation_degrees != 0.0:
        out = rotate_images(images, spec.rotation_degrees)
    if spec.intensity_scale != 1.0:
        out = out * spec.intensity_scale
    if spec.noise_std > 0.0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
    if out is images:
        return images.copy()
    return np.clip(out, 0.0, 1.0)


def apply_shift(samples, spec, seed=0):
    """Rotate, rescale intensity, and add seeded noise; labels preserved.

    The zero spec returns bitwise-unchanged pixel data. Works on both
    labeled and unlabeled sets.
    """
    if spec.is_identity:
        return samples
    if isinstance(samples, UnlabeledSet):
        return UnlabeledSet(_shift_images(samples.images, spec, seed))
    return LabeledSet(_shift_images(samples.images, spec, seed), samples.labels.copy())
