"""Image datasets: IDX ingestion, procedural synthetic shapes, splits and client shards."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "cross", "hbars", "vbars", "diagonal", "antidiagonal", "ring",
          "triangle", "xmark")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DataSet:
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N]
    n_classes: int
    provenance: str = "memory"

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if imgs.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {imgs.shape}")
        if imgs.shape[0] != labels.shape[0]:
            raise ValueError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        imgs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> DataSet:
        idx = np.asarray(idx, dtype=np.int64)
        return DataSet(self.images[idx], self.labels[idx], self.n_classes, self.provenance)

    def replace(self, images=None, labels=None) -> DataSet:
        return DataSet(self.images if images is None else images,
                       self.labels if labels is None else labels,
                       self.n_classes, self.provenance)


# -- IDX -------------------------------------------------------------------

def _read_idx(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0 or blob[2] != 0x08:
        raise DataFormatError(f"{path}: bad IDX magic")
    ndim = blob[3]
    if len(blob) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    n = int(np.prod(dims, dtype=np.int64))
    payload = blob[4 + 4 * ndim:]
    if len(payload) < n:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} < {n} bytes)")
    return np.frombuffer(payload, np.uint8, n).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path, n_classes: int | None = None) -> DataSet:
    """Load an IDX image/label pair; pixels are scaled by 1/255.

    Image files may be rank 3 ``[N, H, W]`` (grayscale) or rank 4 ``[N, C, H, W]``.
    """
    raw = _read_idx(images_path)
    labels = _read_idx(labels_path).reshape(-1).astype(np.int64)
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim != 4:
        raise DataFormatError(f"{images_path}: expected rank 3 or 4, got {raw.ndim}")
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {raw.shape[0]} images vs {labels.shape[0]} labels")
    k = int(labels.max()) + 1 if n_classes is None and labels.size else n_classes or 1
    return DataSet(raw.astype(np.float32) / np.float32(255.0), labels, k, "idx-file")


def snap_to_byte_grid(ds: DataSet) -> DataSet:
    """Round pixels onto the 1/255 grid exactly as ``load_idx`` reconstructs them."""
    codes = np.rint(ds.images * np.float32(255.0)).astype(np.uint8)
    return ds.replace(images=codes.astype(np.float32) / np.float32(255.0))


def save_idx(ds: DataSet, images_path, labels_path) -> None:
    """Write ``ds`` as an IDX pair; pixels are rounded onto the 1/255 grid."""
    imgs = np.rint(ds.images * 255.0).astype(np.uint8)
    if imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    write_idx(images_path, imgs)
    write_idx(labels_path, ds.labels.astype(np.uint8))


# -- synthetic shapes ------------------------------------------------------

def _render(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    t = max(1.0, r / 3.0)  # stroke half-width
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disk":
        m = dy**2 + dx**2 <= r**2
    elif kind == "square":
        m = inside
    elif kind == "cross":
        m = inside & ((np.abs(dy) < t) | (np.abs(dx) < t))
    elif kind == "hbars":
        m = inside & (np.floor((dy + r) / t).astype(int) % 2 == 0)
    elif kind == "vbars":
        m = inside & (np.floor((dx + r) / t).astype(int) % 2 == 0)
    elif kind == "diagonal":
        m = inside & (np.abs(dy - dx) < t)
    elif kind == "antidiagonal":
        m = inside & (np.abs(dy + dx) < t)
    elif kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        m = (d <= r) & (d >= r - t)
    elif kind == "triangle":
        m = inside & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    elif kind == "xmark":
        m = inside & ((np.abs(dy - dx) < t) | (np.abs(dy + dx) < t))
    else:
        raise ValueError(kind)
    return m.astype(np.float32)


def generate_synthetic(n_classes: int = 10, n_per_class: int = 100, image_size: int = 16,
                       noise_level: float = 0.1, seed: int = 0, jitter: int = 2,
                       channels: int = 1, contrast: float = 0.3,
                       background: float = 0.35) -> DataSet:
    """Class ``k`` renders shape ``SHAPES[k]`` with position jitter and uniform noise.

    Pixels are ``background + contrast * shape + U(-noise_level, noise_level)``,
    clamped to [0, 1]. Images are ordered class-major; identical arguments give
    bit-identical output.
    """
    if not 2 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in [2, {len(SHAPES)}], got {n_classes}")
    rng = np.random.default_rng(seed)
    r = image_size / 2.0 - jitter - 1.5
    c0 = (image_size - 1) / 2.0
    n = n_classes * n_per_class
    imgs = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    offsets = rng.integers(-jitter, jitter + 1, size=(n, 2)) if jitter else np.zeros((n, 2))
    cache = {}
    for i in range(n):
        key = (labels[i], int(offsets[i, 0]), int(offsets[i, 1]))
        if key not in cache:
            cache[key] = _render(SHAPES[labels[i]], image_size, c0 + key[1], c0 + key[2], r)
        imgs[i] = cache[key]
    if contrast != 1.0 or background:  # faint shapes keep the task non-trivial
        imgs = np.float32(background) + np.float32(contrast) * imgs
    if noise_level > 0:
        imgs += rng.uniform(-noise_level, noise_level, imgs.shape).astype(np.float32)
    np.clip(imgs, 0.0, 1.0, out=imgs)
    return DataSet(imgs, labels, n_classes, f"synthetic({seed})")


# -- splitting -------------------------------------------------------------

def split_dataset(ds: DataSet, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  require_val: bool = False) -> tuple[DataSet, DataSet, DataSet]:
    """Seeded disjoint train/val/test partition; rounding remainder goes to train."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"fractions must be three non-negative values summing to 1: {fractions}")
    n = len(ds)
    n_val, n_test = int(round(fr[1] * n)), int(round(fr[2] * n))
    if require_val and n_val == 0:
        raise ValueError("validation split is empty but calibration needs it")
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    return (ds.subset(np.sort(perm[:n_train])),
            ds.subset(np.sort(perm[n_train:n_train + n_val])),
            ds.subset(np.sort(perm[n_train + n_val:])))


def partition_clients(train: DataSet, n_clients: int = 2, seed: int = 0) -> list[DataSet]:
    """IID shards whose sizes differ by at most one."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if len(train) < n_clients:
        raise ValueError(f"{len(train)} samples cannot fill {n_clients} non-empty shards")
    if n_clients == 1:
        return [train]
    perm = np.random.default_rng(seed).permutation(len(train))
    return [train.subset(np.sort(chunk)) for chunk in np.array_split(perm, n_clients)]


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]
