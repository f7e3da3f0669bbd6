"""Dataset ingestion and generation.

Supports the IDX image/label format (big-endian, magics 0x00000803 and
0x00000801) byte-exactly, the CIFAR-10 binary batch format, and a built-in
synthetic digit generator that renders MNIST-shaped corpora deterministically
from a seed. The generator exists because this package's end-to-end checks
need a 28x28 ten-class corpus even on machines without the real files; when
real MNIST IDX files are available they drop in unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, RangeError

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803


@dataclass
class Dataset:
    """Images as 8-bit codes (N, C, H, W) plus integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"
    input_bits: int = 8

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise RangeError("dataset images must be 8-bit codes")
        if self.images.ndim != 4:
            raise FormatError(f"images must be NCHW, got {self.images.ndim}-D")
        if len(self.images) != len(self.labels):
            raise FormatError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.classes
        ):
            raise RangeError(
                f"label outside [0, {self.classes}) in {self.split} split"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.split)


def to_real(images: np.ndarray) -> np.ndarray:
    """8-bit codes to [0,1] reals (code / 255); the input grid of every net."""
    return np.asarray(images, dtype=np.float64) / 255.0


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into a uint8 array (1-D labels or 3-D images)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(
            f"{path}: expected {header + count} bytes, file has {len(raw)}",
            offset=min(len(raw), header + count),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (1-D labels or 3-D images)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    if a.ndim == 1:
        magic = IDX_MAGIC_LABELS
    elif a.ndim == 3:
        magic = IDX_MAGIC_IMAGES
    else:
        raise FormatError(f"IDX arrays are 1-D or 3-D, got {a.ndim}-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def ingest_idx(images_path, labels_path, classes: int = 10, split: str = "train") -> Dataset:
    """Load an IDX image/label pair, preserving pixel codes byte-exactly."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a label file")
    n, h, w = images.shape
    return Dataset(images.reshape(n, 1, h, w), labels, classes, split)


CIFAR_RECORD = 1 + 3 * 32 * 32


def ingest_cifar(paths, classes: int = 10, split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 pixel bytes each)."""
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}",
                offset=len(raw) - len(raw) % CIFAR_RECORD,
            )
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(recs[:, 0].copy())
        images.append(recs[:, 1:].reshape(-1, 3, 32, 32).copy())
    return Dataset(np.concatenate(images), np.concatenate(labels), classes, split)


# -- synthetic digit corpus ---------------------------------------------------

# Stroke skeletons per digit in a unit box, (x, y) with y growing downward.
_G = {
    0: [[(0.5, 0.12), (0.72, 0.3), (0.74, 0.62), (0.5, 0.88), (0.27, 0.64),
         (0.26, 0.3), (0.5, 0.12)]],
    1: [[(0.35, 0.3), (0.52, 0.12), (0.52, 0.88)], [(0.38, 0.88), (0.66, 0.88)]],
    2: [[(0.27, 0.3), (0.34, 0.15), (0.55, 0.11), (0.71, 0.2), (0.72, 0.36),
         (0.55, 0.55), (0.3, 0.74), (0.26, 0.86)], [(0.26, 0.86), (0.75, 0.86)]],
    3: [[(0.28, 0.18), (0.5, 0.11), (0.69, 0.2), (0.69, 0.34), (0.5, 0.46)],
        [(0.5, 0.46), (0.7, 0.55), (0.72, 0.74), (0.52, 0.88), (0.28, 0.8)]],
    4: [[(0.6, 0.12), (0.26, 0.6), (0.78, 0.6)], [(0.62, 0.34), (0.62, 0.88)]],
    5: [[(0.7, 0.13), (0.32, 0.13), (0.29, 0.45), (0.52, 0.4), (0.7, 0.5),
         (0.72, 0.7), (0.55, 0.86), (0.3, 0.82)]],
    6: [[(0.64, 0.12), (0.42, 0.3), (0.31, 0.55), (0.33, 0.75), (0.5, 0.88),
         (0.67, 0.74), (0.65, 0.56), (0.48, 0.5), (0.34, 0.6)]],
    7: [[(0.26, 0.13), (0.74, 0.13), (0.45, 0.88)], [(0.34, 0.5), (0.62, 0.5)]],
    8: [[(0.5, 0.11), (0.66, 0.2), (0.66, 0.36), (0.5, 0.46), (0.34, 0.36),
         (0.34, 0.2), (0.5, 0.11)],
        [(0.5, 0.46), (0.69, 0.57), (0.69, 0.77), (0.5, 0.88), (0.31, 0.77),
         (0.31, 0.57), (0.5, 0.46)]],
    9: [[(0.66, 0.34), (0.52, 0.46), (0.35, 0.37), (0.34, 0.2), (0.5, 0.11),
         (0.66, 0.2), (0.66, 0.34)], [(0.66, 0.34), (0.64, 0.6), (0.52, 0.88)]],
}


def _segments(digit: int) -> np.ndarray:
    segs = []
    for line in _G[digit]:
        for a, b in zip(line[:-1], line[1:]):
            segs.append((a, b))
    return np.asarray(segs)  # (S, 2, 2)


_SEGS = [_segments(d) for d in range(10)]
_MAX_SEGS = max(len(s) for s in _SEGS)


def synthetic_digits(n: int, seed: int, size: int = 28):
    """Render n labeled digit images, deterministic in the seed.

    Each sample applies a random rotation, anisotropic scale, shear, and
    translation to the digit skeleton, draws it with a random stroke width and
    intensity, and adds pixel noise. Returns (images uint8 (n,1,s,s), labels)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.integers(0, 10, size=n)
    gx, gy = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (P, 2) pixel centers

    images = np.empty((n, size * size), dtype=np.uint8)
    batch = 512
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        b = hi - lo
        digs = labels[lo:hi]
        nseg = np.array([len(_SEGS[d]) for d in digs])
        segs = np.zeros((b, _MAX_SEGS, 2, 2))
        for i, d in enumerate(digs):
            segs[i, : nseg[i]] = _SEGS[d]

        rot = rng.uniform(-0.32, 0.32, size=b)
        sx = rng.uniform(0.78, 1.12, size=b)
        sy = rng.uniform(0.78, 1.12, size=b)
        shear = rng.uniform(-0.18, 0.18, size=b)
        tx = rng.uniform(-2.5, 2.5, size=b)
        ty = rng.uniform(-2.5, 2.5, size=b)
        thick = rng.uniform(1.05, 1.95, size=b)
        inten = rng.uniform(0.72, 1.0, size=b)

        c, s = np.cos(rot), np.sin(rot)
        # affine about the box center, then into pixel units
        m00 = sx * (c - s * shear)
        m01 = sx * -s
        m10 = sy * (s + c * shear)
        m11 = sy * c
        pts = segs - 0.5
        px = (m00[:, None, None] * pts[..., 0] + m01[:, None, None] * pts[..., 1])
        py = (m10[:, None, None] * pts[..., 0] + m11[:, None, None] * pts[..., 1])
        px = (px + 0.5) * size + tx[:, None, None]
        py = (py + 0.5) * size + ty[:, None, None]
        a = np.stack([px[:, :, 0], py[:, :, 0]], axis=-1)  # (b, S, 2)
        v = np.stack([px[:, :, 1], py[:, :, 1]], axis=-1) - a

        # distance from every pixel to every segment
        diff = grid[None, None] - a[:, :, None]  # (b, S, P, 2)
        vv = (v * v).sum(-1)[:, :, None]
        t = np.clip((diff * v[:, :, None]).sum(-1) / np.maximum(vv, 1e-12), 0, 1)
        proj = a[:, :, None] + t[..., None] * v[:, :, None]
        d = np.sqrt(((grid[None, None] - proj) ** 2).sum(-1))  # (b, S, P)
        seg_mask = np.arange(_MAX_SEGS)[None, :] < nseg[:, None]
        d = np.where(seg_mask[:, :, None], d, np.inf)
        dmin = d.min(axis=1)

        ink = np.clip((thick[:, None] - dmin) / 0.9 + 0.5, 0, 1) * inten[:, None]
        noise = rng.normal(0, 0.055, size=(b, size * size))
        specks = rng.random((b, size * size)) < 0.004
        img = np.clip(ink + noise + specks * rng.uniform(0.4, 1.0, (b, size * size)), 0, 1)
        images[lo:hi] = np.floor(img * 255 + 0.5).astype(np.uint8)
    return images.reshape(n, 1, size, size), labels.astype(np.int64)


def write_synthetic_idx(outdir, n_train: int, n_test: int, seed: int) -> dict:
    """Write a synthetic train/test corpus as four IDX files; returns paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    train_x, train_y = synthetic_digits(n_train, seed)
    test_x, test_y = synthetic_digits(n_test, seed + 1)
    paths = {
        "train_images": outdir / "train-images-idx3-ubyte",
        "train_labels": outdir / "train-labels-idx1-ubyte",
        "test_images": outdir / "t10k-images-idx3-ubyte",
        "test_labels": outdir / "t10k-labels-idx1-ubyte",
    }
    write_idx(paths["train_images"], train_x[:, 0])
    write_idx(paths["train_labels"], train_y.astype(np.uint8))
    write_idx(paths["test_images"], test_x[:, 0])
    write_idx(paths["test_labels"], test_y.astype(np.uint8))
    return {k: str(v) for k, v in paths.items()}
