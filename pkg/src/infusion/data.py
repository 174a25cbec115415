"""Datasets, the IDX format, and PGM image grids."""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.str[1:]: k for k, v in IDX_DTYPES.items()}

SPLITS = ("train", "valid", "test")


class IDXFormatError(ValueError):
    pass


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IDXFormatError("file too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in IDX_DTYPES:
        raise IDXFormatError(f"bad IDX magic {buf[:4].hex()}")
    if ndim == 0:
        raise IDXFormatError("IDX rank must be >= 1")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXFormatError("truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(buf) - header
    if payload != expected:
        raise IDXFormatError(f"IDX payload is {payload} bytes, header declares {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(path) -> np.ndarray:
    """Parse an IDX file (MNIST images are magic 0x00000803, labels 0x00000801)."""
    return parse_idx(Path(path).read_bytes())


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    big = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    key = np.dtype(big).str[1:]
    if key not in IDX_CODES:
        raise IDXFormatError(f"dtype {arr.dtype} has no IDX code")
    header = struct.pack(">HBB", 0, IDX_CODES[key], arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(big).tobytes())


def scale_unit(raw) -> np.ndarray:
    """uint8 images ``[n, r, c]`` to rows in [0, 1] of width ``r * c``."""
    raw = np.asarray(raw)
    return (raw.reshape(raw.shape[0], -1).astype(np.float64)) / 255.0


@dataclass
class Dataset:
    rows: np.ndarray
    labels: np.ndarray | None = None
    provenance: str = ""
    log_density: Callable[[np.ndarray], np.ndarray] | None = None
    image_shape: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def part(self, name: str) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has not been split")
        return self.rows[self.labels == name]


def _two_gaussian_logpdf(centers, std):
    centers = np.asarray(centers, dtype=np.float64)

    def logpdf(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = x.shape[1]
        sq = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        comp = -0.5 * sq / std**2 - 0.5 * d * np.log(2 * np.pi * std**2)
        return np.logaddexp.reduce(comp, axis=1) + np.log(0.5)

    return logpdf


def toy_two_gaussians(
    rng: np.random.Generator,
    n: int,
    centers=((0.25, 0.25), (0.75, 0.75)),
    std: float = 0.05,
) -> Dataset:
    """Equal mixture of two isotropic Gaussians in [0, 1]^2.

    Draws falling outside the box are redrawn from the same component.
    """
    if std <= 0:
        raise ValueError("std must be > 0")
    centers = np.asarray(centers, dtype=np.float64)
    comp = rng.integers(0, len(centers), size=n)
    rows = centers[comp] + std * rng.standard_normal((n, centers.shape[1]))
    bad = np.any((rows < 0) | (rows > 1), axis=1)
    while bad.any():
        rows[bad] = centers[comp[bad]] + std * rng.standard_normal((int(bad.sum()), centers.shape[1]))
        bad = np.any((rows < 0) | (rows > 1), axis=1)
    return Dataset(
        rows,
        provenance=f"toy_two_gaussians(n={n}, std={std})",
        log_density=_two_gaussian_logpdf(centers, std),
        meta={"component": comp, "centers": centers, "std": std},
    )


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    n = dataset.rows.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_valid = int(round(fr[1] * n))
    n_valid = min(n_valid, n - n_train)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_valid]] = "valid"
    labels[order[n_train + n_valid:]] = "test"
    out = Dataset(
        dataset.rows,
        labels.astype(str),
        dataset.provenance,
        dataset.log_density,
        dataset.image_shape,
        dict(dataset.meta),
    )
    return out


def downsample_mnist(images: np.ndarray) -> np.ndarray:
    """28x28 -> 8x8: drop a 2-pixel border, then average 3x3 blocks."""
    images = np.asarray(images, dtype=np.float64)
    crop = images[:, 2:26, 2:26]
    return crop.reshape(-1, 8, 3, 8, 3).mean(axis=(2, 4))


def mnist_small(n: int = 2000, idx_images: str | None = None, seed: int = 0) -> Dataset:
    """8x8 digits in [0, 1].

    With ``idx_images`` the first ``n`` rows of a seeded shuffle of that
    MNIST IDX file are downsampled; otherwise scikit-learn's bundled 8x8
    digits (1797 images, levels 0..16) are used.
    """
    if idx_images:
        raw = load_idx(idx_images)
        order = np.random.default_rng(seed).permutation(raw.shape[0])[:n]
        rows = downsample_mnist(raw[order]).reshape(len(order), 64) / 255.0
        provenance = f"mnist-idx:{idx_images}"
    else:
        from sklearn.datasets import load_digits

        digits = load_digits().data[:n]
        rows = digits / 16.0
        provenance = "sklearn-digits-8x8"
    return Dataset(rows, provenance=provenance, image_shape=(8, 8))


def mnist_idx(images_path: str, test_images_path: str | None = None, seed: int = 0, n_valid: int = 10000) -> Dataset:
    """Full MNIST: 50k/10k train/valid from the training file plus the test file."""
    train = scale_unit(load_idx(images_path))
    order = np.random.default_rng(seed).permutation(train.shape[0])
    train = train[order]
    rows = [train]
    labels = ["train"] * (train.shape[0] - n_valid) + ["valid"] * n_valid
    if test_images_path:
        test = scale_unit(load_idx(test_images_path))
        rows.append(test)
        labels += ["test"] * test.shape[0]
    return Dataset(np.concatenate(rows), np.array(labels), f"mnist-idx:{images_path}", image_shape=(28, 28))


# ---------------------------------------------------------------------------
# image output


def quantize(values) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def tile(images, rows: int, cols: int, shape: tuple[int, int], pad: int = 1) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    h, w = shape
    if images.ndim != 2 or images.shape[0] != rows * cols:
        raise ValueError(f"expected {rows * cols} images, got {images.shape[0] if images.ndim == 2 else images.shape}")
    if images.shape[1] != h * w:
        raise ValueError(f"image width {images.shape[1]} does not match shape {shape}")
    canvas = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad))
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        canvas[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = img.reshape(h, w)
    return canvas


def write_pgm(path, image) -> None:
    img = quantize(image)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(data, dtype=np.uint8, offset=m.end())[: w * h]
    if pixels.size != w * h:
        raise ValueError("truncated PGM payload")
    return pixels.reshape(h, w).astype(np.float64) / maxval


def write_grid(images, rows: int, cols: int, shape: tuple[int, int], path, pad: int = 1) -> None:
    write_pgm(path, tile(images, rows, cols, shape, pad))


def rasterize_points(points, size: int = 32, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """2-D histogram of points as a flat ``size*size`` image scaled to [0, 1]."""
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    hist, _, _ = np.histogram2d(pts[:, 1], pts[:, 0], bins=size, range=[[lo, hi], [lo, hi]])
    hist = hist[::-1]
    peak = hist.max()
    return (hist / peak if peak > 0 else hist).ravel()
