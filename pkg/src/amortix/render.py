"""PGM rendering of image datasets with selections burned in."""

from __future__ import annotations

import math
import os

import numpy as np

from .data import Dataset
from .rng import RngStream


def write_pgm(path, img: np.ndarray):
    """Binary (P5) grayscale image from a uint8 2-D array."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM wants a 2-D image")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        f.readline()                      # maxval
        buf = f.read(w * h)
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w)


def image_side(ds: Dataset):
    """Side length when the feature vector is a square image, else None."""
    side = int(math.isqrt(ds.d))
    return side if side * side == ds.d and side >= 8 else None


def render_mask_images(ds: Dataset, masks, n: int, rng: RngStream, out_dir,
                       prefix="sample"):
    """n random test images per class, selections forced to max intensity.

    Returns the written paths. Refuses datasets that are not square images.
    """
    side = image_side(ds)
    if side is None:
        raise ValueError(f"dataset {ds.name or '?'} is not image-shaped; refusing")
    masks = np.atleast_2d(np.asarray(masks))
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for cls in range(ds.K):
        pool = np.flatnonzero(ds.y == cls)
        if pool.size == 0:
            continue
        pick = pool[rng.integers(0, pool.size, size=min(n, pool.size))]
        for j, idx in enumerate(np.atleast_1d(pick)):
            img = np.clip(ds.X[idx] * 255.0, 0, 255).astype(np.uint8)
            img = np.where(masks[idx] > 0, 255, img).astype(np.uint8)
            path = os.path.join(out_dir, f"{prefix}_class{cls}_{j}.pgm")
            write_pgm(path, img.reshape(side, side))
            paths.append(path)
    return paths


def render_codewords(codebook: np.ndarray, side: int, out_dir, prefix="code"):
    """Each codeword as a black image with its selected pixels lit."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for cls, row in enumerate(np.atleast_2d(codebook)):
        img = np.where(row > 0, 255, 0).astype(np.uint8).reshape(side, side)
        path = os.path.join(out_dir, f"{prefix}_class{cls}.pgm")
        write_pgm(path, img)
        paths.append(path)
    return paths
