import os

import numpy as np
import pytest

from amortix.data import (Dataset, SyntheticSpec, load_synthetic,
                          standard_split, write_idx_images, write_idx_labels)
from amortix.rng import RngStream

ARTIFACTS = os.path.join(os.path.dirname(__file__), "_artifacts")


def pytest_configure(config):
    os.makedirs(ARTIFACTS, exist_ok=True)


@pytest.fixture(scope="session")
def artifacts_dir():
    """Cache directory shared across sessions; reruns reuse finished runs."""
    return ARTIFACTS


@pytest.fixture(scope="session")
def tiny_s1():
    spec = SyntheticSpec("s1", 1200, 600, seed=0)
    train_full, test = load_synthetic(spec)
    train, val = standard_split(train_full, (0.9, 0.1), RngStream(0, "tiny-split"))
    return train, val, test


def _upsample(img8):
    big = np.kron(img8, np.ones((3, 3)))
    out = np.zeros((28, 28))
    out[2:26, 2:26] = big
    return out


def build_digits_surrogate(n_train=2400, n_test=600, seed=0):
    """28x28 digit images built from sklearn's bundled 8x8 digits.

    Real MNIST is not available in this environment; this surrogate feeds
    the same IDX/rendering/experiment pipeline with genuinely image-shaped
    10-class data (upsampling, integer shifts, mild noise).
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    base = raw.images / 16.0
    labels = raw.target
    rng = RngStream(seed, "digits-surrogate")
    total = n_train + n_test
    reps = int(np.ceil(total / base.shape[0]))
    idx = np.tile(np.arange(base.shape[0]), reps)[:total]
    idx = idx[rng.permutation(total)]
    X = np.empty((total, 784))
    y = labels[idx].astype(np.int64)
    shifts = rng.integers(-2, 3, size=(total, 2))
    noise = rng.normal(total, 28, 28) * 0.02
    for i, (j, (dy, dx)) in enumerate(zip(idx, shifts)):
        img = _upsample(base[j])
        img = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
        X[i] = np.clip(img + noise[i], 0.0, 1.0).ravel()
    train = Dataset(X[:n_train], y[:n_train], 10, split="train", name="digits")
    test = Dataset(X[n_train:], y[n_train:], 10, split="test", name="digits")
    return train, test


@pytest.fixture(scope="session")
def digits_idx_dir(artifacts_dir):
    """Surrogate digit IDX files laid out like an MNIST directory."""
    root = os.path.join(artifacts_dir, "digits_idx")
    marker = os.path.join(root, "train-images-idx3-ubyte")
    if not os.path.exists(marker):
        os.makedirs(root, exist_ok=True)
        train, test = build_digits_surrogate(n_train=11000, n_test=2200, seed=0)
        for ds, img_name, lbl_name in (
                (train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                (test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")):
            imgs = np.round(ds.X * 255.0).astype(np.uint8)
            write_idx_images(imgs, 28, 28, os.path.join(root, img_name))
            write_idx_labels(ds.y, os.path.join(root, lbl_name))
    return root


def real_mnist_dir():
    """Directory with genuine MNIST IDX files, when the user mounted one."""
    root = os.environ.get("AMORTIX_MNIST_DIR")
    if root and os.path.exists(os.path.join(root, "train-images-idx3-ubyte")):
        return root
    if root and os.path.exists(os.path.join(root, "train-images-idx3-ubyte.gz")):
        return root
    return None
