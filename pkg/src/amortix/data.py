"""Datasets: branching synthetic generators, IDX digits, deterministic labels.

The synthetic families share eleven standard-normal features and a binary
target whose conditional law is a depth-one tree: feature 11 routes each
instance to one of two leaf conditionals, so it is informative in every
sample yet never appears inside a leaf. Ground-truth relevance per instance
is the active leaf's feature set plus the branching feature.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, FormatError
from .rng import RngStream


@dataclass
class Dataset:
    X: np.ndarray                     # (N, D) float64
    y: np.ndarray                     # (N,) int64 class indices
    K: int
    ground_truth: np.ndarray | None = None   # (N, D) 0/1 relevance masks
    split: str = ""
    name: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DimensionError("X must be (N, D) with one label per row")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.K):
            raise DimensionError("label outside [0, K)")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
            if self.ground_truth.shape != self.X.shape:
                raise DimensionError("ground truth must align with X")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def take(self, idx, split=None):
        return Dataset(self.X[idx], self.y[idx], self.K,
                       None if self.ground_truth is None else self.ground_truth[idx],
                       split if split is not None else self.split, self.name)


# --- the branching generative family ----------------------------------------

def _f_a(X):
    return np.exp(X[:, 0] * X[:, 1])


def _f_b(X):
    return np.exp(np.sum(X[:, 2:6] ** 2, axis=1) - 4.0)


def _f_c(X):
    return np.exp(-10.0 * np.sin(0.2 * X[:, 6]) + np.abs(X[:, 7])
                  + X[:, 8] + np.exp(-X[:, 9]) - 2.4)


_LEAVES = {
    "A": ((0, 1), _f_a),
    "B": ((2, 3, 4, 5), _f_b),
    "C": ((6, 7, 8, 9), _f_c),
}


@dataclass(frozen=True)
class Leaf:
    leaf_id: str
    features: tuple            # S_i, the leaf conditional's inputs
    f: callable                # f_i with P(y=1 | x) = 1 / (1 + f_i(x))


@dataclass(frozen=True)
class ControlFlowTree:
    """Depth-one tree: x[branch_feature] < threshold routes to leaves[0]."""

    branch_feature: int
    threshold: float
    leaves: tuple              # (below leaf, at-or-above leaf)
    n_features: int

    def __post_init__(self):
        if self.leaves[0].features == self.leaves[1].features:
            raise ValueError("leaf feature subsets must be distinct")

    def route(self, X):
        """0 for the below-threshold leaf, 1 otherwise."""
        return (X[:, self.branch_feature] >= self.threshold).astype(np.int64)

    def prob_y1(self, X):
        """Exact P(y = 1 | x) under the tree."""
        side = self.route(X)
        out = np.empty(X.shape[0])
        for i, leaf in enumerate(self.leaves):
            sel = side == i
            if np.any(sel):
                out[sel] = 1.0 / (1.0 + leaf.f(X[sel]))
        return out

    def leaf_masks(self, X):
        """(N, D) 0/1 masks of the active leaf's features S(x)."""
        side = self.route(X)
        masks = np.zeros((X.shape[0], self.n_features))
        for i, leaf in enumerate(self.leaves):
            masks[np.ix_(side == i, list(leaf.features))] = 1.0
        return masks

    def path_masks(self, X):
        """S(x) plus the control feature: everything on the root-to-leaf path."""
        masks = self.leaf_masks(X)
        masks[:, self.branch_feature] = 1.0
        return masks

    def control_features(self):
        return (self.branch_feature,)


_SYNTH_SPLITS = {"s1": ("A", "B"), "s2": ("A", "C"), "s3": ("B", "C")}


def synthetic_tree(dataset_id: str) -> ControlFlowTree:
    key = dataset_id.lower()
    if key not in _SYNTH_SPLITS:
        raise ValueError(f"unknown synthetic dataset {dataset_id!r}")
    lo, hi = _SYNTH_SPLITS[key]
    return ControlFlowTree(
        branch_feature=10, threshold=0.0,
        leaves=(Leaf(lo, *_LEAVES[lo]), Leaf(hi, *_LEAVES[hi])),
        n_features=11)


@dataclass(frozen=True)
class SyntheticSpec:
    dataset_id: str
    n_train: int = 10000
    n_test: int = 10000
    seed: int = 0


def gen_synthetic(spec: SyntheticSpec, rng: RngStream, n: int | None = None) -> Dataset:
    tree = synthetic_tree(spec.dataset_id)
    n = spec.n_train if n is None else n
    X = rng.normal(n, 11)
    p1 = tree.prob_y1(X)
    y = (rng.uniform(n) < p1).astype(np.int64)
    gt = tree.path_masks(X)
    return Dataset(X, y, 2, gt, name=spec.dataset_id)


def load_synthetic(spec: SyntheticSpec):
    """(train, test) with independent named noise streams."""
    train = gen_synthetic(spec, RngStream(spec.seed, f"data/{spec.dataset_id}/train"),
                          spec.n_train)
    test = gen_synthetic(spec, RngStream(spec.seed, f"data/{spec.dataset_id}/test"),
                         spec.n_test)
    return replace(train, split="train"), replace(test, split="test")


# --- IDX-format digit images -------------------------------------------------

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        header = f.read(16)
        if len(header) != 16:
            raise FormatError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != _IDX_IMAGE_MAGIC:
            raise FormatError(f"{path}: bad image magic {magic:#010x}")
        buf = f.read(count * rows * cols)
        if len(buf) != count * rows * cols:
            raise FormatError(f"{path}: truncated image payload")
    return np.frombuffer(buf, dtype=np.uint8).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        header = f.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != _IDX_LABEL_MAGIC:
            raise FormatError(f"{path}: bad label magic {magic:#010x}")
        buf = f.read(count)
        if len(buf) != count:
            raise FormatError(f"{path}: truncated label payload")
    return np.frombuffer(buf, dtype=np.uint8).astype(np.int64)


def write_idx_images(images: np.ndarray, rows: int, cols: int, path):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGE_MAGIC, images.shape[0], rows, cols))
        f.write(images.tobytes())


def write_idx_labels(labels: np.ndarray, path):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(path):
    """(train, test) Datasets from standard IDX files under `path`.

    Accepts plain or .gz files. Pixels are scaled to [0, 1].
    """
    out = []
    for split, (img_name, lbl_name) in _MNIST_FILES.items():
        img_path = _find_idx(path, img_name)
        lbl_path = _find_idx(path, lbl_name)
        images = read_idx_images(img_path)
        labels = read_idx_labels(lbl_path)
        if images.shape[0] != labels.shape[0]:
            raise FormatError(
                f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        ds = Dataset(images.astype(np.float64) / 255.0, labels, 10,
                     split=split, name="mnist")
        out.append(ds)
    return tuple(out)


def _find_idx(root, stem):
    for cand in (stem, stem + ".gz"):
        full = os.path.join(root, cand)
        if os.path.exists(full):
            return full
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


# --- deterministic labels (encoding lab) -------------------------------------

def gen_deterministic(K: int, D: int, N: int, rng: RngStream) -> Dataset:
    """Noise-free labels: class = argmax of K fixed unit-norm linear scores.

    K <= D is required (the regime where a one-feature mask code exists).
    """
    if K > D:
        raise ValueError(f"K={K} > D={D} violates the deterministic-label contract")
    W = rng.normal(K, D)
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    X = rng.normal(N, D)
    y = np.argmax(X @ W.T, axis=1).astype(np.int64)
    gt = np.repeat((np.abs(W) > 0).all(axis=0)[None, :].astype(np.float64), N, axis=0)
    return Dataset(X, y, K, gt, name=f"det{K}x{D}")


def deterministic_rule(K: int, D: int, rng: RngStream):
    """The labelling function itself (for selectors that classify exactly)."""
    W = rng.normal(K, D)
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    return lambda X: np.argmax(np.atleast_2d(X) @ W.T, axis=1).astype(np.int64)


# --- splits and caching -------------------------------------------------------

def standard_split(ds: Dataset, fractions, rng: RngStream):
    """Disjoint, exhaustive, seeded split into len(fractions) pieces."""
    fracs = np.asarray(fractions, dtype=np.float64)
    if abs(fracs.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = ds.n
    counts = np.floor(fracs * n).astype(int)
    for i in range(n - counts.sum()):
        counts[i % len(counts)] += 1
    if np.any(counts == 0):
        raise ValueError("a split came out empty")
    perm = rng.permutation(n)
    names = ("train", "val", "test")
    pieces, at = [], 0
    for i, c in enumerate(counts):
        tag = names[i] if i < len(names) else f"part{i}"
        pieces.append(ds.take(perm[at:at + c], split=tag))
        at += c
    return tuple(pieces)


def save_dataset_csv(ds: Dataset, path):
    header = ",".join([f"f{j}" for j in range(ds.d)] + ["y"])
    with open(path, "w") as f:
        f.write(header + "\n")
        for xi, yi in zip(ds.X, ds.y):
            f.write(",".join(repr(float(v)) for v in xi) + f",{int(yi)}\n")


def load_dataset_csv(path, K):
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header[-1] != "y":
            raise FormatError(f"{path}: missing label column")
        rows = [line.strip().split(",") for line in f if line.strip()]
    arr = np.asarray([[float(v) for v in r] for r in rows])
    return Dataset(arr[:, :-1], arr[:, -1].astype(np.int64), K)


_DS_MAGIC = b"AMDS"


def save_dataset_bin(ds: Dataset, path):
    with open(path, "wb") as f:
        f.write(_DS_MAGIC)
        has_gt = ds.ground_truth is not None
        f.write(struct.pack("<IIIB", ds.n, ds.d, ds.K, int(has_gt)))
        f.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.y, dtype="<i8").tobytes())
        if has_gt:
            f.write(ds.ground_truth.astype(np.uint8).tobytes())


def load_dataset_bin(path):
    with open(path, "rb") as f:
        if f.read(4) != _DS_MAGIC:
            raise FormatError(f"{path}: bad dataset magic")
        n, d, k, has_gt = struct.unpack("<IIIB", f.read(13))
        X = np.frombuffer(f.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        y = np.frombuffer(f.read(8 * n), dtype="<i8").copy()
        gt = None
        if has_gt:
            gt = np.frombuffer(f.read(n * d), dtype=np.uint8).reshape(n, d).astype(np.float64)
    return Dataset(X, y, k, gt)
