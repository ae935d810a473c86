"""Constructive demonstration that mask bit-patterns can carry predictions.

A selector that classifies internally and emits the class's codeword as its
"selection", paired with a predictor that decodes codewords and ignores
feature values entirely, maximizes the joint objective while conveying zero
feature information. The capacity function says how few selected features
such a code needs; the objective-gap calculator shows why sparsity pressure
prefers dropping branch features.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .data import ControlFlowTree, Dataset
from .nn import onehot


def capacity_J(d: int, targets: int):
    """Smallest j with sum_{i<=j} C(d, i) >= targets; None if 2^d < targets."""
    if d < 1 or targets < 1:
        raise ValueError("need d >= 1 and targets >= 1")
    if targets > (1 << d):
        return None
    total = 0
    for j in range(d + 1):
        total += comb(d, j)
        if total >= targets:
            return j
    return None


def masks_by_weight(d: int, count: int) -> np.ndarray:
    """First `count` binary masks in weight-then-lexicographic order."""
    out = np.zeros((count, d))
    i = 0
    for w in range(d + 1):
        for idxs in combinations(range(d), w):
            if i == count:
                return out
            out[i, list(idxs)] = 1.0
            i += 1
    if i < count:
        raise ValueError(f"only {i} masks exist for d={d}")
    return out


@dataclass
class EncoderPair:
    """Codebook of low-weight masks plus its inverse."""

    codebook: np.ndarray          # (targets, D), row t encodes target t
    J: int

    def __post_init__(self):
        self._inverse = {self._bits(row): t for t, row in enumerate(self.codebook)}
        if len(self._inverse) != len(self.codebook):
            raise ValueError("codebook must be injective")

    @staticmethod
    def _bits(row):
        return int(np.round(np.asarray(row) @ (1 << np.arange(len(row)))))

    @property
    def d(self):
        return self.codebook.shape[1]

    def encode(self, targets) -> np.ndarray:
        return self.codebook[np.atleast_1d(targets)]

    def decode(self, masks) -> np.ndarray:
        masks = np.atleast_2d(masks)
        return np.asarray([self._inverse[self._bits(row)] for row in masks],
                          dtype=np.int64)


def build_encoder(K: int, D: int) -> EncoderPair:
    """Codebook for K classes over D features, codeword weights <= J."""
    J = capacity_J(D, K)
    if J is None:
        raise ValueError(f"no capacity: 2^{D} < {K}")
    return EncoderPair(masks_by_weight(D, K), J)


def encoder_masks(pair: EncoderPair, labeler, X) -> np.ndarray:
    """The degenerate selector: classify x, emit the class's codeword."""
    return pair.encode(labeler(X))


def encoder_predict(pair: EncoderPair, K: int, masks) -> np.ndarray:
    """The degenerate predictor: decode the mask, ignore every value."""
    return onehot(pair.decode(masks), K)


def encoding_pathology(pair: EncoderPair, labeler, ds: Dataset):
    """Run the encoder end to end; returns (acc, mean_selected, masks).

    acc is the joint selector+predictor accuracy (1.0 when the labeler is
    the true rule); mean_selected is E|s|_0, bounded by pair.J.
    """
    masks = encoder_masks(pair, labeler, ds.X)
    probs = encoder_predict(pair, ds.K, masks)
    acc = float(np.mean(np.argmax(probs, axis=1) == ds.y))
    return acc, float(masks.sum(axis=1).mean()), masks


def jam_objective_gap(tree: ControlFlowTree, ds: Dataset, lam: float):
    """Joint-objective values for the two proof selectors.

    Case 1 selects the full root-to-leaf path T(x) (control features
    included); case 2 selects only the leaf features S(x). Both achieve the
    same exact log-likelihood, so the gap is lam * E|C(x)|.
    """
    p1 = tree.prob_y1(ds.X)
    loglik = float(np.mean(np.where(ds.y == 1, np.log(p1), np.log1p(-p1))))
    path_sizes = tree.path_masks(ds.X).sum(axis=1)
    leaf_sizes = tree.leaf_masks(ds.X).sum(axis=1)
    l_case1 = loglik - lam * float(path_sizes.mean())
    l_case2 = loglik - lam * float(leaf_sizes.mean())
    return l_case1, l_case2
