"""Selection quality metrics and the masked-input audits.

Two independent audit routes exist on purpose: the trained evaluator
(audit_with_evalx) and a collection of models each trained on one fixed
feature subset (SubsetOracle / c_auroc). Their agreement is itself a tested
property, so neither may be defined in terms of the other.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .backend import kernels
from .data import Dataset
from .errors import DimensionError
from .nn import MLP, AdamState, onehot
from .rng import RngStream


def _rankdata(scores):
    """Average ranks (1-based); ties share the mean of their positions."""
    scores = np.asarray(scores)
    _, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    start = cum - counts
    avg = (start + 1 + cum) / 2.0
    return avg[inv]


def auroc(scores, labels):
    """Probability that a random positive outranks a random negative.

    Ties get half credit (rank-statistic form). Binary labels use the given
    scores directly; (N, K) score matrices with K-class labels are averaged
    one-vs-rest per class. Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 2:
        vals = []
        for k in range(scores.shape[1]):
            a = auroc(scores[:, k], (labels == k).astype(np.int64))
            if a is not None:
                vals.append(a)
        return float(np.mean(vals)) if vals else None
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels must align")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def accuracy(probs, labels):
    return float(np.mean(np.argmax(np.atleast_2d(probs), axis=1) == labels))


def selection_metrics(masks, ground_truth, control_features):
    """(cfsr, tpr, fdr), each in [0, 1].

    cfsr: mean over instances of the fraction of control features selected;
    tpr: per-instance |mask & truth| / |truth|, averaged;
    fdr: per-instance |mask \\ truth| / |mask|, averaged, 0 for empty masks.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(ground_truth, dtype=np.float64))
    if masks.shape != gt.shape:
        raise DimensionError("masks and ground truth must align")
    ctrl = np.zeros(masks.shape[1])
    ctrl[list(control_features)] = 1.0
    if ctrl.sum() == 0:
        raise ValueError("need at least one control feature")

    cfsr = float(np.mean((masks * ctrl).sum(axis=1) / ctrl.sum()))
    hits = (masks * gt).sum(axis=1)
    truth_sizes = gt.sum(axis=1)
    tpr = float(np.mean(np.where(truth_sizes > 0, hits / np.maximum(truth_sizes, 1), 0.0)))
    mask_sizes = masks.sum(axis=1)
    false_hits = (masks * (1.0 - gt)).sum(axis=1)
    fdr = float(np.mean(np.where(mask_sizes > 0, false_hits / np.maximum(mask_sizes, 1), 0.0)))
    return cfsr, tpr, fdr


def audit_with_evalx(evaluator: MLP, ds_test: Dataset, masks):
    """(e_acc, e_auroc) of the given selections under the trained evaluator.

    The evaluator consumes the hard-mask encoding and is never trained or
    adapted on the audited masks; it scores them as arbitrary subsets.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    if masks.shape != ds_test.X.shape:
        raise DimensionError("masks must align with the test features")
    if evaluator.in_width != 2 * ds_test.d:
        raise ValueError("evaluator expects the hard-mask encoding; refusing to audit")
    inp = np.concatenate([ds_test.X * masks, masks], axis=1)
    probs = evaluator.forward(inp)
    e_acc = accuracy(probs, ds_test.y)
    scores = probs[:, 1] if ds_test.K == 2 else probs
    return e_acc, auroc(scores, ds_test.y)


# --- the per-subset model collection -----------------------------------------

@dataclass
class SubsetOracle:
    """One small model per feature subset, trained on x restricted to it."""

    masks: np.ndarray            # (M, D) 0/1, row index = subset id
    index: dict                  # bitmask int -> row
    params: tuple                # stacked (W1, b1, W2, b2, W3, b3)
    covered: np.ndarray          # (M,) bool
    d: int
    k_classes: int

    def subset_id(self, mask):
        bits = int(np.round(np.asarray(mask) @ (1 << np.arange(self.d))))
        return self.index.get(bits)

    def predict(self, rows, X):
        """Probabilities from model `rows[i]` applied to X[i] (grouped)."""
        rows = np.asarray(rows)
        out = np.empty((X.shape[0], self.k_classes))
        k = kernels()
        for r in np.unique(rows):
            sel = rows == r
            probs = k.subset_forward(np.ascontiguousarray(X[sel]),
                                     self.masks[r:r + 1], *self.params)
            out[sel] = probs[0]
        return out


def all_subset_masks(d):
    ids = np.arange(1 << d, dtype=np.int64)
    return ((ids[:, None] >> np.arange(d)) & 1).astype(np.float64)


def build_subset_oracle(ds_train: Dataset, epochs=60, hidden=32, batch=256,
                        lr=1e-3, seed=0, subsets=None, max_models=None) -> SubsetOracle:
    """Train the collection; exhaustive over all 2^D subsets by default.

    `subsets` (list of bitmask ints) switches to on-demand coverage for
    wider feature spaces. `max_models` is the budget: subsets beyond it stay
    uncovered and are reported as such by c_auroc.
    """
    d, K = ds_train.d, ds_train.K
    if subsets is None:
        if d > 14:
            raise ValueError("exhaustive oracle only supported for D <= 14; pass subsets")
        masks = all_subset_masks(d)
        ids = np.arange(1 << d, dtype=np.int64)
    else:
        ids = np.asarray(sorted(set(int(s) for s in subsets)), dtype=np.int64)
        masks = ((ids[:, None] >> np.arange(d)) & 1).astype(np.float64)
    covered = np.ones(len(ids), dtype=bool)
    if max_models is not None and len(ids) > max_models:
        covered[max_models:] = False
        masks = masks.copy()
    index = {int(b): i for i, b in enumerate(ids)}

    M = len(ids)
    rng = RngStream(seed, "subset-oracle/init")
    shuffle = RngStream(seed, "subset-oracle/shuffle")

    def he(a, b, n):
        bound = np.sqrt(6.0 / a)
        return (rng.uniform(n, a, b) * 2.0 - 1.0) * bound

    W1, b1 = he(d, hidden, M), np.zeros((M, hidden))
    W2, b2 = he(hidden, hidden, M), np.zeros((M, hidden))
    W3, b3 = he(hidden, K, M), np.zeros((M, K))
    params = (W1, b1, W2, b2, W3, b3)
    grads = tuple(np.zeros_like(p) for p in params)
    moments = tuple((np.zeros_like(p), np.zeros_like(p)) for p in params)

    train_masks = masks.copy()
    train_masks[~covered] = 0.0
    Y = onehot(ds_train.y, K)
    k = kernels()
    t = 0
    for _ in range(epochs):
        order = shuffle.permutation(ds_train.n)
        for at in range(0, ds_train.n, batch):
            idx = order[at:at + batch]
            Xb = np.ascontiguousarray(ds_train.X[idx])
            Yb = np.ascontiguousarray(Y[idx])
            k.subset_grads(Xb, Yb, train_masks, *params, *grads)
            t += 1
            for p, g, (m, v) in zip(params, grads, moments):
                k.adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1),
                              v.reshape(-1), t, lr, 0.9, 0.999, 1e-8)
    return SubsetOracle(masks, index, params, covered, d, K)


def c_auroc(oracle: SubsetOracle, ds_test: Dataset, masks):
    """AUROC when every instance is scored by its own subset's model.

    Returns (rate, n_excluded); instances whose subset is uncovered by the
    oracle are excluded and counted.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    rows = np.empty(masks.shape[0], dtype=np.int64)
    ok = np.ones(masks.shape[0], dtype=bool)
    weights = 1 << np.arange(oracle.d)
    bits = np.round(masks @ weights).astype(np.int64)
    for i, b in enumerate(bits):
        r = oracle.index.get(int(b))
        if r is None or not oracle.covered[r]:
            ok[i] = False
        else:
            rows[i] = r
    if not np.any(ok):
        return None, int((~ok).sum())
    probs = oracle.predict(rows[ok], ds_test.X[ok])
    scores = probs[:, 1] if ds_test.K == 2 else probs
    return auroc(scores, ds_test.y[ok]), int((~ok).sum())


@dataclass
class MetricReport:
    """One row of the results table."""

    method: str
    dataset: str
    seed: int
    config: dict = field(default_factory=dict)
    acc: float | None = None
    auroc: float | None = None
    e_acc: float | None = None
    e_auroc: float | None = None
    c_auroc: float | None = None
    cfsr: float | None = None
    tpr: float | None = None
    fdr: float | None = None
    mean_selected: float | None = None

    FIELDS = ("method", "dataset", "seed", "lambda_or_k", "acc", "auroc",
              "e_acc", "e_auroc", "c_auroc", "cfsr", "tpr", "fdr", "mean_selected")

    def lambda_or_k(self):
        for key in ("lam", "k"):
            if self.config.get(key) is not None:
                return self.config[key]
        return None

    def as_dict(self):
        d = asdict(self)
        d["lambda_or_k"] = self.lambda_or_k()
        return d

    def csv_row(self):
        vals = []
        d = self.as_dict()
        for name in self.FIELDS:
            v = d.get(name)
            vals.append("" if v is None else
                        (f"{v:.6f}" if isinstance(v, float) else str(v)))
        return ",".join(vals)
