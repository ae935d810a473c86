"""Dense-network engine: MLPs with exact backprop, Adam, and checkpoints.

Everything downstream (selectors, predictors, evaluators, the per-subset
model stack) is built from the rectifier MLP defined here. All math is
float64. Output heads:

    softmax  K-class probabilities (rows sum to 1)
    sigmoid  elementwise probabilities (selection nets)
    linear   raw logits (Concrete top-k selector)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .backend import kernels
from .errors import DimensionError, FormatError, NonFiniteGradientError
from .rng import RngStream

HEADS = ("softmax", "sigmoid", "linear")
_PROB_FLOOR = 1e-12


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class MLP:
    """Fully-connected rectifier network with a fixed output head."""

    def __init__(self, widths, head, weights=None, biases=None):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = [int(w) for w in widths]
        self.head = head
        self.W = weights if weights is not None else [
            np.zeros((a, b)) for a, b in zip(self.widths, self.widths[1:])
        ]
        self.b = biases if biases is not None else [
            np.zeros(b) for b in self.widths[1:]
        ]
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            if W.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise DimensionError(f"layer {i} parameter shapes do not chain")

    @classmethod
    def init(cls, widths, head, rng: RngStream):
        """He-style scaled-uniform fan-in init, zero biases."""
        W = []
        for a, b in zip(widths, widths[1:]):
            bound = np.sqrt(6.0 / a)
            W.append((rng.uniform(a, b) * 2.0 - 1.0) * bound)
        return cls(widths, head, W, [np.zeros(b) for b in widths[1:]])

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def params(self):
        out = []
        for i in range(len(self.W)):
            out.append((f"layer{i}.W", self.W[i]))
            out.append((f"layer{i}.b", self.b[i]))
        return out

    def copy(self):
        return MLP(self.widths, self.head,
                   [W.copy() for W in self.W], [b.copy() for b in self.b])

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        squeezed = X.ndim == 1
        if squeezed:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.in_width:
            raise DimensionError(
                f"input width {X.shape[-1]} != model input width {self.in_width}")
        return X, squeezed

    def forward(self, X):
        out, _ = self.forward_cache(X)
        return out

    def forward_cache(self, X):
        """Returns (head output, cache); cache feeds backward()."""
        X, squeezed = self._check_input(X)
        acts = [X]
        pre = []
        h = X
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W + b
            pre.append(z)
            h = z if i == last else relu(z)
            acts.append(h)
        if self.head == "softmax":
            out = softmax(h)
        elif self.head == "sigmoid":
            out = sigmoid(h)
        else:
            out = h
        cache = (acts, pre, squeezed)
        return (out[0] if squeezed else out), cache

    def backward(self, cache, dlogits):
        """Backprop from gradient w.r.t. pre-head logits.

        Returns (grads, dX): grads is [(dW, db), ...] per layer, dX the
        gradient w.r.t. the network input.
        """
        acts, pre, squeezed = cache
        d = np.asarray(dlogits, dtype=np.float64)
        if d.ndim == 1:
            d = d[None, :]
        grads = [None] * len(self.W)
        for i in range(len(self.W) - 1, -1, -1):
            if i != len(self.W) - 1:
                d = d * (pre[i] > 0.0)
            dW = acts[i].T @ d
            db = d.sum(axis=0)
            grads[i] = (dW, db)
            d = d @ self.W[i].T
        return grads, (d[0] if squeezed else d)

    def logits(self, X):
        """Pre-head logits (no head applied)."""
        X, squeezed = self._check_input(X)
        h = X
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W + b
            h = z if i == last else relu(z)
        return h[0] if squeezed else h


def cross_entropy_loss(probs, labels):
    """Mean negative log-probability of the true class.

    probs: (B, K) rows on the simplex; labels: (B,) ints in [0, K).
    Returns (loss, dlogits, clamped) with dlogits = (probs - onehot)/B, the
    exact gradient w.r.t. softmax pre-head logits. A zero probability on the
    true class is clamped at 1e-12 and flagged instead of producing NaN.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    B, K = probs.shape
    if labels.shape != (B,):
        raise DimensionError("labels must be one class index per row")
    if labels.min() < 0 or labels.max() >= K:
        raise DimensionError("label outside [0, K)")
    ptrue = probs[np.arange(B), labels]
    clamped = bool(np.any(ptrue < _PROB_FLOOR))
    loss = -np.mean(np.log(np.maximum(ptrue, _PROB_FLOOR)))
    onehot = np.zeros_like(probs)
    onehot[np.arange(B), labels] = 1.0
    dlogits = (probs - onehot) / B
    return loss, dlogits, clamped


def log_prob_of_labels(probs, labels):
    """Per-instance log probability of the labelled class, floored at 1e-12."""
    probs = np.atleast_2d(probs)
    idx = np.arange(probs.shape[0])
    return np.log(np.maximum(probs[idx, np.atleast_1d(labels)], _PROB_FLOOR))


def onehot(labels, K):
    labels = np.atleast_1d(labels)
    out = np.zeros((labels.shape[0], K))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class AdamState:
    """Adam moments for one model; step() applies bias-corrected updates."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        """params: [(name, array)]; grads either [(dW, db), ...] per layer or
        already flattened to match. Rejects the whole step on any non-finite
        gradient.
        """
        if grads and isinstance(grads[0], tuple):
            grads = _flatten_grads(grads)
        flat = []
        for (name, p), g in zip(params, grads):
            g = np.asarray(g)
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape mismatch at {name}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient at {name}")
            flat.append((name, p, g))
        self.t += 1
        k = kernels()
        for name, p, g in flat:
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            k.adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                          self.m[name].reshape(-1), self.v[name].reshape(-1),
                          self.t, self.lr, self.beta1, self.beta2, self.eps)


def model_grads_for_loss(model: MLP, X, labels):
    """(loss, grads) of mean cross entropy for a softmax-head model."""
    probs, cache = model.forward_cache(X)
    loss, dlogits, _ = cross_entropy_loss(probs, labels)
    grads, _ = model.backward(cache, dlogits)
    return loss, grads


def finite_diff_check(model: MLP, loss_fn, X, eps=1e-5, max_entries=None,
                      rng: RngStream | None = None):
    """Max relative disagreement between backprop and central differences.

    loss_fn(model, X) -> (loss, grads) supplies the analytic side; the same
    callable is re-evaluated (loss only) under +/- eps perturbations of each
    parameter entry. max_entries caps the number of probed entries per
    parameter array (seeded subsample) for larger nets.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps outside [1e-7, 1e-3]")
    _, grads = loss_fn(model, X)
    worst = 0.0
    pick = rng or RngStream(0, "fdcheck")
    for (name, p), (ga) in zip(model.params(), _flatten_grads(grads)):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(ga).reshape(-1)
        idx = np.arange(flat_p.shape[0])
        if max_entries is not None and flat_p.shape[0] > max_entries:
            idx = pick.integers(0, flat_p.shape[0], size=max_entries)
        for j in idx:
            orig = flat_p[j]
            flat_p[j] = orig + eps
            lp, _ = loss_fn(model, X)
            flat_p[j] = orig - eps
            lm, _ = loss_fn(model, X)
            flat_p[j] = orig
            fd = (lp - lm) / (2.0 * eps)
            err = abs(flat_g[j] - fd) / max(1.0, abs(flat_g[j]))
            if err > worst:
                worst = err
    return worst


def _flatten_grads(grads):
    out = []
    for dW, db in grads:
        out.append(dW)
        out.append(db)
    return out


# --- checkpoint format -----------------------------------------------------
# AMX1: magic, u32 layer count, u32 widths, u8 head, then per layer the
# row-major float64 little-endian weight matrix followed by the bias vector.

_MAGIC = b"AMX1"
_HEAD_CODE = {h: i for i, h in enumerate(HEADS)}


def save_checkpoint(model: MLP, path, config_hash="", seed=0):
    nlayers = len(model.W)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", nlayers))
        f.write(struct.pack(f"<{nlayers + 1}I", *model.widths))
        f.write(struct.pack("<B", _HEAD_CODE[model.head]))
        for W, b in zip(model.W, model.b):
            f.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(str(path) + ".txt", "w") as f:
        f.write(f"config_hash={config_hash}\nseed={seed}\n")


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        (nlayers,) = struct.unpack("<I", f.read(4))
        widths = struct.unpack(f"<{nlayers + 1}I", f.read(4 * (nlayers + 1)))
        (head_code,) = struct.unpack("<B", f.read(1))
        if head_code >= len(HEADS):
            raise FormatError(f"{path}: unknown head code {head_code}")
        W, b = [], []
        for a, c in zip(widths, widths[1:]):
            wbuf = f.read(8 * a * c)
            bbuf = f.read(8 * c)
            if len(wbuf) != 8 * a * c or len(bbuf) != 8 * c:
                raise FormatError(f"{path}: truncated checkpoint")
            W.append(np.frombuffer(wbuf, dtype="<f8").reshape(a, c).copy())
            b.append(np.frombuffer(bbuf, dtype="<f8").copy())
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return MLP(list(widths), HEADS[head_code], W, b)


def read_sidecar(path):
    out = {}
    with open(str(path) + ".txt") as f:
        for line in f:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                out[k] = v
    return out
