"""Selector distributions and their gradient estimators.

Three routes to a selector gradient:

* rebar_gradient: score-function estimate whose control variate is the same
  predictor evaluated at coupled continuous relaxations of the discrete
  sample. The relaxed draw z and the conditionally-relaxed draw zt live in
  logit space; what the predictor sees is sigmoid(z) pushed through the hard
  masking encoding. The sparsity penalty enters analytically through the
  selection probabilities rather than through the score term.
* score_cv_gradient: plain score-function estimate whose baseline is a
  full-input control network (pass control_net=None for the raw estimator).
* relaxed top-k sampling: reparameterized gradients through the columnwise
  max of k Concrete draws; no score term at all.

All estimators return ascent directions for the selector parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import kernels
from .errors import EstimatorError
from .nn import MLP, log_prob_of_labels, onehot
from .rng import RngStream

_P_CLAMP = 1e-6
_LOGIT_MAX = float(np.log((1.0 - _P_CLAMP) / _P_CLAMP))


@dataclass
class BernoulliSelector:
    """Independent Bernoulli selections with probabilities sigmoid(net(x))."""

    net: MLP
    tau: float = 0.1

    def __post_init__(self):
        if self.net.head != "sigmoid":
            raise ValueError("Bernoulli selector net needs a sigmoid head")

    def probs(self, X):
        return _clamp_p(self.net.forward(np.atleast_2d(X)))

    def sample(self, X, rng: RngStream):
        p = self.probs(X)
        return (rng.uniform(*p.shape) < p).astype(np.float64)

    def threshold(self, X, at=0.5):
        return (self.probs(X) > at).astype(np.float64)


@dataclass
class CoupledSample:
    """A hard draw plus the relaxations coupled to it (all in logit space)."""

    s: np.ndarray
    z: np.ndarray
    ztilde: np.ndarray
    u: np.ndarray
    v: np.ndarray
    dztilde_da: np.ndarray


@dataclass
class GradientEstimate:
    grads: list                      # ascent direction, [(dW, db), ...]
    estimator: str
    diagnostics: dict = field(default_factory=dict)


def _clamp_p(p):
    return np.clip(p, _P_CLAMP, 1.0 - _P_CLAMP)


def _selector_state(selector, X):
    """Clamped logits + forward cache + in-range indicator."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _, cache = selector.net.forward_cache(X)
    a_raw = cache[1][-1]                       # pre-head logits
    inside = (np.abs(a_raw) < _LOGIT_MAX).astype(np.float64)
    a = np.clip(a_raw, -_LOGIT_MAX, _LOGIT_MAX)
    return X, a, inside, cache


def sample_coupled(selector: BernoulliSelector, X, rng: RngStream) -> CoupledSample:
    X, a, _, _ = _selector_state(selector, X)
    u = rng.uniform(*a.shape)
    v = rng.uniform(*a.shape)
    z, s, zt, dzt = kernels().coupled_transform(a, u, v, selector.tau)
    return CoupledSample(s, z, zt, u, v, dzt)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _logprob_and_input_grad(predictor, X, mask_values, y):
    """h = log q(y | masked input) per instance, plus dh/d(mask entries).

    The hard-mask encoding is [x * m, m]; by the chain rule the gradient
    w.r.t. the mask entry m_j combines both channels.
    """
    D = X.shape[1]
    inp = np.concatenate([X * mask_values, mask_values], axis=1)
    probs, cache = predictor.forward_cache(inp)
    h = log_prob_of_labels(probs, y)
    dlogits = onehot(y, probs.shape[1]) - probs       # ascent on log prob
    _, dinp = predictor.backward(cache, dlogits)
    dmask = dinp[:, :D] * X + dinp[:, D:]
    return h, dmask


def _logprob_only(predictor, X, mask_values, y):
    inp = np.concatenate([X * mask_values, mask_values], axis=1)
    return log_prob_of_labels(predictor.forward(inp), y)


def rebar_gradient(selector: BernoulliSelector, predictor: MLP, X, y, lam,
                   rng: RngStream) -> GradientEstimate:
    """Low-variance score-function gradient of
    E_s[log q_pred(y | m(x, s)) - lam * |s|_0] w.r.t. selector parameters.
    """
    X, a, inside, cache = _selector_state(selector, X)
    B = X.shape[0]
    y = np.atleast_1d(y)
    tau = selector.tau
    p = _sigmoid(a)

    u = rng.uniform(*a.shape)
    v = rng.uniform(*a.shape)
    z, s, zt, dzt_da = kernels().coupled_transform(a, u, v, tau)
    mz = _sigmoid(z)
    mzt = _sigmoid(zt)

    h_s = _logprob_only(predictor, X, s, y)
    h_zt, dmask_zt = _logprob_and_input_grad(predictor, X, mzt, y)
    h_z, dmask_z = _logprob_and_input_grad(predictor, X, mz, y)
    for name, arr in (("h(s)", h_s), ("h(zt)", h_zt), ("h(z)", h_z)):
        if not np.all(np.isfinite(arr)):
            raise EstimatorError(f"non-finite {name} in estimator input")

    w = h_s - h_zt
    dA = w[:, None] * (s - p)                          # score term
    dA -= lam * p * (1.0 - p)                           # analytic |s|_0 term
    dA += dmask_z * mz * (1.0 - mz) / tau               # + grad h(z)
    dA -= dmask_zt * mzt * (1.0 - mzt) * dzt_da         # - grad h(zt)
    dA *= inside
    grads, _ = selector.net.backward(cache, dA / B)
    return GradientEstimate(
        grads, "rebar",
        {"cv_gap_mean": float(w.mean()), "cv_gap_std": float(w.std()),
         "mean_selected": float(s.mean())})


def score_cv_gradient(selector: BernoulliSelector, predictor: MLP,
                      control_net: MLP | None, X, y, lam,
                      rng: RngStream) -> GradientEstimate:
    """[log q_pred(y|m(x,s)) - log q_control(y|x) - lam*|s|_0] * score."""
    X, a, inside, cache = _selector_state(selector, X)
    B = X.shape[0]
    y = np.atleast_1d(y)
    p = _sigmoid(a)
    s = (rng.uniform(*a.shape) < p).astype(np.float64)

    h = _logprob_only(predictor, X, s, y)
    if control_net is not None:
        h_ctrl = log_prob_of_labels(control_net.forward(X), y)
    else:
        h_ctrl = np.zeros_like(h)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(h_ctrl))):
        raise EstimatorError("non-finite log-likelihood in estimator input")

    coef = h - h_ctrl - lam * s.sum(axis=1)
    dA = coef[:, None] * (s - p) * inside
    grads, _ = selector.net.backward(cache, dA / B)
    tag = "score-cv" if control_net is not None else "score"
    return GradientEstimate(
        grads, tag,
        {"coef_mean": float(coef.mean()), "coef_std": float(coef.std()),
         "mean_selected": float(s.mean())})


@dataclass
class ConcreteTopK:
    """Relaxed top-k selection: columnwise max of k Concrete draws."""

    net: MLP                       # linear head, one logit per feature
    k: int
    tau: float = 0.1

    def __post_init__(self):
        if self.net.head != "linear":
            raise ValueError("Concrete top-k selector net needs a linear head")
        if not 1 <= self.k <= self.net.out_width:
            raise ValueError("k outside [1, D]")

    def hard_topk(self, X):
        """Deterministic evaluation-time mask: exactly k ones at the largest
        logits (stable order breaks ties)."""
        logits = np.atleast_2d(self.net.forward(X))
        order = np.argsort(-logits, axis=1, kind="stable")[:, :self.k]
        masks = np.zeros_like(logits)
        np.put_along_axis(masks, order, 1.0, axis=1)
        return masks


def sample_topk(sel: ConcreteTopK, X, rng: RngStream):
    """One relaxed mask per instance plus the matching hard top-k mask.

    Returns (relaxed, hard, aux); aux feeds topk_backward for training.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _, cache = sel.net.forward_cache(X)
    logits = cache[1][-1]
    B, D = logits.shape
    g = -np.log(-np.log(np.clip(rng.uniform(sel.k, B, D), 1e-12, 1.0 - 1e-12)))
    scaled = (logits[None, :, :] + g) / sel.tau
    scaled -= scaled.max(axis=2, keepdims=True)
    e = np.exp(scaled)
    C = e / e.sum(axis=2, keepdims=True)          # (k, B, D) Concrete draws
    relaxed = C.max(axis=0)
    winner = C.argmax(axis=0)                     # which draw owns each entry
    hard = sel.hard_topk(X)
    return relaxed, hard, (C, winner, cache)


def topk_backward(sel: ConcreteTopK, aux, d_relaxed):
    """Ascent gradient for the selector params given d(objective)/d(relaxed)."""
    C, winner, cache = aux
    k, B, D = C.shape
    dC = np.zeros_like(C)
    kidx = winner.reshape(-1)
    bidx = np.repeat(np.arange(B), D)
    didx = np.tile(np.arange(D), B)
    dC[kidx, bidx, didx] = d_relaxed.reshape(-1)
    inner = (dC * C).sum(axis=2, keepdims=True)
    dscaled = C * (dC - inner)
    dlogits = dscaled.sum(axis=0) / sel.tau
    grads, _ = sel.net.backward(cache, dlogits)
    return grads
