"""Pure-numpy reference kernels.

These are the fallback implementations for the hot inner loops; the numba
twins live in kernels_nb and must agree with these to float tolerance.
Selection between the two happens in `amortix.backend`.
"""

from __future__ import annotations

import numpy as np

_TINY = 1e-12


def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    """One bias-corrected Adam step, in place on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def coupled_transform(a, u, v, tau):
    """Relaxed / conditionally-relaxed draws coupled to a Bernoulli sample.

    a: selection logits (p = sigmoid(a), already clamped away from {0,1}),
    u, v: independent Unif(0,1) draws of the same shape.

    Returns (z, s, zt, dzt_da) where z is the relaxed draw in logit space,
    s = 1(z > 0) is the hard sample, zt is the relaxed draw conditioned on s,
    and dzt_da is the elementwise derivative of zt w.r.t. a (the conditional
    coupling depends on a both directly and through p).
    """
    u = np.clip(u, _TINY, 1.0 - _TINY)
    v = np.clip(v, _TINY, 1.0 - _TINY)
    p = 1.0 / (1.0 + np.exp(-a))
    z = (a + np.log(u) - np.log1p(-u)) / tau
    s = (z > 0).astype(np.float64)
    vp = np.where(s == 0.0, v * (1.0 - p), v * p + (1.0 - p))
    vp = np.clip(vp, _TINY, 1.0 - _TINY)
    zt = (a + np.log(vp) - np.log1p(-vp)) / tau
    dvp_dp = np.where(s == 0.0, -v, v - 1.0)
    dzt_da = (1.0 + dvp_dp * p * (1.0 - p) / (vp * (1.0 - vp))) / tau
    return z, s, zt, dzt_da


def subset_grads(X, y_onehot, masks, W1, b1, W2, b2, W3, b3,
                 gW1, gb1, gW2, gb2, gW3, gb3):
    """Gradient step for a stack of per-subset softmax MLPs (D->H->H->K).

    Model i sees X * masks[i]; features outside the subset are fixed at zero,
    so they carry no information and their first-layer weights get zero
    gradient. Gradients of the mean cross entropy are written into gW*/gb*.
    Returns the mean loss across models.
    """
    B = X.shape[0]
    Xm = masks[:, None, :] * X[None, :, :]          # (M, B, D)
    H1 = Xm @ W1 + b1[:, None, :]
    A1 = np.maximum(H1, 0.0)
    H2 = A1 @ W2 + b2[:, None, :]
    A2 = np.maximum(H2, 0.0)
    logits = A2 @ W3 + b3[:, None, :]               # (M, B, K)
    logits -= logits.max(axis=2, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=2, keepdims=True)
    lp = np.log(np.maximum(probs, _TINY))
    loss = -np.mean(np.sum(lp * y_onehot[None, :, :], axis=2))

    dlogits = (probs - y_onehot[None, :, :]) / B    # (M, B, K)
    np.matmul(A2.transpose(0, 2, 1), dlogits, out=gW3)
    gb3[:] = dlogits.sum(axis=1)
    dA2 = dlogits @ W3.transpose(0, 2, 1)
    dA2 *= H2 > 0.0
    np.matmul(A1.transpose(0, 2, 1), dA2, out=gW2)
    gb2[:] = dA2.sum(axis=1)
    dA1 = dA2 @ W2.transpose(0, 2, 1)
    dA1 *= H1 > 0.0
    np.matmul(Xm.transpose(0, 2, 1), dA1, out=gW1)
    gb1[:] = dA1.sum(axis=1)
    return loss


def subset_forward(X, masks, W1, b1, W2, b2, W3, b3):
    """Class probabilities (M, B, K) for the per-subset model stack."""
    Xm = masks[:, None, :] * X[None, :, :]
    A1 = np.maximum(Xm @ W1 + b1[:, None, :], 0.0)
    A2 = np.maximum(A1 @ W2 + b2[:, None, :], 0.0)
    logits = A2 @ W3 + b3[:, None, :]
    logits -= logits.max(axis=2, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=2, keepdims=True)
