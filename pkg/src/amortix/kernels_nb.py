"""Numba-jitted twins of the kernels in kernels_np.

Same signatures, same math; no fastmath so both paths agree to rounding.
Import of this module is guarded by amortix.backend — environments without
a working numba fall back to the numpy path.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_TINY = 1e-12


@njit(cache=True)
def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    # serial on purpose: these arrays are small and thread dispatch would
    # dominate; the per-subset kernels below are the parallel ones
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def _coupled_flat(a, u, v, tau, z, s, zt, dzt):
    for i in range(a.shape[0]):
        ui = min(max(u[i], _TINY), 1.0 - _TINY)
        vi = min(max(v[i], _TINY), 1.0 - _TINY)
        pi = 1.0 / (1.0 + np.exp(-a[i]))
        zi = (a[i] + np.log(ui) - np.log1p(-ui)) / tau
        z[i] = zi
        if zi > 0.0:
            s[i] = 1.0
            vp = vi * pi + (1.0 - pi)
            dvp = vi - 1.0
        else:
            s[i] = 0.0
            vp = vi * (1.0 - pi)
            dvp = -vi
        vp = min(max(vp, _TINY), 1.0 - _TINY)
        zt[i] = (a[i] + np.log(vp) - np.log1p(-vp)) / tau
        dzt[i] = (1.0 + dvp * pi * (1.0 - pi) / (vp * (1.0 - vp))) / tau


def coupled_transform(a, u, v, tau):
    z = np.empty_like(a)
    s = np.empty_like(a)
    zt = np.empty_like(a)
    dzt = np.empty_like(a)
    _coupled_flat(a.ravel(), u.ravel(), v.ravel(), tau,
                  z.ravel(), s.ravel(), zt.ravel(), dzt.ravel())
    return z, s, zt, dzt


@njit(cache=True, parallel=True)
def subset_grads(X, y_onehot, masks, W1, b1, W2, b2, W3, b3,
                 gW1, gb1, gW2, gb2, gW3, gb3):
    M = masks.shape[0]
    B, D = X.shape
    H = W1.shape[2]
    K = W3.shape[2]
    losses = np.zeros(M)
    for mi in prange(M):
        Xm = X * masks[mi]                      # (B, D)
        H1 = Xm @ W1[mi]
        for b in range(B):
            for h in range(H):
                H1[b, h] += b1[mi, h]
        A1 = np.maximum(H1, 0.0)
        H2 = A1 @ W2[mi]
        for b in range(B):
            for h in range(H):
                H2[b, h] += b2[mi, h]
        A2 = np.maximum(H2, 0.0)
        logits = A2 @ W3[mi]
        loss = 0.0
        dlogits = np.empty((B, K))
        for b in range(B):
            mx = logits[b, 0] + b3[mi, 0]
            for k in range(K):
                logits[b, k] += b3[mi, k]
                if logits[b, k] > mx:
                    mx = logits[b, k]
            ssum = 0.0
            for k in range(K):
                e = np.exp(logits[b, k] - mx)
                dlogits[b, k] = e
                ssum += e
            for k in range(K):
                pk = dlogits[b, k] / ssum
                if y_onehot[b, k] > 0.0:
                    loss -= np.log(max(pk, _TINY)) * y_onehot[b, k]
                dlogits[b, k] = (pk - y_onehot[b, k]) / B
        losses[mi] = loss / B
        gW3[mi] = A2.T @ dlogits
        for k in range(K):
            acc = 0.0
            for b in range(B):
                acc += dlogits[b, k]
            gb3[mi, k] = acc
        dA2 = dlogits @ W3[mi].T
        for b in range(B):
            for h in range(H):
                if H2[b, h] <= 0.0:
                    dA2[b, h] = 0.0
        gW2[mi] = A1.T @ dA2
        for h in range(H):
            acc = 0.0
            for b in range(B):
                acc += dA2[b, h]
            gb2[mi, h] = acc
        dA1 = dA2 @ W2[mi].T
        for b in range(B):
            for h in range(H):
                if H1[b, h] <= 0.0:
                    dA1[b, h] = 0.0
        gW1[mi] = Xm.T @ dA1
        for h in range(H):
            acc = 0.0
            for b in range(B):
                acc += dA1[b, h]
            gb1[mi, h] = acc
    return losses.mean()


@njit(cache=True, parallel=True)
def subset_forward(X, masks, W1, b1, W2, b2, W3, b3):
    M = masks.shape[0]
    B = X.shape[0]
    H = W1.shape[2]
    K = W3.shape[2]
    out = np.empty((M, B, K))
    for mi in prange(M):
        Xm = X * masks[mi]
        H1 = Xm @ W1[mi]
        for b in range(B):
            for h in range(H):
                H1[b, h] += b1[mi, h]
        A1 = np.maximum(H1, 0.0)
        H2 = A1 @ W2[mi]
        for b in range(B):
            for h in range(H):
                H2[b, h] += b2[mi, h]
        A2 = np.maximum(H2, 0.0)
        logits = A2 @ W3[mi]
        for b in range(B):
            mx = logits[b, 0] + b3[mi, 0]
            for k in range(K):
                logits[b, k] += b3[mi, k]
                if logits[b, k] > mx:
                    mx = logits[b, k]
            ssum = 0.0
            for k in range(K):
                e = np.exp(logits[b, k] - mx)
                out[mi, b, k] = e
                ssum += e
            for k in range(K):
                out[mi, b, k] /= ssum
    return out
