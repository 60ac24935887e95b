"""Pure numpy implementations of the fused numeric kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and semantics. Arrays are C-contiguous float64 unless noted.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def attention_forward(qkv, heads):
    """Causal multi-head self-attention over a packed (L, 3C) projection.

    Returns (out, probs) where probs has shape (heads, L, L) and is kept for
    the backward pass.
    """
    L, c3 = qkv.shape
    C = c3 // 3
    d = C // heads
    scale = 1.0 / np.sqrt(d)
    q = qkv[:, :C].reshape(L, heads, d).transpose(1, 0, 2)
    k = qkv[:, C : 2 * C].reshape(L, heads, d).transpose(1, 0, 2)
    v = qkv[:, 2 * C :].reshape(L, heads, d).transpose(1, 0, 2)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    mask = np.triu(np.ones((L, L), dtype=bool), 1)
    scores[:, mask] = -np.inf
    scores -= scores.max(axis=2, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=2, keepdims=True)
    out = np.matmul(probs, v).transpose(1, 0, 2).reshape(L, C)
    return np.ascontiguousarray(out), probs


def attention_backward(grad_out, qkv, probs, heads):
    L, c3 = qkv.shape
    C = c3 // 3
    d = C // heads
    scale = 1.0 / np.sqrt(d)
    q = qkv[:, :C].reshape(L, heads, d).transpose(1, 0, 2)
    k = qkv[:, C : 2 * C].reshape(L, heads, d).transpose(1, 0, 2)
    v = qkv[:, 2 * C :].reshape(L, heads, d).transpose(1, 0, 2)
    go = grad_out.reshape(L, heads, d).transpose(1, 0, 2)
    dv = np.matmul(probs.transpose(0, 2, 1), go)
    dp = np.matmul(go, v.transpose(0, 2, 1))
    ds = probs * (dp - (dp * probs).sum(axis=2, keepdims=True)) * scale
    dq = np.matmul(ds, k)
    dk = np.matmul(ds.transpose(0, 2, 1), q)
    out = np.empty_like(qkv)
    out[:, :C] = dq.transpose(1, 0, 2).reshape(L, C)
    out[:, C : 2 * C] = dk.transpose(1, 0, 2).reshape(L, C)
    out[:, 2 * C :] = dv.transpose(1, 0, 2).reshape(L, C)
    return out


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def layer_norm_backward(grad_out, xhat, rstd, gain):
    n = xhat.shape[1]
    dxhat = grad_out * gain
    dx = rstd / n * (
        n * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    dgain = (grad_out * xhat).sum(axis=0, keepdims=True)
    dbias = grad_out.sum(axis=0, keepdims=True)
    return dx, dgain, dbias


_GELU_K = 0.7978845608028654  # sqrt(2 / pi)


def gelu_forward(x):
    """Tanh-form GELU; returns (out, tanh term) for the backward pass."""
    th = np.tanh(_GELU_K * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + th), th


def gelu_backward(grad_out, x, th):
    du = _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return grad_out * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def log_softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_backward(grad_out, out):
    return grad_out - np.exp(out) * grad_out.sum(axis=1, keepdims=True)


def bernoulli_loglik(sims, targets, eps):
    """Per-row sum of y*ln(s) + (1-y)*ln(1-s) with s clamped to [eps, 1-eps].

    Returns (loglik per row, d loglik / d sims).
    """
    s = np.clip(sims, eps, 1.0 - eps)
    ll = (targets * np.log(s) + (1.0 - targets) * np.log1p(-s)).sum(axis=1)
    inside = (sims >= eps) & (sims <= 1.0 - eps)
    grad = np.where(inside, targets / s - (1.0 - targets) / (1.0 - s), 0.0)
    return ll, grad


def best_interval(sims, eps):
    """Exhaustive argmax of the interval Bernoulli log-likelihood.

    Scans all T*(T+1)/2 inclusive intervals with prefix sums; ties resolve to
    the earliest start, then the shortest interval.
    """
    s = np.clip(np.asarray(sims, dtype=np.float64), eps, 1.0 - eps)
    pos = np.log(s)
    neg = np.log1p(-s)
    base = neg.sum()
    gain = np.concatenate(([0.0], np.cumsum(pos - neg)))
    T = s.shape[0]
    best = (-np.inf, 0, 0)
    for a in range(T):
        row = gain[a + 1 :] - gain[a]
        b = int(np.argmax(row))
        if row[b] > best[0]:
            best = (float(row[b]), a, a + b)
    return best[1], best[2], float(base + best[0])


def greedy_match(ious, thresh):
    """One-to-one greedy matching in descending IoU order.

    Ties break by (pred index, gt index). Returns a list of (pred, gt) pairs.
    """
    n_p, n_g = ious.shape
    order = sorted(
        ((float(ious[i, j]), i, j) for i in range(n_p) for j in range(n_g) if ious[i, j] >= thresh),
        key=lambda r: (-r[0], r[1], r[2]),
    )
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in order:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs
