"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx`` (same signatures)."""

from __future__ import annotations

import numpy as np

GELU_C = 0.7978845608028654
GELU_A = 0.044715


def gelu_fwd(x):
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + GELU_A * x2))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g, x, t):
    dt = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    xhat = xc * inv[:, None]
    return xhat * gain + bias, xhat, inv


def layer_norm_bwd(g, xhat, inv, gain):
    dxhat = g * gain
    dx = inv[:, None] * (dxhat - dxhat.mean(axis=1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def softmax_rows(x, keep, rows_per_group):
    groups = keep.shape[0]
    x3 = x.reshape(groups, rows_per_group, -1)
    k3 = keep.astype(bool)[:, None, :]
    z = np.where(k3, x3, -np.inf)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=2, keepdims=True)).reshape(x.shape)


def softmax_rows_bwd(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def perplexity_search(d2, target_entropy, tol, max_iter):
    """Bandwidth search run on all rows at once; same bracketing rule as the compiled loop."""
    n = d2.shape[0]
    off = ~np.eye(n, dtype=bool)
    dmin = np.where(off, d2, np.inf).min(axis=1)
    dd = np.where(off, d2 - dmin[:, None], 0.0)
    mean_d = dd.sum(axis=1) / (n - 1)
    beta = np.where(mean_d > 0, 1.0 / np.where(mean_d > 0, mean_d, 1.0), 1.0)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    P = np.zeros((n, n))
    h = np.zeros(n)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        e = np.exp(-beta[idx, None] * dd[idx]) * off[idx]
        s = e.sum(axis=1)
        hh = np.log(s) + beta[idx] * (dd[idx] * e).sum(axis=1) / s
        P[idx] = e / s[:, None]
        h[idx] = hh
        done = np.abs(hh - target_entropy) < tol
        up = (hh > target_entropy) & ~done
        down = ~up & ~done
        b = beta[idx]
        new_b = b.copy()
        lo_i, hi_i = lo[idx], hi[idx]
        lo_i = np.where(up, b, lo_i)
        new_b = np.where(up, np.where(np.isinf(hi_i), b * 2.0, 0.5 * (b + hi_i)), new_b)
        hi_i = np.where(down, b, hi_i)
        new_b = np.where(down, 0.5 * (b + lo_i), new_b)
        lo[idx], hi[idx] = lo_i, hi_i
        # rows that converged keep the beta that produced their P
        beta[idx] = np.where(done, b, new_b)
        active[idx[done]] = False
    return P, beta, h


def tsne_gradient(P, Y, exaggeration, compute_kl):
    diff = Y[:, None, :] - Y[None, :, :]
    num = 1.0 / (1.0 + (diff * diff).sum(axis=2))
    np.fill_diagonal(num, 0.0)
    z = num.sum()
    Q = num / z
    mult = (exaggeration * P - Q) * num
    grad = 4.0 * (mult[:, :, None] * diff).sum(axis=1)
    kl = 0.0
    if compute_kl:
        mask = P > 0
        kl = float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))
    return grad, kl


def _loss(X, y, w0, w1, b, pen0, pen1):
    z = X[:, 0] * w0 + X[:, 1] * w1 + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * (pen0 * w0 * w0 + pen1 * w1 * w1))


def logistic_gd(X, y, pen0, pen1, step, tol, max_iter):
    w0 = w1 = b = 0.0
    n = X.shape[0]
    loss = _loss(X, y, w0, w1, b, pen0, pen1)
    trace = [loss]
    it = 0
    while it < max_iter:
        z = X[:, 0] * w0 + X[:, 1] * w1 + b
        r = 0.5 * (1.0 + np.tanh(0.5 * z)) - y
        g0 = float(r @ X[:, 0]) / n + pen0 * w0
        g1 = float(r @ X[:, 1]) / n + pen1 * w1
        gb = float(r.sum()) / n
        while True:
            nw0, nw1, nb = w0 - step * g0, w1 - step * g1, b - step * gb
            new_loss = _loss(X, y, nw0, nw1, nb, pen0, pen1)
            if new_loss <= loss or step < 1e-300:
                break
            step *= 0.5
        w0, w1, b = nw0, nw1, nb
        it += 1
        trace.append(new_loss)
        if loss - new_loss < tol:
            break
        loss = new_loss
    return w0, w1, b, it, np.asarray(trace)


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    return p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
