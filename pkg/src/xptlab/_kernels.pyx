# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. ``_kernels_py`` mirrors every function here in numpy."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, tanh, fabs, INFINITY

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


# --- encoder elementwise ops --------------------------------------------
# Fused over float32/float64 so training can run in single precision;
# accumulators stay double either way.

ctypedef fused real:
    float
    double


def gelu_fwd(real[::1] x):
    """Returns (gelu(x), tanh term). The tanh itself runs through numpy's vector path."""
    cdef Py_ssize_t i, n = x.shape[0]
    dt = np.float32 if real is float else np.float64
    t_arr = np.empty(n, dtype=dt)
    y_arr = np.empty(n, dtype=dt)
    cdef real[::1] t = t_arr
    cdef real[::1] y = y_arr
    cdef real xi
    for i in range(n):
        xi = x[i]
        t[i] = <real>(GELU_C * xi * (1.0 + GELU_A * xi * xi))
    np.tanh(t_arr, out=t_arr)
    for i in range(n):
        y[i] = <real>(0.5 * x[i] * (1.0 + t[i]))
    return y_arr, t_arr


def gelu_bwd(real[::1] g, real[::1] x, real[::1] t):
    cdef Py_ssize_t i, n = x.shape[0]
    dx_arr = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] dx = dx_arr
    cdef double xi, ti, dt
    for i in range(n):
        xi = x[i]
        ti = t[i]
        dt = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        dx[i] = <real>(g[i] * (0.5 * (1.0 + ti) + 0.5 * xi * (1.0 - ti * ti) * dt))
    return dx_arr


def layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    dt = np.float32 if real is float else np.float64
    y_arr = np.empty((rows, d), dtype=dt)
    xhat_arr = np.empty((rows, d), dtype=dt)
    inv_arr = np.empty(rows, dtype=dt)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] inv = inv_arr
    cdef double mu, var, c, s
    for r in range(rows):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[r, j] - mu
            var += c * c
        var /= d
        s = 1.0 / sqrt(var + eps)
        inv[r] = <real>s
        for j in range(d):
            c = (x[r, j] - mu) * s
            xhat[r, j] = <real>c
            y[r, j] = <real>(c * gain[j] + bias[j])
    return y_arr, xhat_arr, inv_arr


def layer_norm_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] inv, real[::1] gain):
    cdef Py_ssize_t r, j, rows = g.shape[0], d = g.shape[1]
    dt = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, d), dtype=dt)
    dgain_acc = np.zeros(d)
    dbias_acc = np.zeros(d)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_acc
    cdef double[::1] dbias = dbias_acc
    cdef double m1, m2, dh
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = g[r, j] * gain[j]
            m1 += dh
            m2 += dh * xhat[r, j]
            dgain[j] += g[r, j] * xhat[r, j]
            dbias[j] += g[r, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[r, j] = <real>(inv[r] * (g[r, j] * gain[j] - m1 - xhat[r, j] * m2))
    return dx_arr, dgain_acc.astype(dt, copy=False), dbias_acc.astype(dt, copy=False)


def softmax_rows(real[:, ::1] x, const unsigned char[:, ::1] keep, Py_ssize_t rows_per_group):
    """Row softmax; row ``r`` uses mask row ``r // rows_per_group``. Dropped entries give 0."""
    cdef Py_ssize_t r, j, rows = x.shape[0], n = x.shape[1], m
    y_arr = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = y_arr
    cdef double mx, s
    for r in range(rows):
        m = r // rows_per_group
        mx = -INFINITY
        for j in range(n):
            if keep[m, j] and x[r, j] > mx:
                mx = x[r, j]
        for j in range(n):
            y[r, j] = <real>(x[r, j] - mx) if keep[m, j] else <real>(-INFINITY)
    np.exp(y_arr, out=y_arr)
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += y[r, j]
        s = 1.0 / s
        for j in range(n):
            y[r, j] = <real>(y[r, j] * s)
    return y_arr


def softmax_rows_bwd(real[:, ::1] g, real[:, ::1] y):
    cdef Py_ssize_t r, j, rows = g.shape[0], n = g.shape[1]
    dx_arr = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * y[r, j]
        for j in range(n):
            dx[r, j] = <real>(y[r, j] * (g[r, j] - dot))
    return dx_arr


# --- t-SNE ----------------------------------------------------------------

def perplexity_search(double[:, ::1] d2, double target_entropy, double tol, int max_iter):
    """Per-row Gaussian bandwidth search. Entropy is in nats.

    Returns (conditional P, betas, achieved entropies).
    """
    cdef Py_ssize_t n = d2.shape[0], i, j
    cdef int it
    p_arr = np.zeros((n, n))
    beta_arr = np.empty(n)
    h_arr = np.empty(n)
    cdef double[:, ::1] P = p_arr
    cdef double[::1] betas = beta_arr
    cdef double[::1] hs = h_arr
    cdef double beta, lo, hi, dmin, mean_d, s, sd, h, e, dd
    for i in range(n):
        dmin = INFINITY
        mean_d = 0.0
        for j in range(n):
            if j != i:
                mean_d += d2[i, j]
                if d2[i, j] < dmin:
                    dmin = d2[i, j]
        mean_d = (mean_d / (n - 1)) - dmin
        beta = 1.0 / mean_d if mean_d > 0 else 1.0
        lo = 0.0
        hi = INFINITY
        for it in range(max_iter):
            s = 0.0
            sd = 0.0
            for j in range(n):
                if j != i:
                    dd = d2[i, j] - dmin
                    e = exp(-beta * dd)
                    P[i, j] = e
                    s += e
                    sd += dd * e
            h = log(s) + beta * sd / s
            if fabs(h - target_entropy) < tol:
                break
            if h > target_entropy:
                lo = beta
                beta = beta * 2.0 if hi == INFINITY else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        for j in range(n):
            if j != i:
                P[i, j] /= s
        P[i, i] = 0.0
        betas[i] = beta
        hs[i] = h
    return p_arr, beta_arr, h_arr


def tsne_gradient(double[:, ::1] P, double[:, ::1] Y, double exaggeration, bint compute_kl):
    """Gradient of KL(P||Q) for a 2-D Student-t embedding, plus KL under the true P.

    P must be symmetric with a zero diagonal. Each pair is visited once and
    contributes to both of its rows.
    """
    cdef Py_ssize_t n = Y.shape[0], i, j
    attr_arr = np.zeros((n, 2))
    rep_arr = np.zeros((n, 2))
    cdef double[:, ::1] attr = attr_arr
    cdef double[:, ::1] rep = rep_arr
    cdef double dx, dy, num, pn, nn, pij, yi0, yi1, ax, ay, rx, ry
    cdef double z = 0.0, kl = 0.0, psum = 0.0
    for i in range(n):
        yi0 = Y[i, 0]
        yi1 = Y[i, 1]
        ax = 0.0
        ay = 0.0
        rx = 0.0
        ry = 0.0
        for j in range(i + 1, n):
            dx = yi0 - Y[j, 0]
            dy = yi1 - Y[j, 1]
            num = 1.0 / (1.0 + dx * dx + dy * dy)
            pij = P[i, j]
            z += num
            pn = pij * num
            nn = num * num
            ax += pn * dx
            ay += pn * dy
            rx += nn * dx
            ry += nn * dy
            attr[j, 0] -= pn * dx
            attr[j, 1] -= pn * dy
            rep[j, 0] -= nn * dx
            rep[j, 1] -= nn * dy
            if compute_kl and pij > 0.0:
                kl += pij * log(pij / num)
                psum += pij
        attr[i, 0] += ax
        attr[i, 1] += ay
        rep[i, 0] += rx
        rep[i, 1] += ry
    z *= 2.0
    # KL = sum p log(p Z / num) over ordered pairs; each unordered pair was seen once
    if compute_kl:
        kl = 2.0 * kl + 2.0 * psum * log(z)
    return 4.0 * (exaggeration * attr_arr - rep_arr / z), kl


# --- logistic regression ----------------------------------------------------

cdef inline double softplus(double z) nogil:
    if z > 0:
        return z + log1p(exp(-z))
    return log1p(exp(z))


cdef inline double sigmoid(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef double _logistic_loss(double[:, ::1] X, double[::1] y, double w0, double w1, double b,
                           double pen0, double pen1) nogil:
    cdef Py_ssize_t i, n = X.shape[0]
    cdef double z, s = 0.0
    for i in range(n):
        z = w0 * X[i, 0] + w1 * X[i, 1] + b
        s += softplus(z) - y[i] * z
    return s / n + 0.5 * (pen0 * w0 * w0 + pen1 * w1 * w1)


def logistic_gd(double[:, ::1] X, double[::1] y, double pen0, double pen1,
                double step, double tol, int max_iter):
    """Full-batch gradient descent on mean logistic loss + 0.5*sum(pen_k * w_k^2).

    Starts at zero; halves the step whenever a step would raise the loss.
    Returns (w0, w1, b, iterations, loss trace).
    """
    cdef Py_ssize_t i, n = X.shape[0]
    cdef int it = 0
    cdef double w0 = 0.0, w1 = 0.0, b = 0.0
    cdef double g0, g1, gb, r, z, loss, new_loss, nw0, nw1, nb
    trace_arr = np.empty(max_iter + 1)
    cdef double[::1] trace = trace_arr
    loss = _logistic_loss(X, y, w0, w1, b, pen0, pen1)
    trace[0] = loss
    while it < max_iter:
        g0 = 0.0
        g1 = 0.0
        gb = 0.0
        for i in range(n):
            z = w0 * X[i, 0] + w1 * X[i, 1] + b
            r = sigmoid(z) - y[i]
            g0 += r * X[i, 0]
            g1 += r * X[i, 1]
            gb += r
        g0 = g0 / n + pen0 * w0
        g1 = g1 / n + pen1 * w1
        gb = gb / n
        while True:
            nw0 = w0 - step * g0
            nw1 = w1 - step * g1
            nb = b - step * gb
            new_loss = _logistic_loss(X, y, nw0, nw1, nb, pen0, pen1)
            if new_loss <= loss or step < 1e-300:
                break
            step *= 0.5
        w0 = nw0
        w1 = nw1
        b = nb
        it += 1
        trace[it] = new_loss
        if loss - new_loss < tol:
            loss = new_loss
            break
        loss = new_loss
    return w0, w1, b, it, trace_arr[: it + 1].copy()


# --- optimiser ----------------------------------------------------------------

def adam_update(double[::1] p, real[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double c1, double c2, double eps):
    """One bias-corrected Adam step. ``m`` and ``v`` update in place; returns new parameters."""
    cdef Py_ssize_t i, n = p.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double gi, mi, vi
    for i in range(n):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        out[i] = p[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps)
    return out_arr
