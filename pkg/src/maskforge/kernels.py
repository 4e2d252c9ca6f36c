"""Hot inner-loop kernels: numba-compiled with a pure-numpy fallback.

The depthwise 1-d convolution is the one loop nest in the model that
numpy has no single primitive for. Both paths accumulate taps in the
same order (bias first, then ascending tap index) so they agree
bit-for-bit on identical inputs.

``MASKFORGE_NUMBA=0`` forces the numpy path; by default numba is used
when importable. Large matrix products stay on BLAS either way - numba
cannot beat a tuned GEMM.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("MASKFORGE_NUMBA", "1") != "0"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is declared but optional at runtime
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = _WANT_NUMBA and HAVE_NUMBA


@njit(cache=True)
def _dwconv_forward_nb(x, w, b, out):
    # x (B,T,C), w (C,k), b (C,); same padding with zeros, k odd
    B, T, C = x.shape
    k = w.shape[1]
    pad = k // 2
    for bi in range(B):
        for t in range(T):
            for c in range(C):
                out[bi, t, c] = b[c]
        for tau in range(k):
            lo = max(0, pad - tau)
            hi = min(T, T + pad - tau)
            for t in range(lo, hi):
                s = t + tau - pad
                for c in range(C):
                    out[bi, t, c] += x[bi, s, c] * w[c, tau]
    return out


@njit(cache=True)
def _dwconv_backward_x_nb(gy, w, gx):
    B, T, C = gy.shape
    k = w.shape[1]
    pad = k // 2
    for bi in range(B):
        for t in range(T):
            for c in range(C):
                gx[bi, t, c] = 0.0
        for tau in range(k):
            lo = max(0, pad - tau)
            hi = min(T, T + pad - tau)
            for t in range(lo, hi):
                s = t + tau - pad
                for c in range(C):
                    gx[bi, s, c] += gy[bi, t, c] * w[c, tau]
    return gx


@njit(cache=True)
def _dwconv_backward_w_nb(gy, x, gw):
    B, T, C = gy.shape
    k = gw.shape[1]
    pad = k // 2
    for c in range(C):
        for tau in range(k):
            gw[c, tau] = 0.0
    for bi in range(B):
        for tau in range(k):
            lo = max(0, pad - tau)
            hi = min(T, T + pad - tau)
            for t in range(lo, hi):
                s = t + tau - pad
                for c in range(C):
                    gw[c, tau] += gy[bi, t, c] * x[bi, s, c]
    return gw


def _dwconv_forward_np(x, w, b, out):
    B, T, C = x.shape
    k = w.shape[1]
    pad = k // 2
    out[:] = b
    for tau in range(k):
        lo = max(0, pad - tau)
        hi = min(T, T + pad - tau)
        if lo >= hi:
            continue
        out[:, lo:hi, :] += x[:, lo + tau - pad : hi + tau - pad, :] * w[:, tau]
    return out


def _dwconv_backward_x_np(gy, w, gx):
    B, T, C = gy.shape
    k = w.shape[1]
    pad = k // 2
    gx[:] = 0.0
    for tau in range(k):
        lo = max(0, pad - tau)
        hi = min(T, T + pad - tau)
        if lo >= hi:
            continue
        gx[:, lo + tau - pad : hi + tau - pad, :] += gy[:, lo:hi, :] * w[:, tau]
    return gx


def _dwconv_backward_w_np(gy, x, gw):
    B, T, C = gy.shape
    k = gw.shape[1]
    pad = k // 2
    for tau in range(k):
        lo = max(0, pad - tau)
        hi = min(T, T + pad - tau)
        if lo >= hi:
            gw[:, tau] = 0.0
            continue
        gw[:, tau] = np.einsum(
            "btc,btc->c",
            gy[:, lo:hi, :],
            x[:, lo + tau - pad : hi + tau - pad, :],
        )
    return gw


def depthwise_conv1d_forward(x, w, b, use_numba=None):
    """Same-padded depthwise conv over the time axis of ``x`` (B,T,C)."""
    out = np.empty_like(x)
    if (USE_NUMBA if use_numba is None else use_numba):
        return _dwconv_forward_nb(x, w, b, out)
    return _dwconv_forward_np(x, w, b, out)


def depthwise_conv1d_backward(gy, x, w, use_numba=None):
    """Gradients (dx, dw, db) of the depthwise conv."""
    gx = np.empty_like(x)
    gw = np.empty_like(w)
    if (USE_NUMBA if use_numba is None else use_numba):
        _dwconv_backward_x_nb(gy, w, gx)
        _dwconv_backward_w_nb(gy, x, gw)
    else:
        _dwconv_backward_x_np(gy, w, gx)
        _dwconv_backward_w_np(gy, x, gw)
    gb = gy.sum(axis=(0, 1), dtype=np.float64).astype(gy.dtype)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Fused AdamW update (decoupled decay applied after the moment step)


@njit(cache=True)
def _adamw_nb(p, g, m, v, lr, b1, b2, eps, c1, c2, wd, sign):
    n = p.size
    ok = True
    for i in range(n):
        gi = np.float64(g[i]) * sign
        if not np.isfinite(gi):
            ok = False
            break
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        pi = p[i] - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        if wd != 0.0:
            pi -= lr * wd * pi
        p[i] = pi
    return ok


def adamw_update(p, g, m, v, lr, b1, b2, eps, c1, c2, wd, maximize, use_numba=None):
    """In-place AdamW step on flat views; returns False on non-finite grads."""
    if (USE_NUMBA if use_numba is None else use_numba):
        return bool(_adamw_nb(p, g, m, v, float(lr), float(b1), float(b2), float(eps),
                              float(c1), float(c2), float(wd), -1.0 if maximize else 1.0))
    if not np.all(np.isfinite(g)):
        return False
    g = -g if maximize else g
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    denom = np.sqrt(v / c2)
    denom += eps
    update = m / c1 / denom
    update *= lr
    p -= update.astype(p.dtype)
    if wd:
        p -= (lr * wd) * p
    return True


# ---------------------------------------------------------------------------
# Layer norm over the last axis, float64 statistics, virtual divisor


@njit(cache=True)
def _ln_forward_nb(x, gamma, beta, v, eps, out, xhat, inv):
    n, d = x.shape
    mu_iv = np.empty(2, dtype=x.dtype)  # round stats to storage dtype first
    for r in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            val = np.float64(x[r, j])
            s1 += val
            s2 += val * val
        mu64 = s1 / v
        var = s2 / v - mu64 * mu64
        if var < 0.0:
            var = 0.0
        mu_iv[0] = mu64
        mu_iv[1] = 1.0 / np.sqrt(var + eps)
        mu = mu_iv[0]
        iv = mu_iv[1]
        inv[r] = iv
        for j in range(d):
            xh = (x[r, j] - mu) * iv
            xhat[r, j] = xh
            out[r, j] = xh * gamma[j] + beta[j]


@njit(cache=True)
def _ln_backward_nb(g, xhat, inv, gamma, v, gx, gg, gb):
    n, d = g.shape
    c12 = np.empty(2, dtype=g.dtype)
    for j in range(d):
        gg[j] = 0.0
        gb[j] = 0.0
    for r in range(n):
        t1 = 0.0
        t2 = 0.0
        for j in range(d):
            gxh = np.float64(g[r, j]) * np.float64(gamma[j])
            t1 += gxh
            t2 += gxh * np.float64(xhat[r, j])
            gg[j] += np.float64(g[r, j]) * np.float64(xhat[r, j])
            gb[j] += np.float64(g[r, j])
        c12[0] = t1 / v
        c12[1] = t2 / v
        c1 = c12[0]
        c2 = c12[1]
        iv = inv[r]
        for j in range(d):
            gx[r, j] = (g[r, j] * gamma[j] - c1 - xhat[r, j] * c2) * iv


def layer_norm_forward(x2, gamma, beta, v, eps, use_numba=None):
    """Row-wise layer norm of (N, d) with divisor ``v``; returns (out, xhat, inv)."""
    out = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv = np.empty(x2.shape[0], dtype=x2.dtype)
    if (USE_NUMBA if use_numba is None else use_numba):
        _ln_forward_nb(x2, gamma, beta, float(v), float(eps), out, xhat, inv)
        return out, xhat, inv
    mu = np.sum(x2, axis=-1, keepdims=True, dtype=np.float64) / v
    ex2 = (np.einsum("nd,nd->n", x2, x2, dtype=np.float64) / v)[:, None]
    var = np.maximum(ex2 - mu * mu, 0.0)
    inv[:] = (1.0 / np.sqrt(var + eps)).astype(x2.dtype)[:, 0]
    np.subtract(x2, mu.astype(x2.dtype), out=xhat)
    xhat *= inv[:, None]
    np.multiply(xhat, gamma, out=out)
    out += beta
    return out, xhat, inv


def layer_norm_backward(g2, xhat, inv, gamma, v, use_numba=None):
    """Gradients (gx, ggamma, gbeta) for the row-wise layer norm."""
    if (USE_NUMBA if use_numba is None else use_numba):
        gx = np.empty_like(g2)
        gg = np.empty(g2.shape[1], dtype=np.float64)
        gb = np.empty(g2.shape[1], dtype=np.float64)
        _ln_backward_nb(g2, xhat, inv, gamma, float(v), gx, gg, gb)
        return gx, gg.astype(g2.dtype), gb.astype(g2.dtype)
    gg = np.einsum("nd,nd->d", g2, xhat, dtype=np.float64).astype(g2.dtype)
    gb = np.sum(g2, axis=0, dtype=np.float64).astype(g2.dtype)
    gxh = g2 * gamma
    t1 = (np.sum(gxh, axis=-1, keepdims=True, dtype=np.float64) / v).astype(g2.dtype)
    t2 = (np.einsum("nd,nd->n", gxh, xhat, dtype=np.float64)[:, None] / v).astype(g2.dtype)
    gx = gxh
    gx -= t1
    gx -= xhat * t2
    gx *= inv[:, None]
    return gx, gg, gb
