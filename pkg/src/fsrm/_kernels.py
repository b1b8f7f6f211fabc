"""Optional numba-fused kernels for the bandwidth-bound ops.

Pure-numpy reference implementations live in :mod:`fsrm.tensor`; these
kernels compute the same quantities with fewer memory passes. Every kernel
parallelizes over independent output rows only, so results are bit-stable
for a fixed dtype regardless of thread count. Set ``FSRM_NO_JIT=1`` to
disable and fall back to numpy everywhere.
"""

from __future__ import annotations

import os

import numpy as np

ENABLED = False

if not os.environ.get("FSRM_NO_JIT"):
    try:
        import numba as nb

        ENABLED = True
    except ImportError:  # pragma: no cover - exercised via FSRM_NO_JIT in CI
        ENABLED = False

if ENABLED:
    _jit = nb.njit(parallel=True, fastmath=True, cache=True)

    @_jit
    def softmax_fwd(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in nb.prange(rows):
            m = x[i, 0]
            for j in range(1, n):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                v = np.exp(x[i, j] - m)
                out[i, j] = v
                s += v
            inv = 1.0 / s
            for j in range(n):
                out[i, j] *= inv
        return out

    @_jit
    def softmax_bwd(y, g):
        rows, n = y.shape
        dx = np.empty_like(y)
        for i in nb.prange(rows):
            dot = 0.0
            for j in range(n):
                dot += y[i, j] * g[i, j]
            for j in range(n):
                dx[i, j] = y[i, j] * (g[i, j] - dot)
        return dx

    @_jit
    def norm_fwd(x):
        rows, n = x.shape
        y = np.empty_like(x)
        r = np.empty(rows, dtype=x.dtype)
        for i in nb.prange(rows):
            s = 0.0
            for j in range(n):
                s += x[i, j] * x[i, j]
            ri = np.sqrt(s)
            r[i] = ri
            inv = 1.0 / ri
            for j in range(n):
                y[i, j] = x[i, j] * inv
        return y, r

    @_jit
    def norm_bwd(y, r, g):
        rows, n = y.shape
        dx = np.empty_like(y)
        for i in nb.prange(rows):
            dot = 0.0
            for j in range(n):
                dot += g[i, j] * y[i, j]
            inv = 1.0 / r[i]
            for j in range(n):
                dx[i, j] = (g[i, j] - dot * y[i, j]) * inv
        return dx

    @_jit
    def rotary_fwd(x, cs, sn, scale):
        """(B, N, h, hd) strided view -> contiguous (B, h, N, hd), rotated.

        Pairs are (j, j + p); the angle tables cs/sn have shape (h, N, p).
        ``scale`` multiplies the output (attention score scaling).
        """
        B, N, h, hd = x.shape
        p = hd // 2
        out = np.empty((B, h, N, hd), dtype=x.dtype)
        for bh in nb.prange(B * h):
            b = bh // h
            hh = bh % h
            for t in range(N):
                for j in range(p):
                    c = cs[hh, t, j]
                    s = sn[hh, t, j]
                    x1 = x[b, t, hh, j]
                    x2 = x[b, t, hh, j + p]
                    out[b, hh, t, j] = (x1 * c - x2 * s) * scale
                    out[b, hh, t, j + p] = (x1 * s + x2 * c) * scale
        return out

    @_jit
    def rotary_bwd_x(g, cs, sn, scale):
        """Gradient back to the (B, N, h, hd) pre-rotation layout."""
        B, h, N, hd = g.shape
        p = hd // 2
        dx = np.empty((B, N, h, hd), dtype=g.dtype)
        for bh in nb.prange(B * h):
            b = bh // h
            hh = bh % h
            for t in range(N):
                for j in range(p):
                    c = cs[hh, t, j]
                    s = sn[hh, t, j]
                    g1 = g[b, hh, t, j] * scale
                    g2 = g[b, hh, t, j + p] * scale
                    dx[b, t, hh, j] = g1 * c + g2 * s
                    dx[b, t, hh, j + p] = -g1 * s + g2 * c
        return dx

    @_jit
    def rotary_bwd_theta(g, out):
        """d(loss)/d(theta) summed over batch: (h, N, p)."""
        B, h, N, hd = g.shape
        p = hd // 2
        dth = np.zeros((h, N, p), dtype=g.dtype)
        for hh in nb.prange(h):
            for b in range(B):
                for t in range(N):
                    for j in range(p):
                        dth[hh, t, j] += (
                            g[b, hh, t, j + p] * out[b, hh, t, j]
                            - g[b, hh, t, j] * out[b, hh, t, j + p]
                        )
        return dth

    @_jit
    def heads_to_batch(x):
        """(B, N, h, hd) view -> contiguous (B, h, N, hd)."""
        B, N, h, hd = x.shape
        out = np.empty((B, h, N, hd), dtype=x.dtype)
        for bh in nb.prange(B * h):
            b = bh // h
            hh = bh % h
            for t in range(N):
                for j in range(hd):
                    out[b, hh, t, j] = x[b, t, hh, j]
        return out

    @_jit
    def batch_to_heads(x):
        """(B, h, N, hd) -> contiguous (B, N, h, hd) (inverse of above)."""
        B, h, N, hd = x.shape
        out = np.empty((B, N, h, hd), dtype=x.dtype)
        for bh in nb.prange(B * h):
            b = bh // h
            hh = bh % h
            for t in range(N):
                for j in range(hd):
                    out[b, t, hh, j] = x[b, hh, t, j]
        return out

    @_jit
    def bias_relu_fwd(x, b):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in nb.prange(rows):
            for j in range(n):
                v = x[i, j] + b[j]
                out[i, j] = v if v > 0 else 0.0
        return out

    @_jit
    def bias_relu_bwd(g, y):
        rows, n = y.shape
        dx = np.empty_like(y)
        for i in nb.prange(rows):
            for j in range(n):
                dx[i, j] = g[i, j] if y[i, j] > 0 else 0.0
        return dx

    @_jit
    def sphere_update_fwd(x, raw, bias, om, gamma):
        """Fused fast-step tail: y = Pi(x + gamma * (Proj_x(raw + bias) + Om x)).

        ``x``/``raw``: (M, nb, n); ``bias``: (nb, n) slice layout of the MLP
        output bias; ``om``: (nb, n, n) anti-symmetric.
        """
        M, nbk, n = x.shape
        y = np.empty_like(x)
        for i in nb.prange(M):
            for b in range(nbk):
                dot = 0.0
                for j in range(n):
                    dot += (raw[i, b, j] + bias[b, j]) * x[i, b, j]
                s = 0.0
                for j in range(n):
                    rot = 0.0
                    for l in range(n):
                        rot += om[b, j, l] * x[i, b, l]
                    f = (raw[i, b, j] + bias[b, j]) - dot * x[i, b, j] + rot
                    u = x[i, b, j] + gamma * f
                    y[i, b, j] = u
                    s += u * u
                inv = 1.0 / np.sqrt(s)
                for j in range(n):
                    y[i, b, j] *= inv
        return y

    @_jit
    def sphere_update_bwd(x, raw, bias, om, gamma, g):
        """Backward of sphere_update_fwd.

        Returns (dx, draw, dbias, dom, dgamma). The forward intermediates are
        recomputed per block; raw/bias enter only through v = raw + bias, so
        dbias is the row-sum of draw.
        """
        M, nbk, n = x.shape
        dx = np.empty_like(x)
        draw = np.empty_like(x)
        n_threads = nb.get_num_threads()
        dom_part = np.zeros((n_threads, nbk, n, n), dtype=x.dtype)
        dgam_part = np.zeros(n_threads, dtype=x.dtype)
        for i in nb.prange(M):
            tid = nb.get_thread_id()
            for b in range(nbk):
                # recompute forward pieces
                dot = 0.0
                for j in range(n):
                    dot += (raw[i, b, j] + bias[b, j]) * x[i, b, j]
                s = 0.0
                u = np.empty(n, dtype=x.dtype)
                f = np.empty(n, dtype=x.dtype)
                for j in range(n):
                    rot = 0.0
                    for l in range(n):
                        rot += om[b, j, l] * x[i, b, l]
                    fj = (raw[i, b, j] + bias[b, j]) - dot * x[i, b, j] + rot
                    f[j] = fj
                    uj = x[i, b, j] + gamma * fj
                    u[j] = uj
                    s += uj * uj
                r = np.sqrt(s)
                inv = 1.0 / r
                # normalize backward: du = (g - (g.y) y) / r with y = u/r
                gy = 0.0
                for j in range(n):
                    gy += g[i, b, j] * u[j] * inv
                du = np.empty(n, dtype=x.dtype)
                for j in range(n):
                    du[j] = (g[i, b, j] - gy * u[j] * inv) * inv
                # u = x + gamma f: df = gamma du; dgamma += f . du
                acc_g = 0.0
                for j in range(n):
                    acc_g += f[j] * du[j]
                dgam_part[tid] += acc_g
                # f = v - (v.x) x + om x, v = raw + bias
                # dv = df - (df.x) x ; ddot-term: dx += -(df.x) v - dot*df
                dfx = 0.0
                for j in range(n):
                    dfx += gamma * du[j] * x[i, b, j]
                for j in range(n):
                    dfj = gamma * du[j]
                    draw[i, b, j] = dfj - dfx * x[i, b, j]
                    # dx from projection term and direct identity path
                    dxj = du[j] - dfx * (raw[i, b, j] + bias[b, j]) - dot * dfj
                    # dx from rotation: om^T . df
                    rot_t = 0.0
                    for l in range(n):
                        rot_t += om[b, l, j] * gamma * du[l]
                    dx[i, b, j] = dxj + rot_t
                # dom[b] += (gamma du) outer x
                for j in range(n):
                    for l in range(n):
                        dom_part[tid, b, j, l] += gamma * du[j] * x[i, b, l]
        dom = dom_part.sum(axis=0)
        dgamma = dgam_part.sum()
        return dx, draw, dom, dgamma
