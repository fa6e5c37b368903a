"""Fused RK4 kernel for batches of hierarchy families (numba-compiled when available).

Implements exactly the right-hand side of ``engine._graph_rhs`` so that the
Monte Carlo sampler can run thousands of families without Python overhead.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


@njit(cache=True)
def _rhs(b, Y, Xf, H, A, shift, src1, ch1, src2, ch2, scale, xsrc, use_x, out, outX, g):
    N, d = Y.shape
    nch = A.shape[0]
    for v in range(N):
        s1 = src1[v]
        s2 = src2[v]
        sh = shift[b, v]
        for i in range(d):
            acc = 0j
            for j in range(d):
                acc += H[i, j] * Y[v, j]
            acc = -1j * (acc + sh * Y[v, i])
            if s1 >= 0:
                c = ch1[b, v]
                src = 0j
                for j in range(d):
                    src += A[c, i, j] * Y[s1, j]
                acc += scale * src
            if s2 >= 0:
                c = ch2[b, v]
                src = 0j
                for j in range(d):
                    src += A[c, i, j] * Y[s2, j]
                acc += scale * src
            out[v, i] = acc
    if use_x:
        for i in range(d):
            for j in range(d):
                acc = 0j
                for k in range(d):
                    acc += H[i, k] * Xf[k, j] - Xf[i, k] * np.conj(H[j, k])
                outX[i, j] = -1j * acc
        for c in range(nch):
            for i in range(d):
                acc = 0j
                for j in range(d):
                    acc += A[c, i, j] * Y[xsrc, j]
                g[i] = acc
            for i in range(d):
                for j in range(d):
                    outX[i, j] += g[i] * np.conj(g[j])


@njit(cache=True)
def advance(V, X, H, A, shift, src1, ch1, src2, ch2, scale, xsrc, use_x, dt, nsteps):
    """In-place RK4 advance of every family in ``V`` (B, N, d) and ``X`` (B, d, d).

    Returns -1 on success or the index of the first step producing a non-finite value.
    """
    B, N, d = V.shape
    k1 = np.empty((N, d), dtype=np.complex128)
    k2 = np.empty_like(k1)
    k3 = np.empty_like(k1)
    k4 = np.empty_like(k1)
    tmp = np.empty_like(k1)
    x1 = np.empty((d, d), dtype=np.complex128)
    x2 = np.empty_like(x1)
    x3 = np.empty_like(x1)
    x4 = np.empty_like(x1)
    xt = np.empty_like(x1)
    gbuf = np.empty(d, dtype=np.complex128)
    half = 0.5 * dt
    sixth = dt / 6.0
    bad = -1
    for b in range(B):
        Y = V[b]
        Xf = X[b]
        for n in range(nsteps):
            _rhs(b, Y, Xf, H, A, shift, src1, ch1, src2, ch2, scale, xsrc, use_x, k1, x1, gbuf)
            for v in range(N):
                for i in range(d):
                    tmp[v, i] = Y[v, i] + half * k1[v, i]
            if use_x:
                for i in range(d):
                    for j in range(d):
                        xt[i, j] = Xf[i, j] + half * x1[i, j]
            _rhs(b, tmp, xt, H, A, shift, src1, ch1, src2, ch2, scale, xsrc, use_x, k2, x2, gbuf)
            for v in range(N):
                for i in range(d):
                    tmp[v, i] = Y[v, i] + half * k2[v, i]
            if use_x:
                for i in range(d):
                    for j in range(d):
                        xt[i, j] = Xf[i, j] + half * x2[i, j]
            _rhs(b, tmp, xt, H, A, shift, src1, ch1, src2, ch2, scale, xsrc, use_x, k3, x3, gbuf)
            for v in range(N):
                for i in range(d):
                    tmp[v, i] = Y[v, i] + dt * k3[v, i]
            if use_x:
                for i in range(d):
                    for j in range(d):
                        xt[i, j] = Xf[i, j] + dt * x3[i, j]
            _rhs(b, tmp, xt, H, A, shift, src1, ch1, src2, ch2, scale, xsrc, use_x, k4, x4, gbuf)
            finite = True
            for v in range(N):
                for i in range(d):
                    y = Y[v, i] + sixth * (k1[v, i] + 2.0 * k2[v, i] + 2.0 * k3[v, i] + k4[v, i])
                    Y[v, i] = y
                    if not (np.isfinite(y.real) and np.isfinite(y.imag)):
                        finite = False
            if use_x:
                for i in range(d):
                    for j in range(d):
                        Xf[i, j] = Xf[i, j] + sixth * (
                            x1[i, j] + 2.0 * x2[i, j] + 2.0 * x3[i, j] + x4[i, j]
                        )
            if not finite:
                if bad < 0 or n < bad:
                    bad = n
                break
    return bad
