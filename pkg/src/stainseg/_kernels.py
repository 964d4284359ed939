"""Numba-jitted inner loops for the convolution layers.

The array layout is chosen for single-core cache behaviour: columns are
built channel-major, one sample at a time, so both the gather here and the
GEMM in the caller touch contiguous memory.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def im2col(xp, kh, kw, cols):
    """Gather kh*kw patches of one padded sample xp[C,Hp,Wp] into cols[C*kh*kw, Ho*Wo]."""
    C, Hp, Wp = xp.shape
    Ho = Hp - kh + 1
    Wo = Wp - kw + 1
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                k = (c * kh + i) * kw + j
                for y in range(Ho):
                    row = y * Wo
                    for x in range(Wo):
                        cols[k, row + x] = xp[c, y + i, x + j]


@numba.njit(cache=True)
def col2im(dcols, kh, kw, dxp):
    """Scatter-add column gradients dcols[C*kh*kw, Ho*Wo] back into dxp[C,Hp,Wp]."""
    C, Hp, Wp = dxp.shape
    Ho = Hp - kh + 1
    Wo = Wp - kw + 1
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                k = (c * kh + i) * kw + j
                for y in range(Ho):
                    row = y * Wo
                    for x in range(Wo):
                        dxp[c, y + i, x + j] += dcols[k, row + x]


@numba.njit(cache=True)
def maxpool2_forward(x, out, idx):
    """2x2 max pooling of x[N,C,H,W]; idx records the in-block argmax (row-major, first wins)."""
    N, C, H, W = x.shape
    Ho = H // 2
    Wo = W // 2
    for n in range(N):
        for c in range(C):
            for y in range(Ho):
                for xw in range(Wo):
                    best = x[n, c, 2 * y, 2 * xw]
                    arg = 0
                    v = x[n, c, 2 * y, 2 * xw + 1]
                    if v > best:
                        best = v
                        arg = 1
                    v = x[n, c, 2 * y + 1, 2 * xw]
                    if v > best:
                        best = v
                        arg = 2
                    v = x[n, c, 2 * y + 1, 2 * xw + 1]
                    if v > best:
                        best = v
                        arg = 3
                    out[n, c, y, xw] = best
                    idx[n, c, y, xw] = arg


@numba.njit(cache=True)
def maxpool2_backward(go, idx, dx):
    """Route go[N,C,Ho,Wo] to the recorded argmax positions of dx[N,C,H,W]."""
    N, C, Ho, Wo = go.shape
    for n in range(N):
        for c in range(C):
            for y in range(Ho):
                for xw in range(Wo):
                    a = idx[n, c, y, xw]
                    dx[n, c, 2 * y + a // 2, 2 * xw + a % 2] += go[n, c, y, xw]
