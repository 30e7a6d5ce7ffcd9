"""Direct 3x3 convolution loops for layers with few channels and large maps.

im2col + BLAS wastes most of its time copying when channel counts are in the
single digits; these loops touch each input once per tap instead.  Inputs are
already zero-padded by one pixel on each side.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def conv3x3_forward(xp, w, b, out):
    n, cin, hp, wp = xp.shape
    cout = w.shape[0]
    h, ww = hp - 2, wp - 2
    for i in range(n):
        for o in range(cout):
            acc = out[i, o]
            acc[:, :] = b[o]
            for c in range(cin):
                for ky in range(3):
                    for kx in range(3):
                        wt = w[o, c, ky, kx]
                        for y in range(h):
                            for x in range(ww):
                                acc[y, x] += wt * xp[i, c, y + ky, x + kx]


@nb.njit(cache=True)
def conv3x3_grad_kernel(xp, g, dw):
    n, cout, h, ww = g.shape
    cin = xp.shape[1]
    # per-column partial sums keep the inner loop vectorisable
    tmp = np.zeros((cout, cin, 3, 3, ww), dtype=dw.dtype)
    for i in range(n):
        for o in range(cout):
            for c in range(cin):
                for ky in range(3):
                    for kx in range(3):
                        t = tmp[o, c, ky, kx]
                        for y in range(h):
                            for x in range(ww):
                                t[x] += g[i, o, y, x] * xp[i, c, y + ky, x + kx]
    for o in range(cout):
        for c in range(cin):
            for ky in range(3):
                for kx in range(3):
                    dw[o, c, ky, kx] = tmp[o, c, ky, kx].sum()


@nb.njit(cache=True)
def conv3x3_grad_input(g, w, dxp):
    n, cout, h, ww = g.shape
    cin = w.shape[1]
    for i in range(n):
        for c in range(cin):
            acc = dxp[i, c]
            for o in range(cout):
                for ky in range(3):
                    for kx in range(3):
                        wt = w[o, c, ky, kx]
                        for y in range(h):
                            for x in range(ww):
                                acc[y + ky, x + kx] += wt * g[i, o, y, x]
