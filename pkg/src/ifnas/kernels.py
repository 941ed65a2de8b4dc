"""Hot numeric kernels: 3x3 depthwise convolution and its two gradients.

Every kernel exists twice, a numba ``@njit`` loop version and a vectorised
numpy version. The active implementation is picked once at import time from
the ``IFNAS_NUMBA`` environment variable (``0``/``off``/``false`` forces the
numpy path). Both versions are always importable so they can be benchmarked
and cross-checked against each other.

All kernels use "same" padding (one pixel of zeros) and cross-correlation
orientation, i.e. ``y[b, c, i, j] = sum_{u,v} w[c, u, v] * x[b, c, i+u-1, j+v-1]``.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "off", "false", "no")


USE_NUMBA = HAVE_NUMBA and _flag_enabled(os.environ.get("IFNAS_NUMBA", "1"))


# numpy reference path

def depthwise3x3_numpy(x, w):
    b, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros_like(x)
    for u in range(3):
        for v in range(3):
            y += w[None, :, u, v, None, None] * xp[:, :, u:u + h, v:v + wd]
    return y


def depthwise3x3_grad_input_numpy(gy, w):
    b, c, h, wd = gy.shape
    gxp = np.zeros((b, c, h + 2, wd + 2), dtype=gy.dtype)
    for u in range(3):
        for v in range(3):
            gxp[:, :, u:u + h, v:v + wd] += w[None, :, u, v, None, None] * gy
    return gxp[:, :, 1:h + 1, 1:wd + 1].copy()


def depthwise3x3_grad_weight_numpy(x, gy):
    b, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gw = np.empty((c, 3, 3), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            gw[:, u, v] = np.einsum("bchw,bchw->c", xp[:, :, u:u + h, v:v + wd], gy)
    return gw


# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def depthwise3x3_numba(x, w):
        nb, nc, h, wd = x.shape
        y = np.zeros_like(x)
        for b in range(nb):
            for c in range(nc):
                for i in range(h):
                    for j in range(wd):
                        acc = 0.0
                        for u in range(3):
                            ii = i + u - 1
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(3):
                                jj = j + v - 1
                                if jj < 0 or jj >= wd:
                                    continue
                                acc += w[c, u, v] * x[b, c, ii, jj]
                        y[b, c, i, j] = acc
        return y

    @njit(cache=True)
    def depthwise3x3_grad_input_numba(gy, w):
        nb, nc, h, wd = gy.shape
        gx = np.zeros_like(gy)
        for b in range(nb):
            for c in range(nc):
                for i in range(h):
                    for j in range(wd):
                        g = gy[b, c, i, j]
                        for u in range(3):
                            ii = i + u - 1
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(3):
                                jj = j + v - 1
                                if jj < 0 or jj >= wd:
                                    continue
                                gx[b, c, ii, jj] += w[c, u, v] * g
        return gx

    @njit(cache=True)
    def depthwise3x3_grad_weight_numba(x, gy):
        nb, nc, h, wd = x.shape
        gw = np.zeros((nc, 3, 3), dtype=x.dtype)
        for c in range(nc):
            for u in range(3):
                for v in range(3):
                    acc = 0.0
                    for b in range(nb):
                        for i in range(h):
                            ii = i + u - 1
                            if ii < 0 or ii >= h:
                                continue
                            for j in range(wd):
                                jj = j + v - 1
                                if jj < 0 or jj >= wd:
                                    continue
                                acc += x[b, c, ii, jj] * gy[b, c, i, j]
                    gw[c, u, v] = acc
        return gw

else:  # pragma: no cover
    depthwise3x3_numba = depthwise3x3_numpy
    depthwise3x3_grad_input_numba = depthwise3x3_grad_input_numpy
    depthwise3x3_grad_weight_numba = depthwise3x3_grad_weight_numpy


if USE_NUMBA:
    depthwise3x3 = depthwise3x3_numba
    depthwise3x3_grad_input = depthwise3x3_grad_input_numba
    depthwise3x3_grad_weight = depthwise3x3_grad_weight_numba
else:
    depthwise3x3 = depthwise3x3_numpy
    depthwise3x3_grad_input = depthwise3x3_grad_input_numpy
    depthwise3x3_grad_weight = depthwise3x3_grad_weight_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
