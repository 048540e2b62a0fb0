"""Frame-similarity kernels with a numba path and a pure-numpy fallback.

Set ``DMSKIT_DISABLE_NUMBA=1`` to force the numpy implementations. Both
variants are always importable (``*_numba`` / ``*_numpy``) so they can be
cross-checked and benchmarked against each other; the unsuffixed names are
the active backend.
"""

from __future__ import annotations

import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5

USE_NUMBA = numba is not None and os.environ.get("DMSKIT_DISABLE_NUMBA", "").lower() in ("", "0", "false")
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(func):
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


# --- numpy --------------------------------------------------------------------


def rmse_numpy(a: np.ndarray, b: np.ndarray) -> float:
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def _histogram(a: np.ndarray) -> np.ndarray:
    bins = np.clip(np.floor(a.astype(np.float64)), 0, 255).astype(np.int64).ravel()
    return np.bincount(bins, minlength=256)


def hist_intersection_numpy(a: np.ndarray, b: np.ndarray) -> float:
    # integer counts keep the result exactly inside [0, 1]
    return float(np.minimum(_histogram(a), _histogram(b)).sum() / a.size)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_numpy(a: np.ndarray, b: np.ndarray) -> float:
    g = gaussian_window()
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# --- numba --------------------------------------------------------------------


def _rmse_loop(a, b):
    acc = 0.0
    h, w = a.shape
    for i in range(h):
        for j in range(w):
            d = float(a[i, j]) - float(b[i, j])
            acc += d * d
    return math.sqrt(acc / (h * w))


def _hist_loop(a, b):
    ha = np.zeros(256, dtype=np.int64)
    hb = np.zeros(256, dtype=np.int64)
    h, w = a.shape
    for i in range(h):
        for j in range(w):
            ka = int(math.floor(float(a[i, j])))
            kb = int(math.floor(float(b[i, j])))
            ha[min(max(ka, 0), 255)] += 1
            hb[min(max(kb, 0), 255)] += 1
    acc = 0
    for k in range(256):
        acc += min(ha[k], hb[k])
    return acc / (h * w)


def _ssim_loop(a, b, g, c1, c2):
    k = g.size
    h, w = a.shape
    oh, ow = h - k + 1, w - k + 1
    # vertical pass: five moment images filtered along rows
    vx = np.zeros((oh, w))
    vy = np.zeros((oh, w))
    vxx = np.zeros((oh, w))
    vyy = np.zeros((oh, w))
    vxy = np.zeros((oh, w))
    for i in range(oh):
        for t in range(k):
            gt = g[t]
            for j in range(w):
                x = float(a[i + t, j])
                y = float(b[i + t, j])
                vx[i, j] += gt * x
                vy[i, j] += gt * y
                vxx[i, j] += gt * x * x
                vyy[i, j] += gt * y * y
                vxy[i, j] += gt * x * y
    total = 0.0
    for i in range(oh):
        for j in range(ow):
            mx = my = exx = eyy = exy = 0.0
            for t in range(k):
                gt = g[t]
                mx += gt * vx[i, j + t]
                my += gt * vy[i, j + t]
                exx += gt * vxx[i, j + t]
                eyy += gt * vyy[i, j + t]
                exy += gt * vxy[i, j + t]
            sxx = exx - mx * mx
            syy = eyy - my * my
            sxy = exy - mx * my
            num = (2 * mx * my + c1) * (2 * sxy + c2)
            den = (mx * mx + my * my + c1) * (sxx + syy + c2)
            total += num / den
    return total / (oh * ow)


_rmse_jit = njit(_rmse_loop)
_hist_jit = njit(_hist_loop)
_ssim_jit = njit(_ssim_loop)


def rmse_numba(a: np.ndarray, b: np.ndarray) -> float:
    return float(_rmse_jit(np.ascontiguousarray(a), np.ascontiguousarray(b)))


def hist_intersection_numba(a: np.ndarray, b: np.ndarray) -> float:
    return float(_hist_jit(np.ascontiguousarray(a), np.ascontiguousarray(b)))


def ssim_numba(a: np.ndarray, b: np.ndarray) -> float:
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    return float(_ssim_jit(np.ascontiguousarray(a), np.ascontiguousarray(b), gaussian_window(), c1, c2))


if USE_NUMBA:
    rmse, hist_intersection, ssim = rmse_numba, hist_intersection_numba, ssim_numba
else:
    rmse, hist_intersection, ssim = rmse_numpy, hist_intersection_numpy, ssim_numpy
