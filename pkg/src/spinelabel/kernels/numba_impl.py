"""Numba-jitted versions of the hot array kernels.

Each public function matches the numpy_impl signature; thin wrappers coerce
inputs to contiguous float64 where the jitted loops need it.
"""

from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _resample_trilinear(data, scale, out_shape, offset, out):
    h, w, d = data.shape
    for i in range(out_shape[0]):
        qi = min(max(offset[0] + i * scale[0], 0.0), h - 1.0)
        i0 = int(np.floor(qi))
        i1 = min(i0 + 1, h - 1)
        ti = qi - i0
        for j in range(out_shape[1]):
            qj = min(max(offset[1] + j * scale[1], 0.0), w - 1.0)
            j0 = int(np.floor(qj))
            j1 = min(j0 + 1, w - 1)
            tj = qj - j0
            for k in range(out_shape[2]):
                qk = min(max(offset[2] + k * scale[2], 0.0), d - 1.0)
                k0 = int(np.floor(qk))
                k1 = min(k0 + 1, d - 1)
                tk = qk - k0
                c00 = data[i0, j0, k0] * (1.0 - tk) + data[i0, j0, k1] * tk
                c01 = data[i0, j1, k0] * (1.0 - tk) + data[i0, j1, k1] * tk
                c10 = data[i1, j0, k0] * (1.0 - tk) + data[i1, j0, k1] * tk
                c11 = data[i1, j1, k0] * (1.0 - tk) + data[i1, j1, k1] * tk
                c0 = c00 * (1.0 - tj) + c01 * tj
                c1 = c10 * (1.0 - tj) + c11 * tj
                out[i, j, k] = c0 * (1.0 - ti) + c1 * ti


def resample_trilinear(data: np.ndarray, scale, out_shape, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    out = np.empty(tuple(out_shape), dtype=np.float64)
    _resample_trilinear(
        np.ascontiguousarray(data, dtype=np.float64),
        np.asarray(scale, dtype=np.float64),
        np.asarray(out_shape, dtype=np.int64),
        np.asarray(offset, dtype=np.float64),
        out,
    )
    return out.astype(data.dtype)


@nb.njit(cache=True)
def _axis_gaussian(n, step, center, inv2s2):
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        diff = i * step - center
        out[i] = np.exp(-(diff * diff) * inv2s2)
    return out


@nb.njit(cache=True)
def _heatmap_stack_3d(shape, spacing, centers, channels, sigma, out):
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    h, w, d = shape[0], shape[1], shape[2]
    for n in range(centers.shape[0]):
        ex = _axis_gaussian(h, spacing[0], centers[n, 0], inv2s2)
        ey = _axis_gaussian(w, spacing[1], centers[n, 1], inv2s2)
        ez = _axis_gaussian(d, spacing[2], centers[n, 2], inv2s2)
        c = channels[n]
        for i in range(h):
            for j in range(w):
                exy = ex[i] * ey[j]
                for k in range(d):
                    out[i, j, k, c] = exy * ez[k]
    nch = out.shape[3]
    for i in range(h):
        for j in range(w):
            for k in range(d):
                m = 0.0
                for c in range(1, nch):
                    if out[i, j, k, c] > m:
                        m = out[i, j, k, c]
                out[i, j, k, 0] = 1.0 - m


def heatmap_stack_3d(shape, spacing, centers_mm: np.ndarray, channels: np.ndarray,
                     sigma_mm: float, n_channels: int) -> np.ndarray:
    out = np.zeros(tuple(shape) + (n_channels,), dtype=np.float64)
    _heatmap_stack_3d(
        np.asarray(shape, dtype=np.int64),
        np.asarray(spacing, dtype=np.float64),
        np.ascontiguousarray(centers_mm, dtype=np.float64).reshape(-1, 3),
        np.asarray(channels, dtype=np.int64),
        float(sigma_mm),
        out,
    )
    return out


@nb.njit(cache=True)
def _max_gaussian_3d(shape, spacing, centers, sigma, out):
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    h, w, d = shape[0], shape[1], shape[2]
    for n in range(centers.shape[0]):
        ex = _axis_gaussian(h, spacing[0], centers[n, 0], inv2s2)
        ey = _axis_gaussian(w, spacing[1], centers[n, 1], inv2s2)
        ez = _axis_gaussian(d, spacing[2], centers[n, 2], inv2s2)
        for i in range(h):
            for j in range(w):
                exy = ex[i] * ey[j]
                for k in range(d):
                    v = exy * ez[k]
                    if v > out[i, j, k]:
                        out[i, j, k] = v


def max_gaussian_3d(shape, spacing, centers_mm: np.ndarray, sigma_mm: float) -> np.ndarray:
    out = np.zeros(tuple(shape), dtype=np.float64)
    _max_gaussian_3d(
        np.asarray(shape, dtype=np.int64),
        np.asarray(spacing, dtype=np.float64),
        np.ascontiguousarray(centers_mm, dtype=np.float64).reshape(-1, 3),
        float(sigma_mm),
        out,
    )
    return out


@nb.njit(cache=True)
def _fuse_outer(sag, cor, out):
    h, w, c = sag.shape
    d = cor.shape[1]
    for i in range(h):
        for j in range(w):
            for k in range(d):
                for ch in range(c):
                    out[i, j, k, ch] = sag[i, j, ch] * cor[i, k, ch]


def fuse_outer(sag: np.ndarray, cor: np.ndarray) -> np.ndarray:
    out = np.empty((sag.shape[0], sag.shape[1], cor.shape[1], sag.shape[2]), dtype=np.float64)
    _fuse_outer(
        np.ascontiguousarray(sag, dtype=np.float64),
        np.ascontiguousarray(cor, dtype=np.float64),
        out,
    )
    return out


@nb.njit(cache=True)
def _warp2d_bilinear(src, inv, fill, out):
    h, w = src.shape
    for r in range(h):
        for c in range(w):
            sr = inv[0, 0] * r + inv[0, 1] * c + inv[0, 2]
            sc = inv[1, 0] * r + inv[1, 1] * c + inv[1, 2]
            r0 = int(np.floor(sr))
            c0 = int(np.floor(sc))
            tr = sr - r0
            tc = sc - c0
            acc = 0.0
            for dr in range(2):
                wr = tr if dr == 1 else 1.0 - tr
                rr = r0 + dr
                for dc in range(2):
                    wc = tc if dc == 1 else 1.0 - tc
                    cc = c0 + dc
                    if 0 <= rr < h and 0 <= cc < w:
                        v = src[rr, cc]
                    else:
                        v = fill
                    acc += wr * wc * v
            out[r, c] = acc


def warp2d_bilinear(src: np.ndarray, inv: np.ndarray, fill: float) -> np.ndarray:
    out = np.empty(src.shape, dtype=np.float64)
    _warp2d_bilinear(
        np.ascontiguousarray(src, dtype=np.float64),
        np.ascontiguousarray(inv, dtype=np.float64),
        float(fill),
        out,
    )
    return out.astype(src.dtype) if np.issubdtype(src.dtype, np.floating) else out
