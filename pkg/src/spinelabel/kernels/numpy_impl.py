"""Pure-numpy reference implementations of the hot array kernels.

Selected over the numba backend with ``SPINELABEL_KERNELS=numpy``; also the
fallback when numba is unavailable. Signatures mirror numba_impl exactly.
"""

from __future__ import annotations

import numpy as np


def resample_trilinear(data: np.ndarray, scale, out_shape, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Trilinear resampling onto a grid where output voxel i maps to input
    coordinate offset + i * scale (per axis), clamped at the edges."""
    dims = data.shape
    qs = []
    for axis in range(3):
        q = offset[axis] + np.arange(out_shape[axis], dtype=np.float64) * scale[axis]
        qs.append(np.clip(q, 0.0, dims[axis] - 1.0))
    out = None
    lo, hi, frac = [], [], []
    for axis, q in enumerate(qs):
        i0 = np.floor(q).astype(np.int64)
        i1 = np.minimum(i0 + 1, dims[axis] - 1)
        lo.append(i0)
        hi.append(i1)
        frac.append(q - i0)
    ti = frac[0][:, None, None]
    tj = frac[1][None, :, None]
    tk = frac[2][None, None, :]
    out = np.zeros(tuple(out_shape), dtype=np.float64)
    for ci, wi in ((lo[0], 1.0 - ti), (hi[0], ti)):
        for cj, wj in ((lo[1], 1.0 - tj), (hi[1], tj)):
            for ck, wk in ((lo[2], 1.0 - tk), (hi[2], tk)):
                out += wi * wj * wk * data[np.ix_(ci, cj, ck)].astype(np.float64)
    return out.astype(data.dtype)


def _axis_gaussians(shape, spacing, center_mm, sigma_mm):
    inv2s2 = 1.0 / (2.0 * sigma_mm * sigma_mm)
    return [
        np.exp(-((np.arange(shape[a]) * spacing[a] - center_mm[a]) ** 2) * inv2s2)
        for a in range(3)
    ]


def heatmap_stack_3d(shape, spacing, centers_mm: np.ndarray, channels: np.ndarray,
                     sigma_mm: float, n_channels: int) -> np.ndarray:
    """Channels-last (h, w, d, n_channels) stack of separable Gaussians; channel 0
    is filled with 1 - max over the foreground channels."""
    out = np.zeros(tuple(shape) + (n_channels,), dtype=np.float64)
    for n in range(centers_mm.shape[0]):
        ex, ey, ez = _axis_gaussians(shape, spacing, centers_mm[n], sigma_mm)
        out[..., int(channels[n])] = ex[:, None, None] * ey[None, :, None] * ez[None, None, :]
    out[..., 0] = 1.0 - out[..., 1:].max(axis=-1)
    return out


def max_gaussian_3d(shape, spacing, centers_mm: np.ndarray, sigma_mm: float) -> np.ndarray:
    """Pointwise maximum over one Gaussian per centroid (single-channel map)."""
    out = np.zeros(tuple(shape), dtype=np.float64)
    for n in range(centers_mm.shape[0]):
        ex, ey, ez = _axis_gaussians(shape, spacing, centers_mm[n], sigma_mm)
        np.maximum(out, ex[:, None, None] * ey[None, :, None] * ez[None, None, :], out=out)
    return out


def fuse_outer(sag: np.ndarray, cor: np.ndarray) -> np.ndarray:
    """Per-channel outer product: out[i, j, k, c] = sag[i, j, c] * cor[i, k, c]."""
    return (sag[:, :, None, :] * cor[:, None, :, :]).astype(np.float64)


def warp2d_bilinear(src: np.ndarray, inv: np.ndarray, fill: float) -> np.ndarray:
    """Warp by sampling src at inv @ (row, col, 1); missing neighbours read as fill."""
    h, w = src.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    sr = inv[0, 0] * rows + inv[0, 1] * cols + inv[0, 2]
    sc = inv[1, 0] * rows + inv[1, 1] * cols + inv[1, 2]
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    tr = sr - r0
    tc = sc - c0
    out = np.zeros((h, w), dtype=np.float64)
    srcf = src.astype(np.float64)
    for dr, wr in ((0, 1.0 - tr), (1, tr)):
        for dc, wc in ((0, 1.0 - tc), (1, tc)):
            rr = r0 + dr
            cc = c0 + dc
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.where(valid, srcf[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], fill)
            out += wr * wc * vals
    return out.astype(src.dtype) if np.issubdtype(src.dtype, np.floating) else out
