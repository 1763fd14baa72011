"""Timing comparison of the numba kernels against their numpy fallbacks."""

from __future__ import annotations

import time

import numpy as np

from . import kernels

SIZES = {
    "small": {"volume": (48, 32, 32), "image": (64, 48), "channels": 26},
    "medium": {"volume": (96, 64, 64), "image": (128, 96), "channels": 26},
}


def _inputs(size: str, rng: np.random.Generator) -> dict:
    dims = SIZES[size]
    h, w, d = dims["volume"]
    c = dims["channels"]
    centers = rng.uniform(0, min(h, w, d) * 2.0, size=(8, 3))
    return {
        "resample_trilinear": (rng.normal(size=(h, w, d)), (0.5, 0.5, 0.5), (2 * h, 2 * w, 2 * d)),
        "heatmap_stack_3d": ((h, w, d), (2.0, 2.0, 2.0), centers,
                             np.arange(1, 9, dtype=np.int64), 4.0, c + 1),
        "max_gaussian_3d": ((h, w, d), (2.0, 2.0, 2.0), centers, 15.0),
        "fuse_outer": (rng.random((h, w, c)), rng.random((h, d, c))),
        "warp2d_bilinear": (rng.normal(size=dims["image"]),
                            np.array([[0.97, 0.05, 1.5], [-0.05, 0.97, -2.0]]), -1000.0),
    }


def run_benchmark(size: str = "small", repeats: int = 3, seed: int = 0) -> list[dict]:
    """Per kernel: best-of-repeats wall time on each backend plus the ratio."""
    rng = np.random.default_rng(seed)
    inputs = _inputs(size, rng)
    backends = kernels.available_backends()
    rows = []
    previous = kernels.active_backend()
    try:
        for name in kernels.KERNEL_NAMES:
            args = inputs[name]
            row = {"kernel": name, "size": size}
            for backend in backends:
                kernels.use_backend(backend)
                fn = getattr(kernels, name)
                fn(*args)  # warm-up (and numba compile)
                best = min(_timed(fn, args) for _ in range(repeats))
                row[backend] = best
            if "numba" in row and "numpy" in row and row["numba"] > 0:
                row["speedup"] = row["numpy"] / row["numba"]
            rows.append(row)
    finally:
        kernels.use_backend(previous)
    return rows


def _timed(fn, args) -> float:
    start = time.perf_counter()
    fn(*args)
    return time.perf_counter() - start


def format_table(rows: list[dict]) -> str:
    headers = ["kernel", "size", "numpy", "numba", "speedup"]
    lines = ["  ".join(f"{h:>18}" for h in headers)]
    for row in rows:
        cells = []
        for h in headers:
            v = row.get(h)
            if isinstance(v, float):
                cells.append(f"{v:>18.6f}" if h != "speedup" else f"{v:>18.2f}")
            else:
                cells.append(f"{str(v) if v is not None else '-':>18}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
