"""Hot array kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import from the ``SPINELABEL_KERNELS``
environment variable (``numba`` or ``numpy``); unset means numba when it
imports cleanly, numpy otherwise. ``use_backend`` switches at runtime, which
the tests and the ``spinelabel bench`` comparison rely on.
"""

from __future__ import annotations

import os

from . import numpy_impl

_IMPLS = {"numpy": numpy_impl}
try:
    from . import numba_impl

    _IMPLS["numba"] = numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

KERNEL_NAMES = (
    "resample_trilinear",
    "heatmap_stack_3d",
    "max_gaussian_3d",
    "fuse_outer",
    "warp2d_bilinear",
)


def _default_backend() -> str:
    env = os.environ.get("SPINELABEL_KERNELS", "").strip().lower()
    if env:
        if env not in _IMPLS:
            raise ValueError(
                f"SPINELABEL_KERNELS={env!r}: expected one of {sorted(_IMPLS)}"
            )
        return env
    return "numba" if "numba" in _IMPLS else "numpy"


_active = _default_backend()


def active_backend() -> str:
    return _active


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


def use_backend(name: str) -> str:
    """Switch the kernel backend; returns the previously active one."""
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(_IMPLS)}")
    previous = _active
    _active = name
    return previous


def _dispatch(name):
    def call(*args, **kwargs):
        return getattr(_IMPLS[_active], name)(*args, **kwargs)

    call.__name__ = name
    call.__doc__ = getattr(numpy_impl, name).__doc__
    return call


resample_trilinear = _dispatch("resample_trilinear")
heatmap_stack_3d = _dispatch("heatmap_stack_3d")
max_gaussian_3d = _dispatch("max_gaussian_3d")
fuse_outer = _dispatch("fuse_outer")
warp2d_bilinear = _dispatch("warp2d_bilinear")
