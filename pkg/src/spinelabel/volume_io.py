"""Volume loading, intensity normalization, resampling and view padding."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import formats, kernels
from .core import AIR_HU, AnnotationSet, Volume
from .errors import FormatError


def load_volume(path: str | Path) -> Volume:
    """Read a NIfTI (.nii/.nii.gz) or NRRD (.nrrd) volume."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        return formats.read_nifti(path)
    if name.endswith(".nrrd"):
        return formats.read_nrrd(path)
    raise FormatError(f"{path}: unrecognised volume extension")


def save_volume(volume: Volume, path: str | Path) -> None:
    path = Path(path)
    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        formats.write_nifti(volume, path)
    elif name.endswith(".nrrd"):
        formats.write_nrrd(volume, path)
    else:
        raise FormatError(f"{path}: unrecognised volume extension")


def load_annotations(path: str | Path) -> AnnotationSet:
    return AnnotationSet.load(path)


def normalize_hu(volume: Volume) -> Volume:
    """Clip intensities below the HU value of air (-1000); idempotent."""
    return Volume(np.maximum(volume.data, AIR_HU), volume.spacing, volume.origin)


def resample_isotropic(volume: Volume, res_mm: float) -> Volume:
    """Trilinear resample onto an isotropic grid sharing the volume origin."""
    if res_mm <= 0:
        raise ValueError(f"res_mm must be positive, got {res_mm}")
    out_shape = tuple(
        max(1, int(np.floor(dim * sp / res_mm + 0.5)))
        for dim, sp in zip(volume.shape, volume.spacing)
    )
    scale = tuple(res_mm / sp for sp in volume.spacing)
    data = kernels.resample_trilinear(volume.data, scale, out_shape)
    return Volume(data, (res_mm, res_mm, res_mm), volume.origin)


def pad_views_to_match(volume: Volume, fill: float = AIR_HU) -> Volume:
    """Centre-pad the smaller of axes {1, 2} until w == d.

    Odd remainders place the extra voxel at the high end. The origin shifts so
    physical coordinates (and hence annotations) stay valid.
    """
    h, w, d = volume.shape
    if w == d:
        return volume
    axis = 1 if w < d else 2
    diff = abs(d - w)
    low = diff // 2
    high = diff - low
    pads = [(0, 0)] * 3
    pads[axis] = (low, high)
    data = np.pad(volume.data, pads, constant_values=fill)
    origin = list(volume.origin)
    origin[axis] -= low * volume.spacing[axis]
    return Volume(data, volume.spacing, tuple(origin))


def pad_to_multiple(volume: Volume, multiple: int, fill: float = AIR_HU) -> Volume:
    """Pad the high end of every axis up to the next multiple (network stride)."""
    pads = []
    for dim in volume.shape:
        target = -(-dim // multiple) * multiple
        pads.append((0, target - dim))
    if not any(p[1] for p in pads):
        return volume
    data = np.pad(volume.data, pads, constant_values=fill)
    return Volume(data, volume.spacing, volume.origin)
