"""Domain types: vertebra taxonomy, volumes, annotations, heatmap stacks, boxes.

All types are immutable value objects. Arrays held by them are treated as
read-only by convention; operations always allocate new arrays.

Axis convention (fixed for the whole package):
    axis 0 = cranio-caudal (h), axis 1 = anterior-posterior (w),
    axis 2 = left-right (d). The sagittal projection collapses axis 2 and
    yields an (h x w) image; the coronal projection collapses axis 1 and
    yields (h x d).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidLabel, OutOfBounds

VERTEBRA_NAMES: tuple[str, ...] = tuple(
    [f"C{i}" for i in range(1, 8)]
    + [f"T{i}" for i in range(1, 13)]
    + [f"L{i}" for i in range(1, 6)]
    + ["S1", "S2"]
)
N_LABELS = len(VERTEBRA_NAMES)  # 26; channel 0 of a heatmap stack is background
N_CHANNELS = N_LABELS + 1

AIR_HU = -1000.0


@dataclass(frozen=True, order=True)
class VertebraLabel:
    """One of the 26 vertebrae C1..S2, ordered cranio-caudally."""

    index: int  # 1..26
    name: str = field(compare=False)

    def __post_init__(self):
        if not (1 <= self.index <= N_LABELS):
            raise InvalidLabel(f"index {self.index} outside 1..{N_LABELS}")
        if VERTEBRA_NAMES[self.index - 1] != self.name:
            raise InvalidLabel(f"name {self.name!r} does not match index {self.index}")


def label_from_index(index: int) -> VertebraLabel:
    if not isinstance(index, (int, np.integer)) or not (1 <= index <= N_LABELS):
        raise InvalidLabel(f"index {index!r} outside 1..{N_LABELS}")
    return VertebraLabel(int(index), VERTEBRA_NAMES[index - 1])


def label_from_name(name: str) -> VertebraLabel:
    try:
        return VertebraLabel(VERTEBRA_NAMES.index(name) + 1, name)
    except ValueError:
        raise InvalidLabel(f"unknown vertebra name {name!r}") from None


ALL_LABELS: tuple[VertebraLabel, ...] = tuple(label_from_index(i) for i in range(1, N_LABELS + 1))


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field with voxel spacing and physical origin, both in mm.

    ``data`` has shape (h, w, d). Voxel (i, j, k) is centred at
    ``origin + (i, j, k) * spacing``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_to_physical(self, idx) -> np.ndarray:
        """Physical mm coordinates of a voxel centre (accepts an (n,3) array)."""
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def contains(self, point_mm) -> bool:
        """True if the point lies inside the voxel extent (half-voxel margins)."""
        q = (np.asarray(point_mm, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)
        dims = np.asarray(self.shape)
        return bool(np.all(q >= -0.5) and np.all(q <= dims - 0.5))

    def physical_to_voxel(self, point_mm) -> tuple[int, int, int]:
        """Nearest voxel index; half-way points round down.

        Raises OutOfBounds for points outside the physical extent.
        """
        if not self.contains(point_mm):
            raise OutOfBounds(f"point {tuple(point_mm)} outside volume extent")
        q = (np.asarray(point_mm, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)
        idx = np.ceil(q - 0.5).astype(int)  # round half down
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return tuple(int(v) for v in idx)


@dataclass(frozen=True)
class AnnotationSet:
    """Labelled vertebral centroids in physical mm; partial per field of view."""

    entries: dict[VertebraLabel, tuple[float, float, float]]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, label: VertebraLabel) -> bool:
        return label in self.entries

    def labels(self) -> list[VertebraLabel]:
        return sorted(self.entries)

    def position(self, label: VertebraLabel) -> np.ndarray:
        return np.asarray(self.entries[label], dtype=np.float64)

    def to_json(self) -> str:
        items = [
            {"label": lab.name, "position_mm": [float(c) for c in pos]}
            for lab, pos in sorted(self.entries.items())
        ]
        return json.dumps(items, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AnnotationSet":
        entries = {}
        for item in json.loads(text):
            lab = label_from_name(item["label"])
            if lab in entries:
                raise InvalidLabel(f"duplicate centroid for {lab.name}")
            entries[lab] = tuple(float(c) for c in item["position_mm"])
        return cls(entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "AnnotationSet":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class HeatmapStack:
    """Channels-last stack of per-vertebra heatmaps.

    ``data`` is (spatial dims..., 27) when the background channel is included
    (channel 0), or (spatial dims..., 26) when it is excluded, e.g. for
    adversary inputs. Values of constructed targets lie in [0, 1]; network
    predictions are not clamped.
    """

    data: np.ndarray
    sigma_mm: float
    includes_background: bool = True

    def __post_init__(self):
        want = N_CHANNELS if self.includes_background else N_LABELS
        if self.data.shape[-1] != want:
            raise ValueError(f"expected {want} channels, got {self.data.shape[-1]}")

    @property
    def n_spatial_dims(self) -> int:
        return self.data.ndim - 1

    def foreground(self) -> np.ndarray:
        """The 26 vertebra channels, background dropped."""
        return self.data[..., 1:] if self.includes_background else self.data

    def without_background(self) -> "HeatmapStack":
        if not self.includes_background:
            return self
        return HeatmapStack(self.data[..., 1:], self.sigma_mm, includes_background=False)


def attach_background(foreground: np.ndarray, sigma_mm: float) -> HeatmapStack:
    """Build a 27-channel stack with channel 0 = 1 - max over the 26 foreground channels."""
    bg = 1.0 - foreground.max(axis=-1, keepdims=True)
    return HeatmapStack(np.concatenate([bg, foreground], axis=-1), sigma_mm)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned voxel box with inclusive corners."""

    lower: tuple[int, int, int]
    upper: tuple[int, int, int]
    padding_vox: int = 0

    def __post_init__(self):
        if any(lo > up for lo, up in zip(self.lower, self.upper)):
            raise ValueError(f"box lower {self.lower} exceeds upper {self.upper}")

    def n_voxels(self) -> int:
        return int(np.prod([up - lo + 1 for lo, up in zip(self.lower, self.upper)]))

    def axis_range(self, axis: int) -> tuple[int, int]:
        """Inclusive (lo, hi) index range along one axis."""
        return self.lower[axis], self.upper[axis]


def transform_box(box: BoundingBox, src: Volume, dst: Volume) -> BoundingBox:
    """Map a voxel box between volume grids through physical coordinates.

    The box is expanded outward (floor/ceil) so it never shrinks; corners are
    clamped to the destination bounds.
    """
    src_sp = np.asarray(src.spacing)
    lo_mm = np.asarray(src.origin) + (np.asarray(box.lower) - 0.5) * src_sp
    hi_mm = np.asarray(src.origin) + (np.asarray(box.upper) + 0.5) * src_sp
    dst_sp = np.asarray(dst.spacing)
    lo = np.floor((lo_mm - np.asarray(dst.origin)) / dst_sp + 0.5).astype(int)
    hi = np.ceil((hi_mm - np.asarray(dst.origin)) / dst_sp - 0.5).astype(int)
    dims = np.asarray(dst.shape)
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, 0, dims - 1)
    return BoundingBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi), box.padding_vox)
