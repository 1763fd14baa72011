"""Synthetic spine phantoms: bright vertebra ellipsoids on a curved path over
an air/soft-tissue background, with exact ground-truth centroids.

Phantoms exist to exercise the pipeline at desk scale, not to look clinical.
Centroids are snapped to voxel centres so heatmap peaks and argmax round-trips
are exact. Optional detached "rib" arcs sit far enough outside the spine
bounding box (along both in-plane axes) that a box-localized MIP provably
excludes them while a naive MIP does not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .core import AIR_HU, AnnotationSet, Volume, label_from_index, label_from_name
from .errors import InvalidLabel
from .volume_io import save_volume

BONE_HU = 300.0
SOFT_HU = 20.0
THORACIC_RANGE = range(8, 20)  # T1..T12

# rib arcs live in this offset band (mm) from the vertebra centroid: outside a
# localized box (Gaussian halfwidth ~18mm + 20mm pad) along both axes 1 and 2
RIB_AXIS1_BAND = (50.0, 68.0)
RIB_AXIS2_BAND = (46.0, 64.0)
RIB_RADIUS = 4.0


@dataclass(frozen=True)
class PhantomSpec:
    n_vertebrae: int = 8
    start_label: int | str = "T1"
    spacing_mm: float = 24.0
    curvature: float = 6.0
    noise_sd: float = 5.0
    include_ribs: bool = False
    resolution_mm: float = 2.0
    seed: int = 0

    def start_index(self) -> int:
        if isinstance(self.start_label, str):
            return label_from_name(self.start_label).index
        return int(self.start_label)


def _spine_curve(g: int) -> float:
    """Signed lateral offset of the spine path at anatomical index g (1..26):
    three alternating arcs standing in for lordosis/kyphosis/lordosis."""
    return float(np.sin(3 * np.pi * (g - 1) / 25.0))


def _stamp_ellipsoid(data: np.ndarray, res: float, center_mm, semi_mm, value: float):
    lo = [max(0, int(np.floor((c - s) / res))) for c, s in zip(center_mm, semi_mm)]
    hi = [min(dim, int(np.ceil((c + s) / res)) + 1)
          for c, s, dim in zip(center_mm, semi_mm, data.shape)]
    if any(l >= h for l, h in zip(lo, hi)):
        return
    grids = np.ix_(*[np.arange(l, h) * res for l, h in zip(lo, hi)])
    q = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center_mm, semi_mm))
    region = data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    region[q <= 1.0] = value


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, AnnotationSet]:
    """Deterministic phantom volume + exact centroid annotations."""
    n = spec.n_vertebrae
    start = spec.start_index()
    if not (1 <= n <= 26) or start < 1 or start + n - 1 > 26:
        raise InvalidLabel(f"label range {start}..{start + n - 1} outside 1..26")
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution_mm

    margin = 30.0
    h_mm = (n - 1) * spec.spacing_mm + 2 * margin
    w_mm, d_mm = (180.0, 176.0) if spec.include_ribs else (120.0, 112.0)
    shape = tuple(int(np.ceil(e / res)) for e in (h_mm, w_mm, d_mm))
    data = np.full(shape, AIR_HU, dtype=np.float32)

    wc, dc = w_mm / 2.0, d_mm / 2.0
    _stamp_ellipsoid(data, res, (h_mm / 2.0, wc, dc),
                     (h_mm / 2.0, 45.0, 40.0), SOFT_HU)

    entries = {}
    for i in range(n):
        g = start + i  # anatomical index drives size and curve phase
        y = margin + i * spec.spacing_mm + rng.uniform(-1.0, 1.0)
        x1 = wc + spec.curvature * _spine_curve(g) + rng.uniform(-1.0, 1.0)
        x2 = dc + 0.3 * spec.curvature * np.sin(2 * np.pi * (g - 1) / 25.0) \
            + rng.uniform(-1.0, 1.0)
        vox = np.floor(np.asarray([y, x1, x2]) / res + 0.5).astype(int)
        vox = np.clip(vox, 0, np.asarray(shape) - 1)
        center = vox * res  # snapped to a voxel centre: peaks land exactly on-grid
        label = label_from_index(g)
        entries[label] = tuple(float(c) for c in center)
        value = BONE_HU + rng.normal(0.0, 15.0)
        grow = 0.72 + 0.026 * (g - 1)  # cranio-caudal size gradient
        semi = (0.38 * spec.spacing_mm, 14.0 * grow, 11.0 * grow)
        _stamp_ellipsoid(data, res, center, semi, value)
        if spec.include_ribs and label.index in THORACIC_RANGE:
            _stamp_ribs(data, res, center, rng)

    if spec.noise_sd > 0:
        data = data + rng.normal(0.0, spec.noise_sd, size=shape).astype(np.float32)
    data = np.maximum(data, AIR_HU).astype(np.float32)
    return Volume(data, (res, res, res)), AnnotationSet(entries)


def _stamp_ribs(data: np.ndarray, res: float, center_mm, rng):
    j1lo, j1hi = RIB_AXIS1_BAND
    k2lo, k2hi = RIB_AXIS2_BAND
    for side in (-1.0, 1.0):
        droop = rng.uniform(4.0, 8.0)
        for u in np.linspace(0.0, 1.0, 24):
            p = (center_mm[0] + droop * u,
                 center_mm[1] + j1lo + (j1hi - j1lo - RIB_RADIUS) * u,
                 center_mm[2] + side * (k2hi - RIB_RADIUS - (k2hi - k2lo - RIB_RADIUS) * u))
            _stamp_ellipsoid(data, res, p, (RIB_RADIUS,) * 3, BONE_HU)


def rib_mask(volume: Volume, ann: AnnotationSet, bone_threshold: float = 150.0) -> np.ndarray:
    """Boolean mask of bright voxels inside the rib offset bands.

    Nothing else in the phantom is bright that far from the spine axis, so the
    mask identifies rib voxels exactly; occluder tests project it.
    """
    grid = [np.arange(s) * sp + o
            for s, sp, o in zip(volume.shape, volume.spacing, volume.origin)]
    in_band = np.zeros(volume.shape, dtype=bool)
    pad = RIB_RADIUS + 1.0
    for label in ann.labels():
        c = ann.position(label)
        band_j = np.abs(grid[1] - c[1] - (RIB_AXIS1_BAND[0] + RIB_AXIS1_BAND[1]) / 2) \
            <= (RIB_AXIS1_BAND[1] - RIB_AXIS1_BAND[0]) / 2 + pad
        band_k = (np.abs(grid[2] - c[2]) >= RIB_AXIS2_BAND[0] - pad) \
            & (np.abs(grid[2] - c[2]) <= RIB_AXIS2_BAND[1] + pad)
        in_band |= band_j[None, :, None] & band_k[None, None, :]
    return in_band & (np.asarray(volume.data) >= bone_threshold)


_REGION_RANGES = {
    "cervical": ((1, 2), (5, 7), 7),
    "thoracic": ((8, 12), (6, 8), 19),
    "lumbar": ((20, 21), (5, 7), 26),
    "thoracolumbar": ((15, 18), (7, 9), 26),
}
FOV_POLICIES = ("cervical", "thoracic", "lumbar", "full", "mixed", "thoracolumbar")
_MIXED_CYCLE = ("cervical", "thoracic", "lumbar", "thoracolumbar")


def _draw_fov(policy: str, rng) -> tuple[int, int]:
    if policy == "full":
        return 1, 26
    (s_lo, s_hi), (n_lo, n_hi), last = _REGION_RANGES[policy]
    start = int(rng.integers(s_lo, s_hi + 1))
    n_max = min(n_hi, last - start + 1)
    n = int(rng.integers(n_lo, n_max + 1)) if n_max > n_lo else n_lo
    return start, n


def generate_dataset(out_dir: str | Path, n_scans: int, fov_policy: str = "mixed",
                     seed: int = 0, *, include_ribs: bool = False,
                     resolution_mm: float = 2.0, spacing_mm: float = 24.0,
                     curvature: float = 6.0, noise_sd: float = 5.0,
                     split: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> Path:
    """Write n_scans phantom volumes + annotations + a manifest with splits."""
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    if fov_policy not in FOV_POLICIES:
        raise ValueError(f"fov_policy must be one of {FOV_POLICIES}")
    if abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    scans = []
    for i in range(n_scans):
        policy = _MIXED_CYCLE[i % len(_MIXED_CYCLE)] if fov_policy == "mixed" else fov_policy
        start, n = _draw_fov(policy, rng)
        spec = PhantomSpec(
            n_vertebrae=n, start_label=start, spacing_mm=spacing_mm,
            curvature=curvature, noise_sd=noise_sd, include_ribs=include_ribs,
            resolution_mm=resolution_mm, seed=int(rng.integers(0, 2 ** 31)),
        )
        volume, ann = generate_phantom(spec)
        sid = f"phantom_{i:03d}"
        vol_path = out_dir / f"{sid}.nii.gz"
        ann_path = out_dir / f"{sid}.json"
        save_volume(volume, vol_path)
        ann.save(ann_path)
        scans.append({"id": sid, "volume": vol_path.name, "annotations": ann_path.name,
                      "region": policy, "spec": asdict(spec)})

    ids = [s["id"] for s in scans]
    order = list(rng.permutation(n_scans))
    n_train = int(round(split[0] * n_scans))
    n_val = int(round(split[1] * n_scans))
    n_train = min(n_train, n_scans)
    n_val = min(n_val, n_scans - n_train)
    splits = {
        "train": sorted(ids[i] for i in order[:n_train]),
        "val": sorted(ids[i] for i in order[n_train:n_train + n_val]),
        "test": sorted(ids[i] for i in order[n_train + n_val:]),
    }
    manifest = {"policy": fov_policy, "seed": seed, "scans": scans, "splits": splits}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
