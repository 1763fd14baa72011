"""2D reformations of CT volumes and projected Gaussian heatmap targets.

A sagittal reformation collapses axis 2 and is (h x w); a coronal one
collapses axis 1 and is (h x d). Training inputs are maximum intensity
projections (naive, slab or box-localized) or weighted mean projections;
targets are channelwise max-projections of the 3D Gaussian heatmap stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels, volume_io
from .core import (AIR_HU, N_CHANNELS, N_LABELS, AnnotationSet, BoundingBox,
                   HeatmapStack, Volume, attach_background)
from .errors import EmptyDataset, EmptyProjection, ShapeError

VIEWS = ("sagittal", "coronal")
COLLAPSE_AXIS = {"sagittal": 2, "coronal": 1}
PROJECTION_KINDS = ("naive_mip", "localized_mip", "weighted_meanip", "slab_mip")


@dataclass(frozen=True)
class ProjectionSpec:
    """How to reduce a volume to one 2D view."""

    view: str
    kind: str = "naive_mip"
    slab_range: tuple[int, int] | None = None  # (start, count) along the collapsed axis
    weights: np.ndarray | None = None  # 3D map for weighted_meanip
    box: BoundingBox | None = None  # restriction for localized kinds

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        if self.kind not in PROJECTION_KINDS:
            raise ValueError(f"kind must be one of {PROJECTION_KINDS}, got {self.kind!r}")


def _collapse_slice(volume: Volume, spec: ProjectionSpec) -> tuple[int, int, int]:
    """Inclusive-exclusive (axis, start, stop) range along the collapsed axis."""
    axis = COLLAPSE_AXIS[spec.view]
    extent = volume.shape[axis]
    if spec.kind == "slab_mip":
        if spec.slab_range is None:
            raise ValueError("slab_mip requires slab_range")
        start, count = spec.slab_range
        if start < 0 or count < 0 or start + count > extent:
            raise ShapeError(f"slab {spec.slab_range} outside axis extent {extent}")
        if count == 0:
            raise EmptyProjection("slab selects no slices")
        return axis, start, start + count
    if spec.kind == "localized_mip" or (spec.kind == "weighted_meanip" and spec.box is not None):
        if spec.box is None:
            raise ValueError("localized_mip requires a bounding box")
        lo, hi = spec.box.axis_range(axis)
        lo = max(lo, 0)
        hi = min(hi, extent - 1)
        if lo > hi:
            raise EmptyProjection("box selects no slices")
        return axis, lo, hi + 1
    return axis, 0, extent


def project(volume: Volume, spec: ProjectionSpec) -> np.ndarray:
    """Reduce the volume to a 2D image according to the projection spec."""
    axis, start, stop = _collapse_slice(volume, spec)
    sel = [slice(None)] * 3
    sel[axis] = slice(start, stop)
    block = volume.data[tuple(sel)]
    if spec.kind == "weighted_meanip":
        if spec.weights is None:
            raise ValueError("weighted_meanip requires a weights map")
        if spec.weights.shape != volume.shape:
            raise ShapeError(
                f"weights shape {spec.weights.shape} != volume shape {volume.shape}")
        w = spec.weights[tuple(sel)].astype(np.float64)
        num = (w * block).sum(axis=axis)
        den = w.sum(axis=axis)
        with np.errstate(invalid="ignore"):
            img = np.where(den > 0, num / np.where(den > 0, den, 1.0), AIR_HU)
        return img.astype(np.float64)
    return block.max(axis=axis).astype(np.float64)


def sample_slab(view: str, volume: Volume, rng) -> ProjectionSpec:
    """Random slab-MIP spec: thickness n ~ U[D/2, D], start ~ U[0, D - n]."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    extent = volume.shape[COLLAPSE_AXIS[view]]
    n_min = -(-extent // 2)  # ceil(D/2)
    n = int(rng.integers(n_min, extent + 1))
    start = int(rng.integers(0, extent - n + 1))
    return ProjectionSpec(view=view, kind="slab_mip", slab_range=(start, n))


def make_heatmap_3d(volume: Volume, ann: AnnotationSet, sigma_mm: float) -> HeatmapStack:
    """27-channel 3D stack: Gaussian of spread sigma_mm (in mm) per annotated
    vertebra, channel 0 the complement of the foreground maximum."""
    if sigma_mm <= 0:
        raise ValueError(f"sigma_mm must be positive, got {sigma_mm}")
    labels = ann.labels()
    centers = np.asarray(
        [ann.position(lab) - np.asarray(volume.origin) for lab in labels],
        dtype=np.float64,
    ).reshape(-1, 3)
    channels = np.asarray([lab.index for lab in labels], dtype=np.int64)
    data = kernels.heatmap_stack_3d(volume.shape, volume.spacing, centers, channels,
                                    sigma_mm, N_CHANNELS)
    return HeatmapStack(data, sigma_mm)


def project_heatmap(stack: HeatmapStack, view: str) -> HeatmapStack:
    """Max-project foreground channels along the view's collapsed axis and
    recompute the background channel."""
    if not stack.includes_background:
        raise ValueError("project_heatmap expects a stack with a background channel")
    if stack.n_spatial_dims != 3:
        raise ShapeError("project_heatmap expects a 3D stack")
    axis = COLLAPSE_AXIS[view]
    fg = stack.data[..., 1:].max(axis=axis)
    return attach_background(fg, stack.sigma_mm)


def median_frequency_weights(annotation_sets: list[AnnotationSet]) -> np.ndarray:
    """Per-label weights: median occurrence count over occurring labels divided
    by each label's count; absent labels get weight 0."""
    counts = np.zeros(N_LABELS, dtype=np.float64)
    for ann in annotation_sets:
        for lab in ann.labels():
            counts[lab.index - 1] += 1
    present = counts[counts > 0]
    if present.size == 0:
        raise EmptyDataset("no vertebra occurs in the training annotations")
    med = float(np.median(present))
    return np.where(counts > 0, med / np.where(counts > 0, counts, 1.0), 0.0)


# --------------------------------------------------------------------------
# dataset preparation


def preprocess_volume(volume: Volume, resolution_mm: float, stride: int = 8) -> Volume:
    """Normalize, resample isotropically and pad for network consumption."""
    v = volume_io.normalize_hu(volume)
    v = volume_io.resample_isotropic(v, resolution_mm)
    v = volume_io.pad_views_to_match(v)
    return volume_io.pad_to_multiple(v, stride)


def view_targets(volume: Volume, ann: AnnotationSet, sigma_mm: float) -> dict[str, HeatmapStack]:
    h3 = make_heatmap_3d(volume, ann, sigma_mm)
    return {view: project_heatmap(h3, view) for view in VIEWS}


def prepare_dataset(manifest_path: str | Path, out_dir: str | Path, *,
                    resolution_mm: float = 2.0, sigma_mm: float = 4.0,
                    n_projections: int = 10, seed: int = 0, jobs: int = 1) -> Path:
    """Build the training corpus of paired (image, 27-channel target) arrays.

    Layout: ``{out_dir}/{scan_id}/{view}/{aug:02d}.npz``. Aug index 0 is the
    naive full MIP; the remaining indices are random slab MIPs whose seeds are
    recorded in the output manifest. Returns the path of that manifest.
    """
    manifest_path = Path(manifest_path)
    source = json.loads(manifest_path.read_text())
    scans = source.get("scans", [])
    if not scans:
        raise EmptyDataset(f"{manifest_path}: no scans listed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = source.get("splits") or {"train": [s["id"] for s in scans], "val": [], "test": []}
    split_of = {sid: name for name, ids in splits.items() for sid in ids}

    def _one_scan(entry):
        sid = entry["id"]
        volume = volume_io.load_volume(_resolve(manifest_path, entry["volume"]))
        ann = AnnotationSet.load(_resolve(manifest_path, entry["annotations"]))
        vol = preprocess_volume(volume, resolution_mm)
        targets = view_targets(vol, ann, sigma_mm)
        scan_seed = (seed * 100003 + _stable_hash(sid)) % (2 ** 31)
        rng = np.random.default_rng(scan_seed)
        samples = []
        for aug in range(n_projections + 1):
            entry_paths = {}
            kind = "naive_mip" if aug == 0 else "slab_mip"
            for view in VIEWS:
                spec = (ProjectionSpec(view=view) if aug == 0
                        else sample_slab(view, vol, rng))
                image = project(vol, spec).astype(np.float32)
                target = targets[view].data.astype(np.float32)
                rel = Path(sid) / view / f"{aug:02d}.npz"
                dest = out_dir / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                np.savez_compressed(dest, image=image, target=target)
                entry_paths[view] = str(rel)
            samples.append({"scan_id": sid, "aug": aug, "kind": kind,
                            "split": split_of.get(sid, "train"),
                            "sagittal": entry_paths["sagittal"],
                            "coronal": entry_paths["coronal"]})
        return sid, scan_seed, samples

    results = []
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_scan, scans))
    else:
        results = [_one_scan(s) for s in scans]

    train_ids = set(splits.get("train", []))
    train_anns = [AnnotationSet.load(_resolve(manifest_path, s["annotations"]))
                  for s in scans if s["id"] in train_ids or not train_ids]
    weights = median_frequency_weights(train_anns)

    all_samples = [s for _, _, scan_samples in results for s in scan_samples]
    prepared = {
        "resolution_mm": resolution_mm,
        "sigma_mm": sigma_mm,
        "n_projections": n_projections,
        "seed": seed,
        "scan_seeds": {sid: s for sid, s, _ in results},
        "weights": [float(w) for w in weights],
        "samples": all_samples,
        "splits": splits,
        "scans": [{**s, "volume": str(_resolve(manifest_path, s["volume"])),
                   "annotations": str(_resolve(manifest_path, s["annotations"]))}
                  for s in scans],
    }
    out_manifest = out_dir / "manifest.json"
    out_manifest.write_text(json.dumps(prepared, indent=2))
    return out_manifest


def _resolve(manifest_path: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else manifest_path.parent / p


def _stable_hash(text: str) -> int:
    value = 0
    for ch in text:
        value = (value * 131 + ord(ch)) % (2 ** 31)
    return value
