"""From two 2D heatmap predictions to 3D centroids: threshold, outer-product
fusion, per-channel argmax. A label is predicted only when both views respond
above threshold in its channel, since the product annihilates otherwise."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import kernels, reformation, volume_io
from .core import (AnnotationSet, BoundingBox, HeatmapStack, N_LABELS, Volume,
                   label_from_index, transform_box)
from .errors import ShapeError


def threshold_heatmap(stack: HeatmapStack, t: float) -> HeatmapStack:
    """Zero foreground values below t; the background channel is untouched."""
    if not (0.0 <= t < 1.0):
        raise ValueError(f"threshold must lie in [0, 1), got {t}")
    fg = stack.foreground()
    fg = np.where(fg >= t, fg, 0.0)
    if stack.includes_background:
        data = np.concatenate([stack.data[..., :1], fg], axis=-1)
    else:
        data = fg
    return HeatmapStack(data, stack.sigma_mm, stack.includes_background)


def _foreground_2d(view) -> np.ndarray:
    if isinstance(view, HeatmapStack):
        view = view.foreground()
    view = np.asarray(view)
    if view.ndim != 3:
        raise ShapeError(f"expected a 2D stack (H, W, C), got shape {view.shape}")
    if view.shape[-1] == N_LABELS + 1:
        view = view[..., 1:]
    elif view.shape[-1] != N_LABELS:
        raise ShapeError(f"expected 26 or 27 channels, got {view.shape[-1]}")
    return view


def fuse(sag, cor) -> np.ndarray:
    """Per-channel outer product -> (h, w, d, 26); background is excluded."""
    sag = _foreground_2d(sag)
    cor = _foreground_2d(cor)
    if sag.shape[0] != cor.shape[0]:
        raise ShapeError(f"views disagree on height: {sag.shape[0]} vs {cor.shape[0]}")
    return kernels.fuse_outer(sag, cor)


def extract_centroids(fused: np.ndarray, volume: Volume) -> tuple[AnnotationSet, dict]:
    """Argmax voxel of every channel with a positive response, as mm positions.

    Returns the predicted annotation set and per-label confidence (the fused
    channel maximum). Ties resolve to the lowest linear index.
    """
    if fused.ndim != 4 or fused.shape[-1] != N_LABELS:
        raise ShapeError(f"expected (h, w, d, 26), got {fused.shape}")
    entries = {}
    confidence = {}
    for c in range(N_LABELS):
        channel = fused[..., c]
        peak = float(channel.max())
        if peak <= 0.0:
            continue
        idx = np.unravel_index(int(np.argmax(channel)), channel.shape)
        label = label_from_index(c + 1)
        entries[label] = tuple(float(v) for v in volume.voxel_to_physical(idx))
        confidence[label] = peak
    return AnnotationSet(entries), confidence


@dataclass
class PredictionResult:
    annotations: AnnotationSet
    confidence: dict
    sag_stack: HeatmapStack  # raw (un-thresholded) view predictions
    cor_stack: HeatmapStack
    volume: Volume  # the preprocessed grid predictions live on

    def to_json(self) -> str:
        items = [
            {"label": lab.name,
             "position_mm": [float(v) for v in pos],
             "confidence": float(self.confidence[lab])}
            for lab, pos in sorted(self.annotations.entries.items())
        ]
        return json.dumps(items, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def view_images(volume: Volume, *, box: BoundingBox | None = None,
                weights_map: np.ndarray | None = None,
                dual: bool = False) -> dict[str, np.ndarray]:
    """Network input image(s) per view: a (localized) MIP, plus a weighted
    meanIP second channel in dual mode."""
    out = {}
    kind = "naive_mip" if box is None else "localized_mip"
    for view in reformation.VIEWS:
        mip = reformation.project(volume, reformation.ProjectionSpec(view=view, kind=kind, box=box))
        if dual:
            weights = weights_map if weights_map is not None else np.ones(volume.shape)
            mean = reformation.project(volume, reformation.ProjectionSpec(
                view=view, kind="weighted_meanip", weights=weights, box=box))
            out[view] = np.stack([mip, mean], axis=0)
        else:
            out[view] = mip[None]
    return out


def scale_intensity(image_hu: np.ndarray) -> np.ndarray:
    """Map HU to network input range: air -> 0, bone ~ 1.3."""
    return (np.asarray(image_hu, dtype=np.float32) + 1000.0) / 1000.0


def forward_views(model, images: dict[str, np.ndarray]) -> dict[str, HeatmapStack]:
    """Run the labelling network on one scan's view images (channel-first)."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        sag = torch.from_numpy(scale_intensity(images["sagittal"]))[None]
        cor = torch.from_numpy(scale_intensity(images["coronal"]))[None]
        out_sag, out_cor = model(sag, cor)
    if was_training:
        model.train()
    stacks = {}
    for view, out in (("sagittal", out_sag), ("coronal", out_cor)):
        stacks[view] = HeatmapStack(out[0].permute(1, 2, 0).numpy().astype(np.float64),
                                    sigma_mm=0.0)
    return stacks


def predict_scan(model, volume: Volume, *, threshold: float = 0.0,
                 resolution_mm: float = 2.0, box: BoundingBox | None = None,
                 weights_map: np.ndarray | None = None,
                 preprocessed: bool = False) -> PredictionResult:
    """Full single-scan pipeline: preprocess, project, forward, fuse, extract.

    ``box``/``weights_map`` are interpreted on the preprocessed grid; pass
    ``preprocessed=True`` when the volume is already normalized/resampled.
    """
    vol = volume if preprocessed else reformation.preprocess_volume(volume, resolution_mm)
    dual = bool(getattr(model, "cfg").dual_input)
    images = view_images(vol, box=box, weights_map=weights_map, dual=dual)
    stacks = forward_views(model, images)
    th_sag = threshold_heatmap(stacks["sagittal"], threshold)
    th_cor = threshold_heatmap(stacks["coronal"], threshold)
    fused = fuse(th_sag, th_cor)
    ann, conf = extract_centroids(fused, vol)
    return PredictionResult(ann, conf, stacks["sagittal"], stacks["coronal"], vol)


def localized_inputs(raw_volume: Volume, loc_volume: Volume, loc_heatmap: np.ndarray,
                     box4: BoundingBox, resolution_mm: float = 2.0
                     ) -> tuple[Volume, BoundingBox, np.ndarray]:
    """Map a localizer box and heatmap from the coarse grid onto the labelling
    grid: returns (preprocessed volume, box, resampled weights)."""
    vol = reformation.preprocess_volume(raw_volume, resolution_mm)
    box = transform_box(box4, loc_volume, vol)
    heat = Volume(loc_heatmap.astype(np.float64), loc_volume.spacing, loc_volume.origin)
    scale = tuple(resolution_mm / s for s in heat.spacing)
    offset = tuple((vo - ho) / hs
                   for vo, ho, hs in zip(vol.origin, heat.origin, heat.spacing))
    weights = kernels.resample_trilinear(heat.data, scale, vol.shape, offset)
    return vol, box, np.clip(weights, 0.0, None)
