"""Coarse 3D spine pre-localization: a light U-shaped regression network at
4 mm isotropic resolution, bounding-box extraction from its heatmap, and the
box-overlap metrics.

Kernel rules for the network: every convolution is 3x3x3 except the final
1x1x1, transposed convolutions are 4x4x4, average pooling is 2x2x2 stride 2,
and the output is sigmoid-bounded.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels, volume_io
from .core import AnnotationSet, BoundingBox, Volume
from .errors import DivergenceError, EmptyDataset, NoSpineDetected
from .networks import file_sha256
from .training import lr_at

LOCALIZER_SIGMA_MM = 15.0
LOCALIZER_RESOLUTION_MM = 4.0
DETECTION_THRESHOLD = 0.5
DEFAULT_PAD_VOX = 5  # 20 mm margin at 4 mm


def localizer_target(volume: Volume, ann: AnnotationSet,
                     sigma_mm: float = LOCALIZER_SIGMA_MM) -> np.ndarray:
    """Single-channel map: pointwise max over one wide Gaussian per vertebra."""
    labels = ann.labels()
    centers = np.asarray(
        [ann.position(l) - np.asarray(volume.origin) for l in labels],
        dtype=np.float64).reshape(-1, 3)
    return kernels.max_gaussian_3d(volume.shape, volume.spacing, centers, sigma_mm)


def _cbr3(cin, cout, kernel=3):
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel, padding=kernel // 2),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class SpineLocalizerNet(nn.Module):
    """Two-level 3D U-network regressing the spine heatmap in [0, 1]."""

    def __init__(self, base_channels: int = 8):
        super().__init__()
        c = base_channels
        self.e1a = _cbr3(1, c)
        self.e1b = _cbr3(c, c)
        self.pool1 = nn.AvgPool3d(2, stride=2)
        self.e2 = _cbr3(c, 2 * c)
        self.pool2 = nn.AvgPool3d(2, stride=2)
        self.mid = _cbr3(2 * c, 4 * c)
        self.up2 = nn.Sequential(nn.ConvTranspose3d(4 * c, 2 * c, 4, stride=2, padding=1),
                                 nn.BatchNorm3d(2 * c), nn.ReLU(inplace=True))
        self.d2 = _cbr3(4 * c, 2 * c)
        self.up1 = nn.Sequential(nn.ConvTranspose3d(2 * c, c, 4, stride=2, padding=1),
                                 nn.BatchNorm3d(c), nn.ReLU(inplace=True))
        self.d1 = _cbr3(2 * c, c)
        self.head = nn.Conv3d(c, 1, 1)

    def forward(self, x):
        dims = x.shape[2:]
        pads = []
        for dim in reversed(dims):
            target = -(-dim // 4) * 4
            pads.extend([0, target - dim])
        x = F.pad(x, pads)
        s1 = self.e1b(self.e1a(x))
        s2 = self.e2(self.pool1(s1))
        m = self.mid(self.pool2(s2))
        y = self.d2(torch.cat([self.up2(m), s2], dim=1))
        y = self.d1(torch.cat([self.up1(y), s1], dim=1))
        y = torch.sigmoid(self.head(y))
        return y[..., :dims[0], :dims[1], :dims[2]]


def preprocess_for_localizer(volume: Volume,
                             resolution_mm: float = LOCALIZER_RESOLUTION_MM) -> Volume:
    v = volume_io.normalize_hu(volume)
    return volume_io.resample_isotropic(v, resolution_mm)


def predict_heatmap(model: SpineLocalizerNet, volume: Volume) -> np.ndarray:
    """Run the localizer on a coarse-resolution volume; output in [0, 1]."""
    from .inference import scale_intensity

    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(scale_intensity(volume.data))[None, None]
        out = model(x)
    return out[0, 0].numpy().astype(np.float64)


def extract_bbox(heatmap: np.ndarray, pad_vox: int = DEFAULT_PAD_VOX) -> BoundingBox:
    """Threshold at 0.5 and box the active extent of the two projection axes;
    axis 0 always spans the full height. Padded corners clamp to bounds."""
    mask = np.asarray(heatmap) >= DETECTION_THRESHOLD
    if not mask.any():
        raise NoSpineDetected("no heatmap value reaches 0.5")
    h, w, d = mask.shape
    js = np.nonzero(mask.any(axis=(0, 2)))[0]
    ks = np.nonzero(mask.any(axis=(0, 1)))[0]
    lower = (0, max(0, int(js[0]) - pad_vox), max(0, int(ks[0]) - pad_vox))
    upper = (h - 1, min(w - 1, int(js[-1]) + pad_vox), min(d - 1, int(ks[-1]) + pad_vox))
    return BoundingBox(lower, upper, pad_vox)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = 1
    for axis in range(3):
        lo = max(a.lower[axis], b.lower[axis])
        hi = min(a.upper[axis], b.upper[axis])
        if hi < lo:
            return 0.0
        inter *= hi - lo + 1
    union = a.n_voxels() + b.n_voxels() - inter
    return inter / union


def loc_metrics(pred_boxes: list[BoundingBox],
                true_boxes: list[BoundingBox]) -> tuple[float, float]:
    """(mean IoU, detection rate); a detection is IoU > 0.5."""
    if len(pred_boxes) != len(true_boxes):
        raise ValueError("box lists must pair up per scan")
    ious = [box_iou(p, t) for p, t in zip(pred_boxes, true_boxes)]
    detected = [iou > 0.5 for iou in ious]
    return float(np.mean(ious)), float(np.mean(detected))


# --------------------------------------------------------------------------
# training


@dataclass
class LocalizerTrainConfig:
    total_iters: int = 20000
    lr0: float = 1e-3
    lr_decay: float = 0.75
    lr_decay_every: int = 10000
    lr_floor: float = 0.2e-3
    batch_size: int = 2
    seed: int = 0
    base_channels: int = 8
    sigma_mm: float = LOCALIZER_SIGMA_MM
    resolution_mm: float = LOCALIZER_RESOLUTION_MM
    checkpoint_every: int = 2000


def train_localizer(manifest_path: str | Path, out_dir: str | Path,
                    cfg: LocalizerTrainConfig) -> dict:
    """Fit the localizer with a plain l2 (mean squared) loss against the wide
    Gaussian target, Adam under the shared staircase schedule."""
    from .inference import scale_intensity

    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    scans = manifest.get("scans", [])
    train_ids = set(manifest.get("splits", {}).get("train", [])) or {s["id"] for s in scans}
    entries = [s for s in scans if s["id"] in train_ids]
    if not entries:
        raise EmptyDataset(f"{manifest_path}: no training scans")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    pairs = []
    for entry in entries:
        vol_path = _resolve(manifest_path, entry["volume"])
        volume = preprocess_for_localizer(volume_io.load_volume(vol_path), cfg.resolution_mm)
        ann = AnnotationSet.load(_resolve(manifest_path, entry["annotations"]))
        target = localizer_target(volume, ann, cfg.sigma_mm)
        pairs.append((scale_intensity(volume.data), target.astype(np.float32)))

    model = SpineLocalizerNet(cfg.base_channels)
    model.train()
    optim = torch.optim.Adam(model.parameters(), lr=cfg.lr0)

    log_rows = []
    started = time.time()
    for it in range(cfg.total_iters):
        lr = lr_at(it, cfg)
        for group in optim.param_groups:
            group["lr"] = lr
        idx = rng.integers(0, len(pairs), cfg.batch_size)
        h = max(pairs[i][0].shape[0] for i in idx)
        w = max(pairs[i][0].shape[1] for i in idx)
        d = max(pairs[i][0].shape[2] for i in idx)
        x = np.zeros((len(idx), 1, h, w, d), dtype=np.float32)
        y = np.zeros((len(idx), 1, h, w, d), dtype=np.float32)
        for row, i in enumerate(idx):
            img, tgt = pairs[i]
            x[row, 0, :img.shape[0], :img.shape[1], :img.shape[2]] = img
            y[row, 0, :tgt.shape[0], :tgt.shape[1], :tgt.shape[2]] = tgt
        pred = model(torch.from_numpy(x))
        loss = F.mse_loss(pred, torch.from_numpy(y))
        optim.zero_grad()
        loss.backward()
        optim.step()
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            raise DivergenceError(it)
        log_rows.append({"iter": it, "lr": lr, "loss": loss_value})
        if (it + 1) % cfg.checkpoint_every == 0 and it + 1 < cfg.total_iters:
            save_localizer(model, cfg, out_dir / "localizer.pt")

    ckpt_path = out_dir / "localizer.pt"
    save_localizer(model, cfg, ckpt_path)
    log_path = out_dir / "log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iter", "lr", "loss"])
        writer.writeheader()
        writer.writerows(log_rows)
    record = {"config": asdict(cfg), "manifest": str(manifest_path),
              "elapsed_s": time.time() - started,
              "checkpoint_sha256": file_sha256(ckpt_path)}
    (out_dir / "run_record.json").write_text(json.dumps(record, indent=2))
    return {"checkpoint": str(ckpt_path), "log": str(log_path), "rows": log_rows}


def localized_bbox_json(box: BoundingBox, heatmap_path) -> str:
    """The `localize` CLI output payload."""
    return json.dumps({
        "box_lower_vox": list(box.lower),
        "box_upper_vox": list(box.upper),
        "heatmap_path": str(heatmap_path),
    }, indent=2)


def save_localizer(model: SpineLocalizerNet, cfg: LocalizerTrainConfig, path) -> None:
    torch.save({"schema_version": 1, "kind": "localizer", "config": asdict(cfg),
                "state_dict": model.state_dict()}, path)


def load_localizer(path) -> tuple[SpineLocalizerNet, LocalizerTrainConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "localizer":
        raise ValueError(f"{path}: not a localizer checkpoint")
    cfg = LocalizerTrainConfig(**payload["config"])
    model = SpineLocalizerNet(cfg.base_channels)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg


def _resolve(manifest_path: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else manifest_path.parent / p
