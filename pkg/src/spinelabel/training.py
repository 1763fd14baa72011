"""Supervised and adversarial training for the two-view labelling network.

One iteration draws a batch of prepared (image, target) view pairs, applies a
shared geometric augmentation per sample, and steps Adam under the staircase
learning-rate schedule. In the prior-encoding modes each view owns an
independent discriminator fed background-stripped 26-channel stacks; the
discriminator is updated once per generator update, and the generator loss
always keeps its supervised term.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from . import inference, kernels, metrics, volume_io
from .adversaries import (EBDConfig, EnergyAutoencoder, WassersteinCritic,
                          WDConfig, gradient_penalty, heatmap_to_adversary_input,
                          margin_schedule)
from .core import AIR_HU, AnnotationSet, N_CHANNELS
from .errors import DivergenceError, EmptyDataset
from .networks import ButterflyConfig, build_model, file_sha256, save_checkpoint

TRAIN_MODES = ("plain", "pe_eb", "pe_w")
LOG_COLUMNS = ("iter", "lr", "l2", "xent", "adv_g", "adv_d", "val_id_rate")


@dataclass
class TrainConfig:
    mode: str = "plain"
    total_iters: int = 80000
    lr0: float = 1e-3
    lr_decay: float = 0.75
    lr_decay_every: int = 10000
    lr_floor: float = 0.2e-3
    batch_size: int = 4
    seed: int = 0
    translate_px: float = 10.0
    rotate_deg: float = 5.0
    scale_low: float = 0.8
    scale_high: float = 1.2
    augment: bool = True
    d_updates_per_g: int = 1
    margin_initial: float = 10.0
    gp_lambda: float = 10.0
    d_base_channels: int = 16
    val_every: int = 1000
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Staircase decay, floored: max(lr_floor, lr0 * decay^(iter // every))."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return max(cfg.lr_floor, cfg.lr0 * cfg.lr_decay ** (iteration // cfg.lr_decay_every))


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    shift_rows: float = 0.0
    shift_cols: float = 0.0
    angle_deg: float = 0.0
    scale: float = 1.0

    def is_identity(self) -> bool:
        return (self.shift_rows == 0.0 and self.shift_cols == 0.0
                and self.angle_deg == 0.0 and self.scale == 1.0)


def draw_augment(rng: np.random.Generator, cfg: TrainConfig) -> AugmentParams:
    if not cfg.augment:
        return AugmentParams()
    return AugmentParams(
        shift_rows=float(rng.uniform(-cfg.translate_px, cfg.translate_px)),
        shift_cols=float(rng.uniform(-cfg.translate_px, cfg.translate_px)),
        angle_deg=float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)),
        scale=float(rng.uniform(cfg.scale_low, cfg.scale_high)),
    )


def _inverse_affine(shape: tuple[int, int], params: AugmentParams) -> np.ndarray:
    """Output-to-input 2x3 matrix for scale -> rotate -> translate about the
    image centre."""
    theta = math.radians(params.angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    inv_s = 1.0 / params.scale
    a = np.array([[cos_t, sin_t], [-sin_t, cos_t]]) * inv_s  # R(-theta)/s
    center = np.array([(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0])
    shift = np.array([params.shift_rows, params.shift_cols])
    b = center - a @ (center + shift)
    return np.concatenate([a, b[:, None]], axis=1)


def apply_augment(images: np.ndarray, target: np.ndarray,
                  params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Warp input image channels (fill air) and all target channels (fill 0)
    by the same transform; the background channel is recomputed afterwards."""
    if params.is_identity():
        return images.copy(), target.copy()
    inv = _inverse_affine(images.shape[-2:], params)
    warped_images = np.stack(
        [kernels.warp2d_bilinear(ch, inv, AIR_HU) for ch in images], axis=0)
    fg = np.stack(
        [kernels.warp2d_bilinear(target[..., c], inv, 0.0) for c in range(1, N_CHANNELS)],
        axis=-1)
    bg = 1.0 - fg.max(axis=-1, keepdims=True)
    warped_target = np.concatenate([bg, fg], axis=-1).astype(target.dtype)
    return warped_images.astype(images.dtype), warped_target


# --------------------------------------------------------------------------
# loss


def btrfly_loss(pred: torch.Tensor, target: torch.Tensor, weights: torch.Tensor):
    """One arm's loss: per-sample Frobenius norm of (target - pred) plus the
    class-weighted cross-entropy between channelwise softmaxes, target softmax
    as the reference. Returns (total, l2 term, cross-entropy term)."""
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    l2 = torch.linalg.vector_norm((target - pred).flatten(1), dim=1).mean()
    p = torch.softmax(target, dim=1)
    logq = torch.log_softmax(pred, dim=1)
    ce = -(p * logq).sum(dim=1)
    wmap = weights[target.argmax(dim=1)]
    xent = (wmap * ce).mean()
    return l2 + xent, l2, xent


# --------------------------------------------------------------------------
# prepared data access


@lru_cache(maxsize=256)
def _load_pair(path: str) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as data:
        return data["image"], data["target"]


class PreparedDataset:
    """Random access over a prepared-corpus manifest (see reformation)."""

    def __init__(self, manifest_path: str | Path, split: str = "train"):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.manifest = json.loads(self.manifest_path.read_text())
        self.samples = [s for s in self.manifest["samples"] if s["split"] == split]
        if not self.samples:
            raise EmptyDataset(f"{manifest_path}: split {split!r} has no samples")
        self.weights = np.asarray(self.manifest["weights"], dtype=np.float64)

    def __len__(self):
        return len(self.samples)

    def load(self, index: int) -> dict:
        s = self.samples[index]
        out = {"scan_id": s["scan_id"], "aug": s["aug"]}
        for view in ("sagittal", "coronal"):
            image, target = _load_pair(str(self.root / s[view]))
            out[view] = {"image": image, "target": target}
        return out

    def scan_entries(self, split: str) -> list[dict]:
        ids = set(self.manifest["splits"].get(split, []))
        return [s for s in self.manifest["scans"] if s["id"] in ids]


def collate(batch: list[dict], dual_input: bool):
    """Pad a batch to shared dims (air / zero-foreground fill), scale HU and
    build channel-first tensors per view."""
    h = max(b[v]["image"].shape[0] for b in batch for v in ("sagittal", "coronal"))
    w = max(b[v]["image"].shape[1] for b in batch for v in ("sagittal", "coronal"))
    tensors = {}
    for view in ("sagittal", "coronal"):
        n = len(batch)
        images = np.full((n, 1, h, w), AIR_HU, dtype=np.float32)
        targets = np.zeros((n, N_CHANNELS, h, w), dtype=np.float32)
        targets[:, 0] = 1.0
        for i, b in enumerate(batch):
            img = b[view]["image"]
            tgt = b[view]["target"]
            images[i, 0, :img.shape[0], :img.shape[1]] = img
            targets[i, :, :tgt.shape[0], :tgt.shape[1]] = np.moveaxis(tgt, -1, 0)
        x = torch.from_numpy(inference.scale_intensity(images))
        if dual_input:
            x = torch.cat([x, x], dim=1)  # degenerate meanIP = MIP duplication
        tensors[view] = {"image": x, "target": torch.from_numpy(targets)}
    return tensors


# --------------------------------------------------------------------------
# training loop


def build_discriminators(cfg: TrainConfig) -> dict:
    if cfg.mode == "pe_eb":
        ebd = EBDConfig(margin_initial=cfg.margin_initial,
                        base_channels=cfg.d_base_channels)
        return {v: EnergyAutoencoder(ebd) for v in ("sagittal", "coronal")}
    if cfg.mode == "pe_w":
        wd = WDConfig(gp_lambda=cfg.gp_lambda, base_channels=cfg.d_base_channels)
        return {v: WassersteinCritic(wd) for v in ("sagittal", "coronal")}
    return {}


def _check_finite(value: float, iteration: int):
    if not math.isfinite(value):
        raise DivergenceError(iteration)


def train(manifest_path: str | Path, out_dir: str | Path, cfg: TrainConfig,
          model_cfg: ButterflyConfig | None = None) -> dict:
    """Run the full loop; writes log.csv, checkpoints and run_record.json.

    Returns a summary dict with paths and the last logged losses.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = model_cfg or ButterflyConfig()

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    data = PreparedDataset(manifest_path, split="train")
    val_scans = _load_val_scans(data)
    weights = torch.from_numpy(
        np.concatenate([[1.0], data.weights]).astype(np.float32))

    model = build_model(model_cfg)
    model.train()
    g_optim = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    discriminators = build_discriminators(cfg)
    d_optim = None
    if discriminators:
        d_params = [p for d in discriminators.values() for p in d.parameters()]
        d_optim = torch.optim.Adam(d_params, lr=cfg.lr0)
        for d in discriminators.values():
            d.train()

    log_rows = []
    started = time.time()
    for it in range(cfg.total_iters):
        lr = lr_at(it, cfg)
        for group in g_optim.param_groups:
            group["lr"] = lr
        if d_optim is not None:
            for group in d_optim.param_groups:
                group["lr"] = lr

        idx = rng.integers(0, len(data), cfg.batch_size)
        batch = []
        for i in idx:
            sample = data.load(int(i))
            for view in ("sagittal", "coronal"):
                params = draw_augment(rng, cfg)
                img, tgt = apply_augment(sample[view]["image"][None].astype(np.float64),
                                         sample[view]["target"].astype(np.float64), params)
                sample[view] = {"image": img[0].astype(np.float32),
                                "target": tgt.astype(np.float32)}
            batch.append(sample)
        tensors = collate(batch, model_cfg.dual_input)

        preds = model(tensors["sagittal"]["image"], tensors["coronal"]["image"])
        supervised = 0.0
        l2_sum = xent_sum = 0.0
        for pred, view in zip(preds, ("sagittal", "coronal")):
            total, l2, xent = btrfly_loss(pred, tensors[view]["target"], weights)
            supervised = supervised + total
            l2_sum += float(l2.detach())
            xent_sum += float(xent.detach())

        adv_d_val = adv_g_val = 0.0
        if cfg.mode == "plain":
            g_loss = supervised
        else:
            fakes = {v: heatmap_to_adversary_input(p)
                     for v, p in zip(("sagittal", "coronal"), preds)}
            reals = {v: heatmap_to_adversary_input(tensors[v]["target"], clamp=True)
                     for v in ("sagittal", "coronal")}
            for _ in range(cfg.d_updates_per_g):
                d_loss = _discriminator_loss(cfg, it, discriminators, reals,
                                             {v: f.detach() for v, f in fakes.items()})
                d_optim.zero_grad()
                d_loss.backward()
                d_optim.step()
                adv_d_val = float(d_loss.detach())
            adv_g = _generator_adv_term(cfg, discriminators, fakes)
            adv_g_val = float(adv_g.detach())
            g_loss = supervised + adv_g

        g_optim.zero_grad()
        if d_optim is not None:
            d_optim.zero_grad()
        g_loss.backward()
        g_optim.step()

        _check_finite(float(g_loss.detach()), it)
        _check_finite(adv_d_val, it)

        val_id = ""
        if val_scans and ((it + 1) % cfg.val_every == 0 or it + 1 == cfg.total_iters):
            val_id = f"{_validation_id_rate(model, val_scans):.3f}"
        log_rows.append({"iter": it, "lr": lr, "l2": l2_sum, "xent": xent_sum,
                         "adv_g": adv_g_val, "adv_d": adv_d_val, "val_id_rate": val_id})

        if (it + 1) % cfg.checkpoint_every == 0 and it + 1 < cfg.total_iters:
            _save_train_state(out_dir / "train_state.pt", model, model_cfg,
                              discriminators, cfg, it)

    model_path = out_dir / "model.pt"
    save_checkpoint(model, model_cfg, model_path)  # inference bundle: generator only
    _save_train_state(out_dir / "train_state.pt", model, model_cfg, discriminators,
                      cfg, cfg.total_iters - 1)
    log_path = out_dir / "log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS))
        writer.writeheader()
        writer.writerows(log_rows)
    record = {
        "train_config": asdict(cfg),
        "model_config": asdict(model_cfg),
        "manifest": str(manifest_path),
        "seed": cfg.seed,
        "elapsed_s": time.time() - started,
        "checkpoint_sha256": file_sha256(model_path),
    }
    (out_dir / "run_record.json").write_text(json.dumps(record, indent=2))
    return {"model": str(model_path), "log": str(log_path),
            "train_state": str(out_dir / "train_state.pt"),
            "rows": log_rows, "record": record}


def _discriminator_loss(cfg, iteration, discriminators, reals, fakes_detached):
    total = 0.0
    if cfg.mode == "pe_eb":
        margin = margin_schedule(iteration, cfg.total_iters, cfg.margin_initial)
        for view, disc in discriminators.items():
            e_real, _ = disc.energy(reals[view])
            e_fake, _ = disc.energy(fakes_detached[view])
            total = total + e_real.mean() + torch.clamp(margin - e_fake, min=0).mean()
    else:
        for view, disc in discriminators.items():
            d_fake = disc(fakes_detached[view]).mean()
            d_real = disc(reals[view]).mean()
            gp = gradient_penalty(disc, reals[view], fakes_detached[view], cfg.gp_lambda)
            total = total + d_fake - d_real + gp
    return total


def _generator_adv_term(cfg, discriminators, fakes):
    total = 0.0
    for view, disc in discriminators.items():
        if cfg.mode == "pe_eb":
            e_fake, _ = disc.energy(fakes[view])
            total = total + e_fake.mean()
        else:
            total = total - disc(fakes[view]).mean()
    return total


def _load_val_scans(data: PreparedDataset) -> list[dict]:
    scans = []
    for entry in data.scan_entries("val"):
        volume = volume_io.load_volume(entry["volume"])
        ann = AnnotationSet.load(entry["annotations"])
        scans.append({"id": entry["id"], "volume": volume, "truth": ann})
    return scans


def _validation_id_rate(model, val_scans, resolution_mm: float = 2.0) -> float:
    preds, truths = {}, {}
    for scan in val_scans:
        result = inference.predict_scan(model, scan["volume"],
                                        resolution_mm=resolution_mm)
        preds[scan["id"]] = result.annotations
        truths[scan["id"]] = scan["truth"]
    return metrics.pooled_id_rate(preds, truths)


def _save_train_state(path, model, model_cfg, discriminators, cfg, iteration):
    torch.save({
        "schema_version": 1,
        "kind": "train_state",
        "iteration": iteration,
        "train_config": asdict(cfg),
        "model_config": asdict(model_cfg),
        "model": model.state_dict(),
        "discriminators": {v: d.state_dict() for v, d in discriminators.items()},
    }, path)
