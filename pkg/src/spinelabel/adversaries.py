"""Prior-encoding discriminators for the 26-channel view heatmaps.

Both adversaries consume a background-stripped heatmap treated as a 3D volume
with a single feature channel, shape (N, 1, 26, H, W): the label axis becomes
volume depth so convolutions see the spatial spread of Gaussians across
neighbouring vertebra channels.

Two families:
  * EnergyAutoencoder: fully-convolutional 3D autoencoder whose per-sample
    l2 reconstruction error is the adversarial energy. Its encoder mixes
    average pooling and dilated convolutions; the encoder+decoder composition
    covers >= 128 px in-plane.
  * WassersteinCritic: strided-convolution encoder (no pooling, no dilation)
    with 3D spatial pyramid pooling at levels {3, 4} -> a fixed 1820-length
    feature vector -> one unbounded scalar. Trained with a gradient penalty.

LeakyReLU + batch norm follow every layer except the last of each network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import N_LABELS
from .errors import ShapeError


@dataclass(frozen=True)
class EBDConfig:
    dropout_keep: float = 0.8
    margin_initial: float = 10.0
    receptive_field_px: int = 128
    base_channels: int = 16


@dataclass(frozen=True)
class WDConfig:
    spp_levels: tuple[int, ...] = (3, 4)
    final_feature_channels: int = 20
    gp_lambda: float = 10.0
    base_channels: int = 16

    @property
    def spp_length(self) -> int:
        return sum(l ** 3 for l in self.spp_levels) * self.final_feature_channels


def heatmap_to_adversary_input(stack: torch.Tensor, clamp: bool = False) -> torch.Tensor:
    """(N, 27, H, W) or (N, 26, H, W) channel-first maps -> (N, 1, 26, H, W).

    The background channel is dropped when present. ``clamp`` bounds target
    stacks to [0, 1]; generator outputs pass through unclamped.
    """
    if stack.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got {tuple(stack.shape)}")
    if stack.shape[1] == N_LABELS + 1:
        stack = stack[:, 1:]
    elif stack.shape[1] != N_LABELS:
        raise ShapeError(f"expected 26 or 27 channels, got {stack.shape[1]}")
    if clamp:
        stack = stack.clamp(0.0, 1.0)
    return stack.unsqueeze(1)


# --------------------------------------------------------------------------
# energy-based adversary


def _enc_block(cin, cout, dilation, drop_p):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=dilation, dilation=dilation),
        nn.BatchNorm3d(cout),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Dropout(drop_p),
    )


class EnergyAutoencoder(nn.Module):
    """Fully-convolutional 3D autoencoder; D(y) = ||y - rec(y)||_2 per sample."""

    # (kind, kernel, stride, dilation); conv padding keeps dims, pools halve
    _ENC_PLAN = [("conv", 3, 1, 1), ("pool", 2, 2, 1), ("conv", 3, 1, 1),
                 ("pool", 2, 2, 1), ("conv", 3, 1, 2), ("pool", 2, 2, 1),
                 ("conv", 3, 1, 2), ("conv", 3, 1, 4)]
    _DEC_PLAN = [("convt", 4, 2, 1), ("convt", 4, 2, 1), ("convt", 4, 2, 1),
                 ("conv", 3, 1, 1)]

    def __init__(self, cfg: EBDConfig = EBDConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        drop = 1.0 - cfg.dropout_keep
        widths = [c, 2 * c, 4 * c, 6 * c, 8 * c]
        enc = []
        w_in = 1
        w_iter = iter(widths)
        for kind, k, s, d in self._ENC_PLAN:
            if kind == "pool":
                enc.append(nn.AvgPool3d(k, stride=s))
            else:
                w_out = next(w_iter)
                enc.append(_enc_block(w_in, w_out, d, drop))
                w_in = w_out
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(
            nn.ConvTranspose3d(8 * c, 4 * c, 4, stride=2, padding=1),
            nn.BatchNorm3d(4 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.ConvTranspose3d(4 * c, 2 * c, 4, stride=2, padding=1),
            nn.BatchNorm3d(2 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.ConvTranspose3d(2 * c, c, 4, stride=2, padding=1),
            nn.BatchNorm3d(c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(c, 1, 3, padding=1),
        )
        rf = self.receptive_field_px()
        if rf < cfg.receptive_field_px:
            raise ValueError(f"encoder+decoder receptive field {rf} < {cfg.receptive_field_px}")

    def forward(self, x):
        if x.ndim != 5:
            raise ShapeError(f"expected (N, 1, 26, H, W), got {tuple(x.shape)}")
        dims = x.shape[2:]
        pads = []
        for dim in reversed(dims):
            target = -(-dim // 8) * 8
            pads.extend([0, target - dim])
        xp = F.pad(x, pads)
        rec = self.decoder(self.encoder(xp))
        return rec[..., :dims[0], :dims[1], :dims[2]]

    def energy(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-sample reconstruction energy and the reconstruction itself."""
        rec = self.forward(x)
        e = torch.linalg.vector_norm((x - rec).flatten(1), dim=1)
        return e, rec

    @classmethod
    def receptive_field_px(cls) -> int:
        """In-plane input extent one output voxel depends on, by interval
        propagation through the encoder+decoder composition."""
        lo = hi = 0
        for kind, k, s, d in reversed(cls._DEC_PLAN):
            p = d * (k - 1) // 2 if kind == "conv" else 1
            if kind == "convt":
                lo = math.ceil((lo - (k - 1) + p) / s)
                hi = math.floor((hi + p) / s)
            else:
                lo = lo * s - p
                hi = hi * s - p + d * (k - 1)
        for kind, k, s, d in reversed(cls._ENC_PLAN):
            p = d * (k - 1) // 2 if kind == "conv" else 0
            lo = lo * s - p
            hi = hi * s - p + d * (k - 1)
        return hi - lo + 1


def ebd_energy(model: EnergyAutoencoder, x: torch.Tensor):
    return model.energy(x)


def ebd_losses(e_real, e_fake, margin: float):
    """Hinged energy losses: (L_D, generator adversarial term)."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if not torch.is_tensor(e_real):
        e_real = torch.tensor(float(e_real), dtype=torch.float64)
    if not torch.is_tensor(e_fake):
        e_fake = torch.tensor(float(e_fake), dtype=torch.float64)
    l_d = e_real.mean() + torch.clamp(margin - e_fake, min=0).mean()
    return l_d, e_fake.mean()


def margin_schedule(iteration: int, total_iters: int, m0: float) -> float:
    """Linear decay from m0 at iteration 0 to exactly 0 at total_iters."""
    if not (0 <= iteration <= total_iters):
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return m0 * (1.0 - iteration / total_iters)


# --------------------------------------------------------------------------
# Wasserstein adversary


class SpatialPyramidPool3d(nn.Module):
    """Max pooling onto fixed grids; output length is invariant to input size."""

    def __init__(self, levels: tuple[int, ...]):
        super().__init__()
        self.levels = tuple(levels)

    def forward(self, x):
        n = x.shape[0]
        parts = [F.adaptive_max_pool3d(x, (l, l, l)).reshape(n, -1) for l in self.levels]
        return torch.cat(parts, dim=1)


class WassersteinCritic(nn.Module):
    def __init__(self, cfg: WDConfig = WDConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        feat = cfg.final_feature_channels
        self.encoder = nn.Sequential(
            nn.Conv3d(1, c, 3, stride=2, padding=1),
            nn.BatchNorm3d(c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(c, 2 * c, 3, stride=2, padding=1),
            nn.BatchNorm3d(2 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.BatchNorm3d(4 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(4 * c, feat, 3, padding=1),
            nn.BatchNorm3d(feat), nn.LeakyReLU(0.2, inplace=True),
        )
        self.spp = SpatialPyramidPool3d(cfg.spp_levels)
        self.dense = nn.Linear(cfg.spp_length, 1)

    def spp_features(self, x) -> torch.Tensor:
        if x.ndim != 5:
            raise ShapeError(f"expected (N, 1, 26, H, W), got {tuple(x.shape)}")
        if min(x.shape[2:]) < 4:
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} too small for the strided encoder")
        return self.spp(self.encoder(x))

    def forward(self, x) -> torch.Tensor:
        return self.dense(self.spp_features(x)).squeeze(-1)


def gradient_penalty(critic, y_real: torch.Tensor, y_fake: torch.Tensor,
                     gp_lambda: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """lambda * ((||grad D(y_hat)||_2 - 1)^2 averaged over the batch, with
    y_hat = eps*real + (1-eps)*fake and one eps draw per sample."""
    if y_real.shape != y_fake.shape:
        raise ShapeError(f"real {tuple(y_real.shape)} vs fake {tuple(y_fake.shape)}")
    n = y_real.shape[0]
    eps_shape = (n,) + (1,) * (y_real.ndim - 1)
    eps = torch.rand(eps_shape, generator=generator, dtype=y_real.dtype, device=y_real.device)
    y_hat = (eps * y_real + (1.0 - eps) * y_fake).detach().requires_grad_(True)
    score = critic(y_hat)
    grads, = torch.autograd.grad(score.sum(), y_hat, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return gp_lambda * ((norms - 1.0) ** 2).mean()


def wd_losses(critic, y_real: torch.Tensor, y_fake: torch.Tensor,
              gp_lambda: float, generator: torch.Generator | None = None):
    """Wasserstein losses: (L_D with gradient penalty, generator term -D(fake))."""
    d_fake = critic(y_fake)
    d_real = critic(y_real)
    gp = gradient_penalty(critic, y_real, y_fake, gp_lambda, generator)
    return d_fake.mean() - d_real.mean() + gp, -d_fake.mean()
