"""Two-view butterfly labelling network and its single-view baseline.

Both views share a common height h; the sagittal arm sees (h x w) and the
coronal arm (h x d). Each arm encodes through three stride-2 stages; in the
fused (butterfly) variant the arm features are concatenated, processed by two
fusion convolutions into the bottleneck, and split channelwise into the two
decoders. The baseline runs one independent arm per view whose fusion convs
keep the same inner width but half the bottleneck, which makes its total
parameter count match the butterfly's (only bias/BN terms differ, <0.1%).

Outputs are linear 27-channel heatmaps; the loss applies its own softmax.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .core import N_CHANNELS
from .errors import ShapeError

DOWNSAMPLE_FACTOR = 8
CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class ButterflyConfig:
    base_filters: int = 32
    bottleneck_channels: int = 1024
    arms_fused: bool = True
    dual_input: bool = False

    def __post_init__(self):
        if self.bottleneck_channels % 2:
            raise ValueError("bottleneck_channels must be even")

    @property
    def in_channels(self) -> int:
        return 2 * 32 if self.dual_input else 1

    @property
    def latent_length(self) -> int:
        return self.bottleneck_channels if self.arms_fused else self.bottleneck_channels // 2


def _conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _upconv_bn(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ArmEncoder(nn.Module):
    """Three encoding stages; returns skip features and the 8B stride-8 output."""

    def __init__(self, in_ch: int, b: int):
        super().__init__()
        self.c1a = _conv_bn(in_ch, b)
        self.c1b = _conv_bn(b, b)
        self.d1 = _conv_bn(b, 2 * b, stride=2)
        self.c2 = _conv_bn(2 * b, 2 * b)
        self.d2 = _conv_bn(2 * b, 4 * b, stride=2)
        self.c3 = _conv_bn(4 * b, 4 * b)
        self.d3 = _conv_bn(4 * b, 8 * b, stride=2)

    def forward(self, x):
        s1 = self.c1b(self.c1a(x))
        s2 = self.c2(self.d1(s1))
        s3 = self.c3(self.d2(s2))
        return s1, s2, s3, self.d3(s3)


class ArmDecoder(nn.Module):
    """Mirror of the encoder: 4x4 transposed conv then 3x3 conv per stage,
    with same-view skip concatenation; linear 27-channel head."""

    def __init__(self, in_ch: int, b: int):
        super().__init__()
        self.u3 = _upconv_bn(in_ch, 4 * b)
        self.c3 = _conv_bn(8 * b, 4 * b)
        self.u2 = _upconv_bn(4 * b, 2 * b)
        self.c2 = _conv_bn(4 * b, 2 * b)
        self.u1 = _upconv_bn(2 * b, b)
        self.c1 = _conv_bn(2 * b, b)
        self.head = nn.Conv2d(b, N_CHANNELS, 3, padding=1)

    def forward(self, x, skips):
        s1, s2, s3 = skips
        x = self.c3(torch.cat([self.u3(x), s3], dim=1))
        x = self.c2(torch.cat([self.u2(x), s2], dim=1))
        x = self.c1(torch.cat([self.u1(x), s1], dim=1))
        return self.head(x)


class DualStem(nn.Module):
    """Each of the two reformations gets its own plain 3x3/32 convolution; the
    results are concatenated. Linear on purpose: zeroing one stem removes that
    reformation's influence exactly."""

    def __init__(self):
        super().__init__()
        self.mip = nn.Conv2d(1, 32, 3, padding=1)
        self.meanip = nn.Conv2d(1, 32, 3, padding=1)

    def forward(self, x):
        return torch.cat([self.mip(x[:, :1]), self.meanip(x[:, 1:2])], dim=1)


def _check_view(x: torch.Tensor, name: str, channels: int):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{name} input must be (N, {channels}, H, W), got {tuple(x.shape)}")
    if x.shape[2] % DOWNSAMPLE_FACTOR or x.shape[3] % DOWNSAMPLE_FACTOR:
        raise ShapeError(
            f"{name} spatial dims {tuple(x.shape[2:])} not divisible by {DOWNSAMPLE_FACTOR}; pad first")


class ButterflyNet(nn.Module):
    def __init__(self, cfg: ButterflyConfig):
        super().__init__()
        if not cfg.arms_fused:
            raise ValueError("ButterflyNet requires arms_fused; use PairedArmsNet")
        self.cfg = cfg
        b, bc = cfg.base_filters, cfg.bottleneck_channels
        view_ch = 2 if cfg.dual_input else 1
        self._view_channels = view_ch
        if cfg.dual_input:
            self.stem_sag = DualStem()
            self.stem_cor = DualStem()
        enc_in = cfg.in_channels
        self.enc_sag = ArmEncoder(enc_in, b)
        self.enc_cor = ArmEncoder(enc_in, b)
        self.fuse1 = _conv_bn(16 * b, bc // 2)
        self.fuse2 = _conv_bn(bc // 2, bc)
        self.dec_sag = ArmDecoder(bc // 2, b)
        self.dec_cor = ArmDecoder(bc // 2, b)
        _init_weights(self)

    def _bottleneck(self, sag, cor):
        _check_view(sag, "sagittal", self._view_channels)
        _check_view(cor, "coronal", self._view_channels)
        if sag.shape[2] != cor.shape[2]:
            raise ShapeError(f"views disagree on height: {sag.shape[2]} vs {cor.shape[2]}")
        if sag.shape[3] != cor.shape[3]:
            raise ShapeError(
                f"fused arms need equal view widths (w == d), got {sag.shape[3]} vs {cor.shape[3]}")
        if self.cfg.dual_input:
            sag = self.stem_sag(sag)
            cor = self.stem_cor(cor)
        *skips_sag, e_sag = self.enc_sag(sag)
        *skips_cor, e_cor = self.enc_cor(cor)
        bneck = self.fuse2(self.fuse1(torch.cat([e_sag, e_cor], dim=1)))
        return bneck, skips_sag, skips_cor

    def forward(self, sag, cor):
        bneck, skips_sag, skips_cor = self._bottleneck(sag, cor)
        half = self.cfg.bottleneck_channels // 2
        return (self.dec_sag(bneck[:, :half], skips_sag),
                self.dec_cor(bneck[:, half:], skips_cor))

    def latent(self, sag, cor) -> dict[str, torch.Tensor]:
        """Channel-wise global mean pooling of the fused bottleneck."""
        bneck, _, _ = self._bottleneck(sag, cor)
        return {"fused": bneck.mean(dim=(2, 3))}


class SingleArmNet(nn.Module):
    """One view of the baseline: an arm with un-fused bottleneck at half width."""

    def __init__(self, cfg: ButterflyConfig):
        super().__init__()
        self.cfg = cfg
        b, bc = cfg.base_filters, cfg.bottleneck_channels
        if cfg.dual_input:
            self.stem = DualStem()
        self.enc = ArmEncoder(cfg.in_channels, b)
        self.fuse1 = _conv_bn(8 * b, bc // 2)
        self.fuse2 = _conv_bn(bc // 2, bc // 2)
        self.dec = ArmDecoder(bc // 2, b)
        _init_weights(self)

    def bottleneck(self, x):
        if self.cfg.dual_input:
            x = self.stem(x)
        *skips, e = self.enc(x)
        return self.fuse2(self.fuse1(e)), skips

    def forward(self, x):
        bneck, skips = self.bottleneck(x)
        return self.dec(bneck, skips)


class PairedArmsNet(nn.Module):
    """Cor.+Sag. baseline: independent per-view nets, no cross-view fusion."""

    def __init__(self, cfg: ButterflyConfig):
        super().__init__()
        if cfg.arms_fused:
            raise ValueError("PairedArmsNet is the arms_fused=False variant")
        self.cfg = cfg
        self.net_sag = SingleArmNet(cfg)
        self.net_cor = SingleArmNet(cfg)

    def forward(self, sag, cor):
        ch = 2 if self.cfg.dual_input else 1
        _check_view(sag, "sagittal", ch)
        _check_view(cor, "coronal", ch)
        if sag.shape[2] != cor.shape[2]:
            raise ShapeError(f"views disagree on height: {sag.shape[2]} vs {cor.shape[2]}")
        return self.net_sag(sag), self.net_cor(cor)

    def latent(self, sag, cor) -> dict[str, torch.Tensor]:
        return {
            "sagittal": self.net_sag.bottleneck(sag)[0].mean(dim=(2, 3)),
            "coronal": self.net_cor.bottleneck(cor)[0].mean(dim=(2, 3)),
        }


def _init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, ArmDecoder):
            # start from an all-background prediction: the l2 term then spends
            # its gradient on the vertebra peaks from the first step
            with torch.no_grad():
                m.head.bias[0] = 1.0


def build_model(cfg: ButterflyConfig) -> nn.Module:
    return ButterflyNet(cfg) if cfg.arms_fused else PairedArmsNet(cfg)


def make_dual_pair(mip: torch.Tensor, meanip: torch.Tensor) -> torch.Tensor:
    """Stack a (N,1,H,W) MIP and meanIP into the dual-input layout."""
    return torch.cat([mip, meanip], dim=1)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: nn.Module, cfg: ButterflyConfig, path: str | Path,
                    extra: dict | None = None) -> None:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "labeler",
        "config": asdict(cfg),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[nn.Module, ButterflyConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema_version')!r}")
    cfg = ButterflyConfig(**payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
