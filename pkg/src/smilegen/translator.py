"""Landmark image + neutral face -> face frame translation (U-Net generator, patch discriminator)."""
from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError, ValidationError
from .vae import EPS


class UNetGenerator(nn.Module):
    """Encoder of Conv(4,2,1) stages with mirror-stage skip concatenation in the decoder.

    Input is concat(neutral face RGB, landmark image) = 4 channels; output RGB through tanh.
    """

    def __init__(self, channels=(64, 128, 256, 512, 512, 512), face_channels: int = 3, landmark_channels: int = 1):
        super().__init__()
        self.channels = tuple(channels)
        self.in_channels = face_channels + landmark_channels
        self.face_channels = face_channels
        self.side = 2 ** len(self.channels)
        n = len(self.channels)

        down, c = [], self.in_channels
        for i, out in enumerate(self.channels):
            layers = [nn.Conv2d(c, out, 4, 2, 1)]
            if i == n - 1:
                layers.append(nn.ReLU())
            else:
                if i > 0:
                    layers.append(nn.BatchNorm2d(out))
                layers.append(nn.LeakyReLU(0.2))
            down.append(nn.Sequential(*layers))
            c = out
        self.down = nn.ModuleList(down)

        up = []
        targets = list(self.channels[-2::-1]) + [face_channels]
        c = self.channels[-1]
        for i, out in enumerate(targets):
            if i == n - 1:
                up.append(nn.Sequential(nn.ConvTranspose2d(c, out, 4, 2, 1), nn.Tanh()))
            else:
                up.append(nn.Sequential(nn.ConvTranspose2d(c, out, 4, 2, 1), nn.BatchNorm2d(out), nn.ReLU()))
                c = out * 2
        self.up = nn.ModuleList(up)

    def forward(self, landmarks: torch.Tensor, neutral: torch.Tensor, ablate: str | None = None) -> torch.Tensor:
        """`ablate` zeroes the bottleneck ("bottleneck") or the outermost skip ("skip0"); for diagnostics."""
        x = torch.cat([neutral, landmarks], dim=1)
        if x.shape[1:] != (self.in_channels, self.side, self.side):
            raise ShapeError(f"expected generator input (B, {self.in_channels}, {self.side}, {self.side}), got {tuple(x.shape)}")
        skips = []
        for stage in self.down:
            x = stage(x)
            skips.append(x)
        if ablate == "bottleneck":
            x = torch.zeros_like(x)
        skips = skips[:-1][::-1]
        for i, stage in enumerate(self.up):
            x = stage(x)
            if i < len(skips):
                skip = skips[i]
                if ablate == "skip0" and i == len(skips) - 1:
                    skip = torch.zeros_like(skip)
                x = torch.cat([x, skip], dim=1)
        return x


class PatchDiscriminator(nn.Module):
    """Three Conv(4,2,1) and two Conv(4,1,1); one sigmoid probability per cell of the final map."""

    def __init__(self, channels=(64, 128, 256, 512), in_channels: int = 6):
        super().__init__()
        self.in_channels = in_channels
        c1, c2, c3, c4 = channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c1, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c1, c2, 4, 2, 1), nn.BatchNorm2d(c2), nn.LeakyReLU(0.2),
            nn.Conv2d(c2, c3, 4, 2, 1), nn.BatchNorm2d(c3), nn.LeakyReLU(0.2),
            nn.Conv2d(c3, c4, 4, 1, 1), nn.BatchNorm2d(c4), nn.LeakyReLU(0.2),
            nn.Conv2d(c4, 1, 4, 1, 1), nn.Sigmoid(),
        )

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        if pair.ndim != 4 or pair.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, H, W) image pair, got {tuple(pair.shape)}")
        return self.net(pair)


def make_pair(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"pair members differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.cat([a, b], dim=1)


def reconstruction_loss(z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over pixels, channels, frames and batch."""
    if z.shape != w.shape:
        raise ValidationError(f"reconstruction targets {tuple(z.shape)} and outputs {tuple(w.shape)} differ")
    return (z - w).abs().mean()


def disc_loss_from_probs(p_real: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    real = torch.log(p_real.clamp(EPS, 1.0 - EPS))
    fake = torch.log1p(-p_fake.clamp(EPS, 1.0 - EPS))
    return -(real.mean() + fake.mean())


def gen_adv_loss_from_probs(p_fake: torch.Tensor, non_saturating: bool = False) -> torch.Tensor:
    p = p_fake.clamp(EPS, 1.0 - EPS)
    if non_saturating:
        return -torch.log(p).mean()
    return torch.log1p(-p).mean()


def adversarial_losses(disc: PatchDiscriminator, real_pairs: torch.Tensor, fake_pairs: torch.Tensor,
                       non_saturating: bool = False):
    """(disc_loss, gen_adv_loss). The discriminator term sees the fakes detached from the generator."""
    disc_loss = disc_loss_from_probs(disc(real_pairs), disc(fake_pairs.detach()))
    gen_adv = gen_adv_loss_from_probs(disc(fake_pairs), non_saturating)
    return disc_loss, gen_adv
