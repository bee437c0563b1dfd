"""Convolutional VAE over landmark images; its latent space hosts all sequence generation."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .errors import ShapeError

EPS = 1e-7
LOGVAR_RANGE = (-10.0, 10.0)


class LatentDistribution(NamedTuple):
    mean: torch.Tensor
    log_var: torch.Tensor


class LandmarkVAE(nn.Module):
    """Encoder: stride-2 Conv(4,2,1) stages then two Conv(4,1,0) heads; decoder mirrors it.

    With the default channels a 64x64 input is reduced 64 -> 32 -> 16 -> 8 -> 4 -> 1.
    Smaller `channels` tuples give toy networks for gradient checks.
    """

    def __init__(self, latent_dim: int = 100, channels=(64, 128, 256, 512), in_channels: int = 1):
        super().__init__()
        self.latent_dim = latent_dim
        self.channels = tuple(channels)
        self.in_channels = in_channels
        self.side = 4 * 2 ** len(self.channels)

        stages, c = [], in_channels
        for i, out in enumerate(self.channels):
            layers = [nn.Conv2d(c, out, 4, 2, 1)]
            if i > 0:
                layers.append(nn.BatchNorm2d(out))
            layers.append(nn.LeakyReLU(0.2))
            stages.append(nn.Sequential(*layers))
            c = out
        self.encoder = nn.ModuleList(stages)
        self.mean_head = nn.Conv2d(c, latent_dim, 4, 1, 0)
        self.logvar_head = nn.Conv2d(c, latent_dim, 4, 1, 0)

        rev = self.channels[::-1]
        dec = [nn.Sequential(nn.ConvTranspose2d(latent_dim, rev[0], 4, 1, 0), nn.BatchNorm2d(rev[0]), nn.LeakyReLU(0.2))]
        for a, b in zip(rev[:-1], rev[1:]):
            dec.append(nn.Sequential(nn.ConvTranspose2d(a, b, 4, 2, 1), nn.BatchNorm2d(b), nn.LeakyReLU(0.2)))
        dec.append(nn.Sequential(nn.ConvTranspose2d(rev[-1], in_channels, 4, 2, 1), nn.Sigmoid()))
        self.decoder = nn.ModuleList(dec)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.side, self.side):
            raise ShapeError(f"expected input (B, {self.in_channels}, {self.side}, {self.side}), got {tuple(x.shape)}")

    def encoder_activations(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Input followed by every encoder stage output and the (mean) head output."""
        self._check_input(x)
        acts = [x]
        for stage in self.encoder:
            acts.append(stage(acts[-1]))
        acts.append(self.mean_head(acts[-1]))
        return acts

    def encode(self, x: torch.Tensor) -> LatentDistribution:
        self._check_input(x)
        for stage in self.encoder:
            x = stage(x)
        mean = self.mean_head(x).flatten(1)
        log_var = self.logvar_head(x).flatten(1).clamp(*LOGVAR_RANGE)
        return LatentDistribution(mean, log_var)

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        x = h.reshape(-1, self.latent_dim, 1, 1)
        for stage in self.decoder:
            x = stage(x)
        return x

    def forward(self, x: torch.Tensor, noise: torch.Tensor):
        dist = self.encode(x)
        return self.decode(sample_latent(dist, noise)), dist


def sample_latent(dist: LatentDistribution, noise: torch.Tensor) -> torch.Tensor:
    return dist.mean + torch.exp(0.5 * dist.log_var) * noise


def bce_per_sample(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negated binary cross-entropy summed over all non-batch dimensions."""
    if recon.shape != target.shape:
        raise ShapeError(f"recon {tuple(recon.shape)} and target {tuple(target.shape)} differ")
    x = recon.clamp(EPS, 1.0 - EPS)
    ll = target * torch.log(x) + (1.0 - target) * torch.log1p(-x)
    return -ll.flatten(1).sum(1)


def kl_per_sample(dist: LatentDistribution) -> torch.Tensor:
    m, lv = dist
    return -0.5 * (1.0 + lv - m.pow(2) - lv.exp()).flatten(1).sum(1)


def vae_loss(target: torch.Tensor, recon: torch.Tensor, dist: LatentDistribution, kl_weight: float = 1.0):
    """Returns (total, bce, kl), each averaged over the batch."""
    bce = bce_per_sample(recon, target).mean()
    kl = kl_per_sample(dist).mean()
    return bce + kl_weight * kl, bce, kl
