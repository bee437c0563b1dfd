"""K-way recurrent mode bank with the push-pull objective."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigurationError, ValidationError
from .vae import EPS


class ModeOutputs(NamedTuple):
    sequences: torch.Tensor          # (B, K, T, D)
    mode_wise_average: torch.Tensor  # (B, T, D)
    temporal_averages: torch.Tensor  # (B, K, D)


class ModeBank(nn.Module):
    """K independent LSTM generators reading the conditional sequence step by step.

    Each generator outputs a residual on top of its input embedding. Generators
    are initialized from seeds ``seed + k`` so they start out different.
    """

    def __init__(self, K: int = 3, latent_dim: int = 100, hidden: int = 256, seed: int = 0):
        super().__init__()
        if K < 1:
            raise ConfigurationError("mode bank needs at least one generator")
        self.K = K
        cells, heads = [], []
        for k in range(K):
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed + k)
                cells.append(nn.LSTMCell(latent_dim, hidden))
                heads.append(nn.Linear(hidden, latent_dim))
        self.cells = nn.ModuleList(cells)
        self.heads = nn.ModuleList(heads)

    def forward(self, cond: torch.Tensor) -> ModeOutputs:
        B, T, _ = cond.shape
        seqs = []
        for cell, head in zip(self.cells, self.heads):
            state = None
            out = []
            for t in range(T):
                state = cell(cond[:, t], state)
                out.append(cond[:, t] + head(state[0]))
            seqs.append(torch.stack(out, dim=1))
        return summarize(torch.stack(seqs, dim=1))


def summarize(sequences: torch.Tensor) -> ModeOutputs:
    return ModeOutputs(sequences, sequences.mean(dim=1), sequences.mean(dim=2))


class ModeDiscriminator(nn.Module):
    """One fully connected layer; soft-max over the K generators."""

    def __init__(self, K: int = 3, latent_dim: int = 100):
        super().__init__()
        self.K = K
        self.fc = nn.Linear(latent_dim, K)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.fc(h), dim=-1)


def classify_mode(h: torch.Tensor, disc: ModeDiscriminator) -> torch.Tensor:
    return disc(h)


def pull_loss(cond: torch.Tensor, mode_wise_average: torch.Tensor) -> torch.Tensor:
    """Squared distance between conditional and mode-averaged embeddings, summed over time, averaged over batch."""
    if cond.shape != mode_wise_average.shape:
        raise ValidationError(f"shape mismatch {tuple(cond.shape)} vs {tuple(mode_wise_average.shape)}")
    return (cond - mode_wise_average).pow(2).sum(-1).sum(-1).mean()


def push_loss_from_probs(probs: torch.Tensor) -> torch.Tensor:
    """probs: (B, K, K), row k holding the discriminator output for generator k."""
    correct = torch.diagonal(probs, dim1=-2, dim2=-1).clamp(EPS, 1.0)
    return -torch.log(correct).sum(-1).mean()


def push_loss(temporal_averages: torch.Tensor, disc: ModeDiscriminator) -> torch.Tensor:
    if temporal_averages.shape[1] != disc.K:
        raise ConfigurationError(f"{temporal_averages.shape[1]} generators but discriminator has {disc.K} outputs")
    return push_loss_from_probs(disc(temporal_averages))


def multimode_objective(bce_k, pull, push, lambda_pull: float = 1.0, lambda_push: float = 0.1):
    return sum(bce_k) + lambda_pull * pull + lambda_push * push
