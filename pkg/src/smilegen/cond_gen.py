"""Label-conditioned recurrent generator of landmark-embedding sequences."""
from __future__ import annotations

import torch
from torch import nn

from .errors import ValidationError
from .vae import bce_per_sample


def one_hot(label: int, n_labels: int = 2) -> torch.Tensor:
    if not 0 <= label < n_labels:
        raise ValidationError(f"label id {label} outside [0, {n_labels})")
    v = torch.zeros(n_labels)
    v[label] = 1.0
    return v


class ConditionalGenerator(nn.Module):
    """LSTM cell fed concat(previous embedding, label embedding) at every step.

    The head predicts the change from the previous embedding, so an untrained
    generator starts out holding the input pose.
    """

    def __init__(self, latent_dim: int = 100, hidden: int = 256, label_dim: int = 16, n_labels: int = 2):
        super().__init__()
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.n_labels = n_labels
        self.label_embedding = nn.Embedding(n_labels, label_dim)
        self.cell = nn.LSTMCell(latent_dim + label_dim, hidden)
        self.head = nn.Linear(hidden, latent_dim)

    def encode_label(self, labels: torch.Tensor) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.n_labels):
            raise ValidationError(f"label ids must lie in [0, {self.n_labels})")
        return self.label_embedding(labels)

    def rollout(self, h0: torch.Tensor, labels: torch.Tensor, T: int, teacher: torch.Tensor | None = None) -> torch.Tensor:
        """Generate (B, T, D). With `teacher` (B, T, D), step t reads teacher[:, t-1] instead of its own output."""
        if T < 1:
            raise ValidationError("T must be at least 1")
        if teacher is not None and teacher.shape[1] != T:
            raise ValidationError(f"teacher sequence has length {teacher.shape[1]}, expected {T}")
        lab = self.encode_label(labels)
        state = None
        prev = h0
        out = []
        for t in range(T):
            if teacher is not None and t > 0:
                prev = teacher[:, t - 1]
            state = self.cell(torch.cat([prev, lab], dim=1), state)
            h = prev + self.head(state[0])
            out.append(h)
            prev = h
        return torch.stack(out, dim=1)


def sequence_bce_loss(generated: torch.Tensor, target_images: torch.Tensor, decoder) -> torch.Tensor:
    """Decode (B, T, D) embeddings and sum the per-frame negated BCE over time, averaged over the batch."""
    if generated.shape[:2] != target_images.shape[:2]:
        raise ValidationError(
            f"generated length {tuple(generated.shape[:2])} does not match targets {tuple(target_images.shape[:2])}"
        )
    B, T = generated.shape[:2]
    decoded = decoder(generated.reshape(B * T, -1))
    return bce_from_decoded(decoded.reshape(target_images.shape), target_images)


def bce_from_decoded(decoded: torch.Tensor, target_images: torch.Tensor) -> torch.Tensor:
    B, T = target_images.shape[:2]
    per_frame = bce_per_sample(decoded.reshape(B * T, *target_images.shape[2:]), target_images.reshape(B * T, *target_images.shape[2:]))
    return per_frame.reshape(B, T).sum(1).mean()
