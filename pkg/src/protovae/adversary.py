"""Latent-space discriminator between original and intervened codes.

Label convention: intervened codes are the positive class (1), encoder
codes the negative class (0).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOGIT_GUARD = 20.0


class Discriminator(nn.Module):
    def __init__(self, latent_dim: int, width: int = 256, depth: int = 4, zero_init: bool = True):
        super().__init__()
        self.latent_dim = latent_dim
        layers, fan_in = [], latent_dim
        for _ in range(depth):
            layers += [nn.Linear(fan_in, width), nn.LeakyReLU(0.2)]
            fan_in = width
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(fan_in, 1)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        """One logit per code."""
        if codes.dim() != 2 or codes.shape[1] != self.latent_dim:
            raise ValueError(
                f"codes must have shape (B, {self.latent_dim}), got {tuple(codes.shape)}"
            )
        return self.out(self.body(codes)).squeeze(1)


@dataclass(frozen=True)
class AdversaryBatchReport:
    disc_loss: float
    enc_loss: float
    mean_score_real: float
    mean_score_intervened: float


def disc_score(codes: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    """Estimated probability that each code is an intervened sample."""
    return torch.sigmoid(disc(codes))


def disc_loss(z_real: torch.Tensor, z_intervened: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    """Binary cross-entropy of the discriminator, from logits."""
    return F.softplus(-disc(z_intervened)).mean() + F.softplus(disc(z_real)).mean()


def encoder_adv_loss(z_real: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    """E[log(1 - D(z))]; minimizing it pushes D(z) towards 1.

    Logits are clipped to +-20 since the loss is unbounded below.
    """
    logits = disc(z_real).clamp(-LOGIT_GUARD, LOGIT_GUARD)
    return -F.softplus(logits).mean()


@torch.no_grad()
def batch_report(z_real, z_intervened, disc) -> AdversaryBatchReport:
    return AdversaryBatchReport(
        disc_loss=float(disc_loss(z_real, z_intervened, disc)),
        enc_loss=float(encoder_adv_loss(z_real, disc)),
        mean_score_real=float(disc_score(z_real, disc).mean()),
        mean_score_intervened=float(disc_score(z_intervened, disc).mean()),
    )
