"""Convolutional Gaussian VAE: encoder, decoder and ELBO pieces.

Image tensors are channel-last ``(B, H, W, C)`` at every public boundary;
the networks permute to channel-first internally.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_VAR_BOUNDS = (-10.0, 10.0)


@dataclass(frozen=True)
class ModelDims:
    """Shapes shared by every network in the model.

    ``conv_channels`` sets one stride-2 block per entry, so ``H`` and ``W``
    must be powers of two no smaller than ``2 ** len(conv_channels)``.
    """

    data_shape: tuple[int, int, int] = (32, 32, 1)
    latent_dim: int = 4
    metric_dim: int = 16
    conv_channels: tuple[int, ...] = (32, 32, 64, 64)
    hidden_dim: int = 128

    def __post_init__(self):
        h, w, c = (int(v) for v in self.data_shape)
        object.__setattr__(self, "data_shape", (h, w, c))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.metric_dim < 2:
            raise ValueError(f"metric_dim must be >= 2, got {self.metric_dim}")
        if not self.conv_channels:
            raise ValueError("conv_channels must not be empty")
        min_side = 2 ** len(self.conv_channels)
        for side in (h, w):
            if side < min_side or side & (side - 1):
                raise ValueError(
                    f"image sides must be powers of two >= {min_side} for "
                    f"{len(self.conv_channels)} conv blocks, got {h}x{w}"
                )

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, h, w) after the convolutional stack."""
        n = len(self.conv_channels)
        h, w, _ = self.data_shape
        return self.conv_channels[-1], h >> n, w >> n


def conv_stack(in_channels: int, channels) -> nn.Sequential:
    layers = []
    for out in channels:
        layers += [nn.Conv2d(in_channels, out, 4, stride=2, padding=1), nn.ReLU()]
        in_channels = out
    return nn.Sequential(*layers)


def _check_images(x: torch.Tensor, data_shape, what="x") -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(data_shape):
        raise ValueError(
            f"{what} must have shape (B, {', '.join(map(str, data_shape))}), got {tuple(x.shape)}"
        )


class Encoder(nn.Module):
    """Inference network mapping images to Gaussian posterior parameters."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        c, h, w = dims.feature_shape
        self.features = conv_stack(dims.data_shape[2], dims.conv_channels)
        self.hidden = nn.Linear(c * h * w, dims.hidden_dim)
        self.head = nn.Linear(dims.hidden_dim, 2 * dims.latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_images(x, self.dims.data_shape)
        h = self.features(x.permute(0, 3, 1, 2)).flatten(1)
        h = F.relu(self.hidden(h))
        mu, log_var = self.head(h).chunk(2, dim=1)
        return mu, log_var.clamp(*LOG_VAR_BOUNDS)


class Decoder(nn.Module):
    """Generator network mapping codes to per-pixel Bernoulli logits."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        c, h, w = dims.feature_shape
        self.hidden = nn.Linear(dims.latent_dim, dims.hidden_dim)
        self.project = nn.Linear(dims.hidden_dim, c * h * w)
        chans = list(dims.conv_channels[::-1]) + [dims.data_shape[2]]
        layers = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1))
            if i < len(chans) - 2:
                layers.append(nn.ReLU())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.dims.latent_dim:
            raise ValueError(
                f"codes must have shape (B, {self.dims.latent_dim}), got {tuple(z.shape)}"
            )
        h = F.relu(self.project(F.relu(self.hidden(z))))
        h = h.view(-1, *self.dims.feature_shape)
        return self.deconv(h).permute(0, 2, 3, 1)


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + sigma * eps with caller-supplied standard-normal ``eps``."""
    return mu + torch.exp(0.5 * log_var) * eps


def kl_per_dim(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Batch-averaged KL(q(z_j|x) || N(0, 1)) for every latent dimension."""
    kl = 0.5 * (mu.pow(2) + log_var.exp() - log_var - 1.0)
    return kl.mean(dim=0)


def bernoulli_nll(x: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-example Bernoulli negative log-likelihood, summed over pixels."""
    nll = F.binary_cross_entropy_with_logits(logits, x, reduction="none")
    return nll.flatten(1).sum(dim=1)


def elbo_loss(x: torch.Tensor, logits: torch.Tensor, mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Batch-averaged evidence lower bound (to be maximized)."""
    if x.shape != logits.shape:
        raise ValueError(f"x {tuple(x.shape)} and logits {tuple(logits.shape)} differ in shape")
    if torch.any(x < 0) or torch.any(x > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return -bernoulli_nll(x, logits).mean() - kl_per_dim(mu, log_var).sum()

