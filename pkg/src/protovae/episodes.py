"""Self-supervised episodes built from single-dimension latent interventions.

An intervention on dimension ``k`` replaces ``z[i, k]`` with a donor
example's value ``z[donor[i], k]`` and leaves every other coordinate
untouched. Decoding the original and intervened codes gives an image pair
whose label is ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class InterventionPlan:
    """Random choices behind one episode, fixed up front for determinism."""

    donor_permutation: torch.Tensor
    query_dims: torch.Tensor
    query_donor_permutation: torch.Tensor

    @property
    def batch_size(self) -> int:
        return len(self.donor_permutation)


@dataclass(frozen=True)
class InterventionPair:
    x_hat: torch.Tensor
    x_hat_k: torch.Tensor
    k: int
    delta: torch.Tensor


def derangement(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Cyclic shift of a random shuffle: a permutation with no fixed points."""
    if n < 2:
        raise ValueError(f"need at least 2 examples to pick donors, got {n}")
    order = torch.randperm(n, generator=generator)
    donor = torch.empty(n, dtype=torch.long)
    donor[order] = order.roll(-1)
    return donor


def make_plan(batch_size: int, latent_dim: int, generator: torch.Generator | None = None) -> InterventionPlan:
    donor = derangement(batch_size, generator)
    dims = torch.randint(0, latent_dim, (batch_size,), generator=generator)
    query_donor = derangement(batch_size, generator)
    return InterventionPlan(donor, dims, query_donor)


def _check_donor(z: torch.Tensor, donor: torch.Tensor) -> None:
    if z.shape[0] < 2:
        raise ValueError("interventions need a batch of at least 2 codes")
    if donor.shape != (z.shape[0],):
        raise ValueError(f"donor permutation must have length {z.shape[0]}")


def intervene(z: torch.Tensor, k: int, donor: torch.Tensor) -> torch.Tensor:
    """Copy dimension ``k`` of each code from its donor row."""
    _check_donor(z, donor)
    if not 0 <= k < z.shape[1]:
        raise ValueError(f"dimension {k} outside [0, {z.shape[1]})")
    mask = torch.zeros(z.shape[1], dtype=torch.bool, device=z.device)
    mask[k] = True
    return torch.where(mask, z[donor], z)


def intervene_rows(z: torch.Tensor, dims: torch.Tensor, donor: torch.Tensor) -> torch.Tensor:
    """Like :func:`intervene` but with a separate dimension for every row."""
    _check_donor(z, donor)
    mask = F.one_hot(dims, z.shape[1]).bool()
    return torch.where(mask, z[donor], z)


def concat_pair(x_hat: torch.Tensor, x_hat_k: torch.Tensor) -> torch.Tensor:
    """Stack a pair along the channel axis, original first."""
    return torch.cat([x_hat, x_hat_k], dim=-1)


@dataclass
class Episode:
    """Support sets, queries and targets for one batch.

    Support tensors are indexed ``[k, i]``: dimension ``k`` intervened on
    example ``i``. Query ``i`` always derives from example ``i``.
    """

    z: torch.Tensor                 # (B, d)
    x_hat: torch.Tensor             # (B, H, W, C)
    support_z: torch.Tensor         # (d, B, d)
    support_x: torch.Tensor         # (d, B, H, W, C)
    query_z: torch.Tensor           # (B, d)
    query_x: torch.Tensor           # (B, H, W, C)
    labels: torch.Tensor            # (B,)
    x_hat_logits: torch.Tensor | None = None

    @property
    def latent_dim(self) -> int:
        return self.z.shape[1]

    @property
    def batch_size(self) -> int:
        return self.z.shape[0]

    @property
    def support_deltas(self) -> torch.Tensor:
        return (self.z.unsqueeze(0) - self.support_z).abs()

    @property
    def isometry_targets(self) -> torch.Tensor:
        return (self.z - self.query_z).abs()

    @property
    def support_labels(self) -> torch.Tensor:
        d, b = self.latent_dim, self.batch_size
        return torch.arange(d).unsqueeze(1).expand(d, b)

    def support_pairs(self) -> torch.Tensor:
        """(d, B, H, W, 2C) pair images for every support set."""
        return concat_pair(self.x_hat.unsqueeze(0).expand_as(self.support_x), self.support_x)

    def query_pairs(self) -> torch.Tensor:
        return concat_pair(self.x_hat, self.query_x)

    def support_pair(self, k: int, i: int) -> InterventionPair:
        return InterventionPair(self.x_hat[i], self.support_x[k, i], k, self.support_deltas[k, i])

    def query_pair(self, i: int) -> InterventionPair:
        return InterventionPair(
            self.x_hat[i], self.query_x[i], int(self.labels[i]), self.isometry_targets[i]
        )


def build_episode(z: torch.Tensor, plan: InterventionPlan, decoder) -> Episode:
    """Intervene on every dimension plus one random dimension per query.

    All ``B * (d + 2)`` codes go through ``decoder`` in a single call, so the
    reconstruction of each original is shared by its support and query pairs.
    Gradients flow back into both ``z`` and the decoder.
    """
    b, d = z.shape
    expected = getattr(getattr(decoder, "dims", None), "latent_dim", d)
    if expected != d:
        raise ValueError(f"decoder expects codes of width {expected}, got {d}")
    if plan.batch_size != b:
        raise ValueError(f"plan is for batch size {plan.batch_size}, got {b}")
    support_z = torch.stack([intervene(z, k, plan.donor_permutation) for k in range(d)])
    query_z = intervene_rows(z, plan.query_dims, plan.query_donor_permutation)
    codes = torch.cat([z, support_z.reshape(d * b, d), query_z])
    logits = decoder(codes)
    images = torch.sigmoid(logits)
    shape = images.shape[1:]
    return Episode(
        z=z,
        x_hat=images[:b],
        support_z=support_z,
        support_x=images[b : b * (d + 1)].reshape(d, b, *shape),
        query_z=query_z,
        query_x=images[b * (d + 1) :],
        labels=plan.query_dims,
        x_hat_logits=logits[:b],
    )
