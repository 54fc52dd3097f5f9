"""Prototypical pair network and its uniqueness/consistency/isometry losses."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vae import ModelDims, conv_stack, _check_images

DISTANCES = ("sqeuclidean", "euclidean")


class ProtoNet(nn.Module):
    """Shared convolutional trunk with an embedding head and an isometry head.

    Input is a channel-concatenated image pair ``(P, H, W, 2C)``.
    """

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        h, w, c = dims.data_shape
        self.pair_shape = (h, w, 2 * c)
        fc, fh, fw = dims.feature_shape
        self.trunk = conv_stack(2 * c, dims.conv_channels)
        self.embed_head = nn.Linear(fc * fh * fw, dims.metric_dim)
        self.iso_head = nn.Linear(fc * fh * fw, dims.latent_dim)

    def features(self, pairs: torch.Tensor) -> torch.Tensor:
        _check_images(pairs, self.pair_shape, "pairs")
        return self.trunk(pairs.permute(0, 3, 1, 2)).flatten(1)

    def forward(self, pairs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(pairs)
        return self.embed_head(h), self.iso_head(h)

    def embed_pair(self, pairs: torch.Tensor) -> torch.Tensor:
        return self.embed_head(self.features(pairs))

    def isometry_predict(self, pairs: torch.Tensor) -> torch.Tensor:
        return self.iso_head(self.features(pairs))

    def trunk_parameters(self):
        return self.trunk.parameters()


def pairwise_distance(a: torch.Tensor, b: torch.Tensor, distance: str = "sqeuclidean") -> torch.Tensor:
    """Distances between the last-but-one axes of ``a`` (.., n, m) and ``b`` (.., k, m)."""
    sq = (a.unsqueeze(-2) - b.unsqueeze(-3)).pow(2).sum(-1)
    if distance == "sqeuclidean":
        return sq
    if distance == "euclidean":
        return sq.clamp_min(1e-24).sqrt()
    raise ValueError(f"unknown distance {distance!r}; choose from {DISTANCES}")


def compute_prototypes(support_embeddings: torch.Tensor) -> torch.Tensor:
    """Mean embedding of each support set: (d, B, m) -> (d, m)."""
    if support_embeddings.dim() != 3:
        raise ValueError("support embeddings must be (d, B, m)")
    if support_embeddings.shape[1] == 0:
        raise ValueError("every support set must be non-empty")
    return support_embeddings.mean(dim=1)


def class_log_probs(query_embs: torch.Tensor, prototypes: torch.Tensor, distance: str = "sqeuclidean") -> torch.Tensor:
    """Log-softmax over negative distances to every prototype."""
    return F.log_softmax(-pairwise_distance(query_embs, prototypes, distance), dim=-1)


def class_probs(query_embs: torch.Tensor, prototypes: torch.Tensor, distance: str = "sqeuclidean") -> torch.Tensor:
    return class_log_probs(query_embs, prototypes, distance).exp()


def _weighted_nll(log_p: torch.Tensor, labels: torch.Tensor, kl_weights: torch.Tensor) -> torch.Tensor:
    nll = -log_p.gather(1, labels.view(-1, 1)).squeeze(1)
    return (nll * kl_weights[labels]).mean()


def uniqueness_loss(query_embs, prototypes, labels, kl_weights, distance="sqeuclidean") -> torch.Tensor:
    """KL-weighted NLL of each query's intervened dimension under the prototypes."""
    return _weighted_nll(class_log_probs(query_embs, prototypes, distance), labels, kl_weights)


def consistency_loss(
    query_embs,
    support_embs,
    labels,
    kl_weights,
    distance="sqeuclidean",
    query_index=None,
    support_index=None,
) -> torch.Tensor:
    """Like :func:`uniqueness_loss` but against the query's own support pairs.

    ``support_embs`` is (d, B, m); query ``i`` is compared with
    ``support_embs[:, i]``. Optional index vectors name the source example
    of each query/support column and must agree.
    """
    d, b, _ = support_embs.shape
    if query_embs.shape[0] != b:
        raise ValueError(f"{query_embs.shape[0]} queries for {b} support columns")
    if query_index is not None or support_index is not None:
        qi = torch.arange(b) if query_index is None else torch.as_tensor(query_index)
        si = torch.arange(b) if support_index is None else torch.as_tensor(support_index)
        if not torch.equal(qi.cpu(), si.cpu()):
            raise ValueError("queries and support columns are not aligned by source example")
    own = support_embs.transpose(0, 1)  # (B, d, m)
    dist = pairwise_distance(query_embs.unsqueeze(1), own, distance).squeeze(1)
    return _weighted_nll(F.log_softmax(-dist, dim=-1), labels, kl_weights)


def proto_loss(l_u: torch.Tensor, l_c: torch.Tensor) -> torch.Tensor:
    return l_u + l_c


def isometry_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean error between predicted and actual |z - z_k|."""
    return (pred - target).pow(2).sum(dim=-1).mean()
