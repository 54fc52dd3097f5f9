"""scikit-learn estimator wrapper around the trainer."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .vae import elbo_loss


def check_images(X, data_shape=None) -> np.ndarray:
    """Validate a batch of images and return float32 ``(N, H, W, C)`` in [0, 1].

    Accepts ``(N, H, W)`` (single channel) and uint8 input (scaled by 1/255).
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W[, C]), got {X.shape}")
    if len(X) == 0:
        raise ValueError("got an empty image batch")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    else:
        X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    if data_shape is not None and tuple(X.shape[1:]) != tuple(data_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, model expects {tuple(data_shape)}")
    return X


class _ArrayData:
    def __init__(self, X):
        self.X = X

    def __len__(self):
        return len(self.X)

    @property
    def image_shape(self):
        return self.X.shape[1:]

    def get_images(self, index):
        return self.X[index]


class ProtoVAE(TransformerMixin, BaseEstimator):
    """VAE regularized by a prototypical pair network and a latent adversary.

    ``transform`` returns posterior means; ``inverse_transform`` decodes
    codes back to pixel means. Setting ``alpha = lam = kappa = 0`` gives a
    plain VAE.

    Parameters
    ----------
    latent_dim : int
        Width of the latent code.
    metric_dim : int
        Width of the prototypical embedding space.
    alpha, lam, kappa : float
        Weights of the adversarial, prototypical and isometry losses.
    steps : int
        Number of training steps.
    random_state : int
        Root seed for initialization and all sampling.
    """

    def __init__(
        self,
        latent_dim=4,
        metric_dim=16,
        alpha=1.0,
        lam=1.0,
        kappa=1.0,
        batch_size=32,
        steps=15000,
        lr=1e-4,
        disc_lr=1e-4,
        conv_channels=(32, 32, 64, 64),
        hidden_dim=128,
        distance="sqeuclidean",
        kl_weight_gradient=False,
        precision="float32",
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.metric_dim = metric_dim
        self.alpha = alpha
        self.lam = lam
        self.kappa = kappa
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.disc_lr = disc_lr
        self.conv_channels = conv_channels
        self.hidden_dim = hidden_dim
        self.distance = distance
        self.kl_weight_gradient = kl_weight_gradient
        self.precision = precision
        self.random_state = random_state

    def to_config(self, data_shape) -> TrainConfig:
        return TrainConfig.from_flat({
            "dims.data_shape": list(data_shape),
            "dims.latent_dim": self.latent_dim,
            "dims.metric_dim": self.metric_dim,
            "dims.conv_channels": list(self.conv_channels),
            "dims.hidden_dim": self.hidden_dim,
            "weights.alpha": self.alpha,
            "weights.lambda": self.lam,
            "weights.kappa": self.kappa,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "lr": self.lr,
            "disc_lr": self.disc_lr,
            "distance": self.distance,
            "kl_weight_gradient": self.kl_weight_gradient,
            "precision": self.precision,
            "seed": 0 if self.random_state is None else int(self.random_state),
        })

    def fit(self, X, y=None, log_path=None):
        """Train on images ``X`` or on a :class:`GroundTruthDataset`."""
        data = X if hasattr(X, "get_images") else _ArrayData(check_images(X))
        self.state_ = train(self.to_config(data.image_shape), data, log_path=log_path)
        self.n_features_in_ = int(np.prod(data.image_shape))
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        if hasattr(X, "get_images"):
            X = X.get_images(np.arange(len(X)))
        X = check_images(X, self.state_.config.dims.data_shape)
        return self.state_.encode_mean(X)

    @torch.no_grad()
    def inverse_transform(self, Z):
        check_is_fitted(self, "state_")
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.latent_dim:
            raise ValueError(f"codes must have shape (N, {self.latent_dim}), got {Z.shape}")
        logits = self.state_.decoder(torch.as_tensor(Z, dtype=self.state_.config.dtype))
        return torch.sigmoid(logits).numpy()

    @torch.no_grad()
    def score(self, X, y=None):
        """Mean ELBO per image at the posterior mean (higher is better)."""
        check_is_fitted(self, "state_")
        x = torch.as_tensor(check_images(X, self.state_.config.dims.data_shape),
                            dtype=self.state_.config.dtype)
        mu, log_var = self.state_.encoder(x)
        return float(elbo_loss(x, self.state_.decoder(mu), mu, log_var))

    def save(self, path):
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path) -> "ProtoVAE":
        state = load_checkpoint(path)
        cfg = state.config
        est = cls(
            latent_dim=cfg.dims.latent_dim, metric_dim=cfg.dims.metric_dim,
            alpha=cfg.weights.alpha, lam=cfg.weights.lam, kappa=cfg.weights.kappa,
            batch_size=cfg.batch_size, steps=cfg.steps, lr=cfg.lr, disc_lr=cfg.disc_lr,
            conv_channels=cfg.dims.conv_channels, hidden_dim=cfg.dims.hidden_dim,
            distance=cfg.distance, kl_weight_gradient=cfg.kl_weight_gradient,
            precision=cfg.precision, random_state=cfg.seed,
        )
        est.state_ = state
        est.n_features_in_ = int(np.prod(cfg.dims.data_shape))
        return est
