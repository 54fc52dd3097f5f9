"""Prototypical-network regularized VAE for unsupervised disentanglement."""
from .data import GroundTruthDataset, ToyConfig, make_toy_grid, load_archive
from .trainer import LossWeights, TrainConfig, TrainState, train, load_checkpoint, save_checkpoint
from .vae import ModelDims

__version__ = "0.1.0"
