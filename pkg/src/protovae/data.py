"""Ground-truth factor datasets.

Procedural sprite grids for desk-scale experiments, plus an adapter for
factor-labelled ``.npz`` archives (dSprites layout). Every dataset is the
full Cartesian product of its factor values, addressed by a mixed-radix
index in which the last factor varies fastest.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

__all__ = [
    "FactorSpec",
    "ToyConfig",
    "GroundTruthDataset",
    "make_toy_grid",
    "load_toy_config",
    "load_archive",
    "save_archive",
    "factors_to_index",
    "index_to_factors",
    "sample_fixed_factor",
]

SHAPES = ("square", "ellipse", "triangle")
TOY_KEYS = (
    "side", "shapes", "scales", "pos_x", "pos_y", "seed",
    "channels", "smooth", "scale_range", "pos_range",
)
IMAGE_ALIASES = ("images", "imgs")
CLASS_ALIASES = ("factor_classes", "latents_classes")


def _normalized_values(cardinality: int) -> tuple[float, ...]:
    if cardinality == 1:
        return (0.5,)
    return tuple(i / (cardinality - 1) for i in range(cardinality))


@dataclass(frozen=True)
class FactorSpec:
    """One factor of variation and its ordered, normalized values."""

    name: str
    cardinality: int
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if int(self.cardinality) < 1:
            raise ValueError(
                f"factor {self.name!r}: cardinality must be >= 1, got {self.cardinality}"
            )
        if not self.values:
            object.__setattr__(self, "values", _normalized_values(int(self.cardinality)))
        values = tuple(float(v) for v in self.values)
        if len(values) != self.cardinality:
            raise ValueError(f"factor {self.name!r}: expected {self.cardinality} values")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"factor {self.name!r}: values must be strictly increasing")
        if any(v < 0.0 or v > 1.0 for v in values):
            raise ValueError(f"factor {self.name!r}: values must lie in [0, 1]")
        object.__setattr__(self, "values", values)


def _radices(specs_or_radices) -> np.ndarray:
    out = [s.cardinality if isinstance(s, FactorSpec) else int(s) for s in specs_or_radices]
    return np.asarray(out, dtype=np.int64)


def factors_to_index(factors, specs) -> np.ndarray | int:
    """Mixed-radix index of one factor vector or a ``(n, F)`` matrix of them.

    ``specs`` may be a list of :class:`FactorSpec` or plain cardinalities.
    """
    radices = _radices(specs)
    factors = np.asarray(factors, dtype=np.int64)
    single = factors.ndim == 1
    factors = np.atleast_2d(factors)
    if factors.shape[1] != len(radices):
        raise ValueError(f"expected {len(radices)} factors, got {factors.shape[1]}")
    bad = (factors < 0) | (factors >= radices)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValueError(
            f"factor {col} value {factors[row, col]} outside [0, {radices[col]})"
        )
    # strides: product of all later radices
    strides = np.concatenate([np.cumprod(radices[::-1])[::-1][1:], [1]])
    index = factors @ strides
    return int(index[0]) if single else index


def index_to_factors(index, specs) -> np.ndarray:
    """Inverse of :func:`factors_to_index`."""
    radices = _radices(specs)
    index = np.asarray(index, dtype=np.int64)
    single = index.ndim == 0
    index = np.atleast_1d(index)
    total = int(np.prod(radices))
    if (index < 0).any() or (index >= total).any():
        raise ValueError(f"index outside [0, {total})")
    out = np.empty((len(index), len(radices)), dtype=np.int64)
    rest = index.copy()
    for j in range(len(radices) - 1, -1, -1):
        out[:, j] = rest % radices[j]
        rest //= radices[j]
    return out[0] if single else out


@dataclass
class GroundTruthDataset:
    """Factor-indexed image collection.

    ``images`` holds every factor combination in index order, either as
    floats in [0, 1] or as uint8 (scaled on access by ``pixel_scale``).
    """

    factor_specs: list[FactorSpec]
    images: np.ndarray = field(repr=False)
    renderer_id: str = "toy"
    seed: int = 0
    pixel_scale: float = 1.0

    def __post_init__(self):
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W[, C]), got {self.images.shape}")
        if len(self.images) != len(self):
            raise ValueError(
                f"{len(self.images)} images for {len(self)} factor combinations"
            )
        self._lookup: dict[bytes, int] | None = None

    def __len__(self) -> int:
        return int(np.prod(self.cardinalities))

    @property
    def cardinalities(self) -> list[int]:
        return [s.cardinality for s in self.factor_specs]

    @property
    def factor_names(self) -> list[str]:
        return [s.name for s in self.factor_specs]

    @property
    def n_factors(self) -> int:
        return len(self.factor_specs)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def informative_factors(self) -> list[int]:
        return [i for i, c in enumerate(self.cardinalities) if c > 1]

    def factors_to_index(self, factors):
        return factors_to_index(factors, self.factor_specs)

    def index_to_factors(self, index):
        return index_to_factors(index, self.factor_specs)

    def get_images(self, index) -> np.ndarray:
        """Images at the given indices as float32 in [0, 1]."""
        imgs = self.images[np.asarray(index)]
        if imgs.dtype == np.float32 and self.pixel_scale == 1.0:
            return imgs
        return (imgs.astype(np.float32) * np.float32(self.pixel_scale))

    def sample_factors(self, n: int, rng=None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        cols = [rng.integers(0, c, size=n) for c in self.cardinalities]
        return np.stack(cols, axis=1).astype(np.int64)

    def sample(self, n: int, rng=None) -> tuple[np.ndarray, np.ndarray]:
        """``n`` uniformly drawn images and their factor classes."""
        factors = self.sample_factors(n, rng)
        return self.get_images(self.factors_to_index(factors)), factors

    def sample_fixed_factor(self, factor_id, value, n, rng=None, return_factors=False):
        return sample_fixed_factor(self, factor_id, value, n, rng, return_factors)

    def lookup_factors(self, images) -> np.ndarray:
        """Recover factor classes of exact dataset images by content hash."""
        if self._lookup is None:
            self._lookup = {}
            for i in range(len(self)):
                key = hashlib.blake2b(self.get_images(i).tobytes(), digest_size=16).digest()
                self._lookup.setdefault(key, i)
        idx = []
        for img in np.asarray(images, dtype=np.float32):
            key = hashlib.blake2b(img.tobytes(), digest_size=16).digest()
            if key not in self._lookup:
                raise KeyError("image is not a member of this dataset")
            idx.append(self._lookup[key])
        return self.index_to_factors(np.asarray(idx))


def sample_fixed_factor(dataset, factor_id, value, n, rng=None, return_factors=False):
    """``n`` images with factor ``factor_id`` pinned to ``value``.

    All other factors are drawn i.i.d. uniformly.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if not 0 <= factor_id < dataset.n_factors:
        raise ValueError(f"factor_id {factor_id} outside [0, {dataset.n_factors})")
    if not 0 <= value < dataset.cardinalities[factor_id]:
        raise ValueError(
            f"value {value} outside [0, {dataset.cardinalities[factor_id]}) "
            f"for factor {dataset.factor_names[factor_id]!r}"
        )
    factors = dataset.sample_factors(n, rng)
    factors[:, factor_id] = value
    images = dataset.get_images(dataset.factors_to_index(factors))
    if return_factors:
        return images, factors
    return images


# ---------------------------------------------------------------- toy grid


@dataclass(frozen=True)
class ToyConfig:
    """Procedural sprite dataset settings.

    ``scale_range`` is the sprite size range and ``pos_range`` the range of
    sprite centres, both as fractions of the canvas side.
    """

    side: int = 32
    shapes: int = 1
    scales: int = 1
    pos_x: int = 16
    pos_y: int = 16
    seed: int = 0
    channels: int = 1
    smooth: bool = False
    scale_range: tuple[float, float] = (0.2, 0.4)
    pos_range: tuple[float, float] = (0.2, 0.8)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        unknown = set(d) - set(TOY_KEYS)
        if unknown:
            raise ValueError(
                f"unknown toy dataset keys {sorted(unknown)}; valid keys: {list(TOY_KEYS)}"
            )
        d = dict(d)
        for k in ("scale_range", "pos_range"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def load_toy_config(path) -> ToyConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return ToyConfig.from_dict(raw)


def _sprite_mask(shape: str, cx: float, cy: float, size: float, px, py) -> np.ndarray:
    h = size / 2.0
    dx, dy = px - cx, py - cy
    if shape == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "ellipse":
        return (dx / h) ** 2 + (dy / (0.6 * h)) ** 2 <= 1.0
    # upward triangle: apex at top, base at bottom
    t = (dy + h) / (2.0 * h)
    return (t >= 0.0) & (t <= 1.0) & (np.abs(dx) <= h * t)


def _render(cfg: ToyConfig, shape: str, scale: float, x: float, y: float) -> np.ndarray:
    side = cfg.side
    size = side * (cfg.scale_range[0] + scale * (cfg.scale_range[1] - cfg.scale_range[0]))
    lo, hi = cfg.pos_range
    cx = side * (lo + x * (hi - lo))
    cy = side * (lo + y * (hi - lo))
    sub = 4 if cfg.smooth else 1
    coords = (np.arange(side * sub) + 0.5) / sub
    py, px = np.meshgrid(coords, coords, indexing="ij")
    mask = _sprite_mask(shape, cx, cy, size, px, py).astype(np.float32)
    if sub > 1:
        mask = mask.reshape(side, sub, side, sub).mean(axis=(1, 3))
    return np.repeat(mask[..., None], cfg.channels, axis=-1)


def make_toy_grid(config: ToyConfig | dict | None = None, **overrides) -> GroundTruthDataset:
    """Render every factor combination of a sprite grid.

    Factors with cardinality given in ``config`` appear in the order shape,
    scale, pos_x, pos_y. All four are always present; a cardinality of 1
    pins that factor (sprite centred / mid-scale / square).
    """
    if config is None:
        config = ToyConfig()
    elif isinstance(config, dict):
        config = ToyConfig.from_dict(config)
    if overrides:
        config = ToyConfig.from_dict({**config.to_dict(), **overrides})
    cards = {"shape": config.shapes, "scale": config.scales,
             "pos_x": config.pos_x, "pos_y": config.pos_y}
    for name, c in cards.items():
        if int(c) < 1:
            raise ValueError(f"factor {name!r}: cardinality must be >= 1, got {c}")
    if config.shapes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} shapes are available, got {config.shapes}")
    if config.channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    _check_extent(config)

    specs = [FactorSpec(n, int(c)) for n, c in cards.items()]
    radices = [s.cardinality for s in specs]
    n = int(np.prod(radices))
    images = np.empty((n, config.side, config.side, config.channels), dtype=np.float32)
    for i, f in enumerate(index_to_factors(np.arange(n), radices)):
        images[i] = _render(
            config,
            SHAPES[f[0]],
            specs[1].values[f[1]],
            specs[2].values[f[2]],
            specs[3].values[f[3]],
        )
    renderer = "toy-smooth" if config.smooth else "toy-binary"
    return GroundTruthDataset(specs, images, renderer_id=renderer, seed=config.seed)


def _check_extent(cfg: ToyConfig) -> None:
    side = cfg.side
    lo_s, hi_s = cfg.scale_range
    lo_p, hi_p = cfg.pos_range
    if not 0 < lo_s <= hi_s:
        raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {cfg.scale_range}")
    if not 0 <= lo_p <= hi_p <= 1:
        raise ValueError(f"pos_range must lie in [0, 1], got {cfg.pos_range}")
    half = side * hi_s / 2.0
    centres = [
        side * (lo_p + v * (hi_p - lo_p))
        for c in (cfg.pos_x, cfg.pos_y)
        for v in _normalized_values(int(c))
    ]
    if min(centres) - half < -1e-9 or max(centres) + half > side + 1e-9:
        raise ValueError(
            f"sprite of size {2 * half:.2f}px centred in "
            f"[{min(centres):.2f}, {max(centres):.2f}] exceeds the {side}px canvas; "
            "shrink scale_range or pos_range"
        )


# ----------------------------------------------------------------- archives


def _pick(archive, aliases: Sequence[str], what: str):
    for name in aliases:
        if name in archive:
            return archive[name]
    raise KeyError(
        f"archive has no {what} array (tried {list(aliases)}); "
        f"available arrays: {sorted(archive.keys())}"
    )


def load_archive(path, images_key: str | None = None, classes_key: str | None = None) -> GroundTruthDataset:
    """Wrap a ``.npz`` archive of images and integer factor classes.

    Rows are reordered into mixed-radix index order so the adapter behaves
    exactly like a procedural dataset.
    """
    with np.load(Path(path), allow_pickle=False) as archive:
        images = archive[images_key] if images_key else _pick(archive, IMAGE_ALIASES, "image")
        classes = archive[classes_key] if classes_key else _pick(archive, CLASS_ALIASES, "factor-class")
        images = np.asarray(images)
        classes = np.asarray(classes).astype(np.int64)
    if classes.ndim != 2:
        raise ValueError(f"factor classes must be (N, F), got {classes.shape}")
    if len(images) != len(classes):
        raise ValueError(
            f"row-count mismatch: {len(images)} images vs {len(classes)} factor rows"
        )
    if classes.min() < 0:
        raise ValueError("factor classes must be non-negative")

    cards = (classes.max(axis=0) + 1).tolist()
    for j, c in enumerate(cards):
        if c == 1:
            warnings.warn(f"factor {j} is constant (cardinality 1)", stacklevel=2)
    specs = [FactorSpec(f"factor_{j}", int(c)) for j, c in enumerate(cards)]
    index = factors_to_index(classes, cards)
    if len(np.unique(index)) != len(index) or len(index) != int(np.prod(cards)):
        raise ValueError("factor classes do not enumerate the full factor product exactly once")
    order = np.argsort(index, kind="stable")
    if not np.array_equal(order, np.arange(len(order))):
        images = images[order]

    scale = 1.0
    if images.dtype == np.uint8:
        # dSprites stores binary masks as uint8 {0, 1}
        scale = 1.0 if images.max() <= 1 else 1.0 / 255.0
    else:
        images = images.astype(np.float32)
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("float images must lie in [0, 1]")
    return GroundTruthDataset(specs, images, renderer_id=f"archive:{Path(path).name}", pixel_scale=scale)


def save_archive(dataset: GroundTruthDataset, path) -> None:
    """Write a dataset in the layout :func:`load_archive` reads."""
    classes = dataset.index_to_factors(np.arange(len(dataset)))
    np.savez_compressed(Path(path), images=dataset.get_images(np.arange(len(dataset))), factor_classes=classes)
