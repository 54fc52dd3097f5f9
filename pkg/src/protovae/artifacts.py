"""Figure artifacts: latent traversal grids and pair-embedding exports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .episodes import concat_pair, derangement, intervene_rows
from .vae import kl_per_dim

LABEL_WIDTH = 64
PAD = 2


@dataclass(frozen=True)
class TraversalSpec:
    indices: tuple[int, ...] = (0,)
    lo: float = -2.0
    hi: float = 2.0
    steps: int = 10
    dims: tuple[int, ...] | None = None
    kl_samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"traversal range needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.steps < 2:
            raise ValueError("traversal needs at least 2 steps")


@dataclass
class Traversal:
    grid: np.ndarray            # uint8 (rows*H, cols*W, C) image tiles, no labels
    dims: list[int]
    kl: np.ndarray              # per-dim KL over the reference batch
    originals: np.ndarray
    reconstructions: np.ndarray
    rows: np.ndarray            # (len(dims), n_seeds, steps, H, W, C) decoded means


@torch.no_grad()
def _decode_mean(state, z: torch.Tensor) -> np.ndarray:
    return torch.sigmoid(state.decoder(z)).numpy().astype(np.float64)


@torch.no_grad()
def batch_kl(state, dataset, n: int = 512, seed: int = 0) -> np.ndarray:
    images, _ = dataset.sample(n, np.random.default_rng(seed))
    mu, log_var = state.encoder(torch.as_tensor(images, dtype=state.config.dtype))
    return kl_per_dim(mu, log_var).numpy().astype(np.float64)


@torch.no_grad()
def traverse(state, dataset, spec: TraversalSpec = TraversalSpec()) -> Traversal:
    """Decode sweeps of each latent over ``[lo, hi]`` with the rest at the posterior mean.

    Dimensions default to all of them, most informative (highest KL) first.
    """
    n = len(dataset)
    bad = [i for i in spec.indices if not 0 <= i < n]
    if bad:
        raise ValueError(f"seed image indices {bad} outside [0, {n})")
    d = state.config.dims.latent_dim
    kl = batch_kl(state, dataset, spec.kl_samples, spec.seed)
    dims = list(spec.dims) if spec.dims is not None else [int(j) for j in np.argsort(-kl, kind="stable")]
    if any(not 0 <= j < d for j in dims):
        raise ValueError(f"dims must lie in [0, {d})")

    x = dataset.get_images(np.asarray(spec.indices))
    mu, _ = state.encoder(torch.as_tensor(x, dtype=state.config.dtype))
    recon = _decode_mean(state, mu)
    values = torch.linspace(spec.lo, spec.hi, spec.steps, dtype=mu.dtype)
    rows = []
    for j in dims:
        z = mu.repeat_interleave(spec.steps, dim=0)
        z[:, j] = values.repeat(len(spec.indices))
        rows.append(_decode_mean(state, z).reshape(len(spec.indices), spec.steps, *x.shape[1:]))
    rows = np.stack(rows)

    tiles = [list(x), list(recon)]
    for r in rows:
        tiles.extend(list(seq) for seq in r)
    grid = _tile(tiles, max(len(spec.indices), spec.steps), x.shape[1:])
    return Traversal(grid, dims, kl, x.astype(np.float64), recon, rows)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _tile(rows, n_cols, shape) -> np.ndarray:
    h, w, c = shape
    grid = np.zeros((len(rows) * (h + PAD), n_cols * (w + PAD), c), dtype=np.uint8)
    for r, row in enumerate(rows):
        for col, img in enumerate(row):
            y, x = r * (h + PAD), col * (w + PAD)
            grid[y : y + h, x : x + w] = _to_uint8(img)
    return grid


def render_traversal(trav: Traversal, n_seeds: int) -> Image.Image:
    """Grid with a left margin naming each row and its latent's KL."""
    grid = trav.grid
    if grid.shape[2] == 1:
        grid = np.repeat(grid, 3, axis=2)
    h = trav.originals.shape[1]
    canvas = Image.new("RGB", (grid.shape[1] + LABEL_WIDTH, grid.shape[0]), (0, 0, 0))
    canvas.paste(Image.fromarray(grid, "RGB"), (LABEL_WIDTH, 0))
    draw = ImageDraw.Draw(canvas)
    labels = ["original", "recon"]
    for j in trav.dims:
        labels += [f"z{j} KL={trav.kl[j]:.2f}"] * n_seeds
    for r, text in enumerate(labels):
        draw.text((2, r * (h + PAD) + max(0, h // 2 - 5)), text, fill=(255, 255, 0))
    return canvas


def save_png(image: Image.Image, path) -> None:
    buf = io.BytesIO()
    image.save(buf, format="PNG", optimize=False)
    Path(path).write_bytes(buf.getvalue())


# --------------------------------------------------------- pair embeddings


def _pair_count(dataset) -> int:
    return len(dataset) * int(sum(c - 1 for c in dataset.cardinalities))


def ground_truth_pairs(dataset, n: int, rng=None):
    """``n`` distinct ordered image pairs that differ in exactly one factor.

    Returns (first, second, changed_factor) index arrays.
    """
    total = _pair_count(dataset)
    if n > total:
        raise ValueError(f"requested {n} pairs but only {total} distinct single-factor pairs exist")
    rng = np.random.default_rng(rng)
    ids = rng.choice(total, size=n, replace=False) if total <= 50_000_000 else _distinct(rng, total, n)
    per = int(sum(c - 1 for c in dataset.cardinalities))
    base, offset = np.divmod(ids, per)
    factors = dataset.index_to_factors(base)
    other = factors.copy()
    changed = np.empty(n, dtype=np.int64)
    bounds = np.cumsum([0] + [c - 1 for c in dataset.cardinalities])
    for i, o in enumerate(offset):
        f = int(np.searchsorted(bounds, o, side="right") - 1)
        v = int(o - bounds[f])
        other[i, f] = v if v < factors[i, f] else v + 1
        changed[i] = f
    return base, dataset.factors_to_index(other), changed


def _distinct(rng, total, n):
    seen: set[int] = set()
    while len(seen) < n:
        seen.update(int(v) for v in rng.integers(0, total, size=n - len(seen)))
    return np.fromiter(seen, dtype=np.int64)


@torch.no_grad()
def export_pair_embeddings(state, dataset, mode: str = "ground-truth-pairs", n: int = 1000, seed: int = 0):
    """Embed image pairs with the trained pair network.

    Returns ``(embeddings (n, m), factor_ids, dim_ids)``; ids not defined by
    the mode are -1.
    """
    rng = np.random.default_rng(seed)
    dtype = state.config.dtype
    if mode == "ground-truth-pairs":
        first, second, changed = ground_truth_pairs(dataset, n, rng)
        a = torch.as_tensor(dataset.get_images(first), dtype=dtype)
        b = torch.as_tensor(dataset.get_images(second), dtype=dtype)
        factor_ids, dim_ids = changed, np.full(n, -1)
    elif mode == "synthetic-interventions":
        d = state.config.dims.latent_dim
        if n > len(dataset) * d:
            raise ValueError(f"requested {n} pairs but at most {len(dataset) * d} are available")
        if n < 2:
            raise ValueError("synthetic interventions need n >= 2")
        idx = rng.choice(len(dataset), size=n, replace=n > len(dataset))
        mu, _ = state.encoder(torch.as_tensor(dataset.get_images(idx), dtype=dtype))
        g = torch.Generator().manual_seed(seed)
        dims = torch.randint(0, d, (n,), generator=g)
        z_hat = intervene_rows(mu, dims, derangement(n, g))
        a = torch.sigmoid(state.decoder(mu))
        b = torch.sigmoid(state.decoder(z_hat))
        factor_ids, dim_ids = np.full(n, -1), dims.numpy()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    emb = torch.cat([state.protonet.embed_pair(p) for p in concat_pair(a, b).split(512)])
    return emb.numpy().astype(np.float64), np.asarray(factor_ids), np.asarray(dim_ids)


def write_embeddings_csv(path, embeddings, factor_ids, dim_ids) -> None:
    m = embeddings.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"e{j}" for j in range(m)] + ["factor", "dim"])
        for row, f, k in zip(embeddings, factor_ids, dim_ids):
            writer.writerow([f"{v:.9g}" for v in row] + [int(f), int(k)])


def read_embeddings_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    m = len(header) - 2
    return body[:, :m], body[:, m].astype(int), body[:, m + 1].astype(int)


def nearest_prototype_accuracy(embeddings, labels, fit_fraction: float = 0.5, seed: int = 0) -> float:
    """Class means from one split, nearest-mean accuracy on the other."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = int(len(labels) * fit_fraction)
    fit, test = order[:cut], order[cut:]
    classes = np.unique(labels[fit])
    protos = np.stack([embeddings[fit][labels[fit] == c].mean(axis=0) for c in classes])
    dist = ((embeddings[test, None, :] - protos[None]) ** 2).sum(-1)
    return float(np.mean(classes[dist.argmin(axis=1)] == labels[test]))
