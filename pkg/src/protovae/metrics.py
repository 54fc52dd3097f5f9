"""Disentanglement metrics: FactorVAE score, MIG and DCI.

Every metric takes a ground-truth dataset and a representation function
mapping a channel-last image batch to a ``(B, d)`` array.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import mutual_info_score
from sklearn.preprocessing import StandardScaler


def _represent(rep, images, batch_size=1024) -> np.ndarray:
    out = [np.asarray(rep(images[i : i + batch_size]), dtype=np.float64)
           for i in range(0, len(images), batch_size)]
    codes = np.concatenate(out)
    if codes.ndim != 2 or len(codes) != len(images):
        raise ValueError(f"representation must return (B, d), got {codes.shape}")
    if not np.isfinite(codes).all():
        raise ValueError("representation returned non-finite values")
    return codes


def _informative(dataset) -> list[int]:
    return [i for i, c in enumerate(dataset.cardinalities) if c > 1]


# ---------------------------------------------------------------- FactorVAE


def factorvae_metric(
    dataset,
    rep,
    n_train_votes: int = 800,
    n_eval_votes: int = 400,
    batch_per_vote: int = 64,
    n_variance_samples: int = 10000,
    prune_threshold: float = 0.05,
    rng=None,
) -> float:
    """Majority-vote accuracy of predicting the fixed factor from the
    least-varying normalized latent dimension.

    Dimensions whose global std falls below ``prune_threshold`` times the
    largest std are treated as collapsed and never vote.
    """
    rng = np.random.default_rng(rng)
    factors = _informative(dataset)
    if len(factors) < 2:
        raise ValueError("FactorVAE metric needs at least 2 non-degenerate factors")
    images, _ = dataset.sample(n_variance_samples, rng)
    scale = _represent(rep, images).std(axis=0)
    if scale.max() <= 0:
        warnings.warn("all latent dimensions are collapsed; FactorVAE score is 0", stacklevel=2)
        return 0.0
    active = scale >= prune_threshold * scale.max()
    d = len(scale)

    def votes(n):
        out = np.zeros((d, dataset.n_factors), dtype=np.int64)
        for _ in range(n):
            f = factors[rng.integers(len(factors))]
            value = rng.integers(dataset.cardinalities[f])
            batch = dataset.sample_fixed_factor(f, value, batch_per_vote, rng)
            var = (_represent(rep, batch) / np.where(scale > 0, scale, 1.0)).var(axis=0, ddof=1)
            var[~active] = np.inf
            out[int(np.argmin(var)), f] += 1
        return out

    train = votes(n_train_votes)
    test = votes(n_eval_votes)
    classifier = train.argmax(axis=1)
    return float(test[np.arange(d), classifier].sum() / test.sum())


# ---------------------------------------------------------------------- MIG


def discretize(codes: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-occupancy binning of each column using sample quantiles.

    Edges are actual sample values, so the binning is unchanged by any
    strictly increasing transform of a column.
    """
    out = np.empty(codes.shape, dtype=np.int64)
    qs = np.arange(1, n_bins) / n_bins
    for j in range(codes.shape[1]):
        edges = np.quantile(codes[:, j], qs, method="lower")
        out[:, j] = np.digitize(codes[:, j], edges)
    return out


def mutual_information_matrix(discrete_codes: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """(d, F) discrete mutual information in nats."""
    d, f = discrete_codes.shape[1], factors.shape[1]
    return np.array([[mutual_info_score(factors[:, k], discrete_codes[:, j]) for k in range(f)]
                     for j in range(d)])


def mig_from_codes(codes: np.ndarray, factors: np.ndarray, n_bins: int = 20) -> float:
    keep = [k for k in range(factors.shape[1]) if len(np.unique(factors[:, k])) > 1]
    factors = factors[:, keep]
    mi = mutual_information_matrix(discretize(codes, n_bins), factors)
    entropy = np.array([mutual_info_score(factors[:, k], factors[:, k]) for k in range(len(keep))])
    top = np.sort(mi, axis=0)[::-1]
    second = top[1] if len(top) > 1 else np.zeros_like(top[0])
    return float(np.mean((top[0] - second) / entropy))


def mig(dataset, rep, n_samples: int = 10000, n_bins: int = 20, rng=None) -> float:
    """Mean normalized gap between the two most informative latents per factor."""
    if n_samples < 10 * n_bins:
        raise ValueError(f"n_samples={n_samples} is below 10 * n_bins = {10 * n_bins}")
    rng = np.random.default_rng(rng)
    images, factors = dataset.sample(n_samples, rng)
    return mig_from_codes(_represent(rep, images), factors[:, _informative(dataset)], n_bins)


# ---------------------------------------------------------------------- DCI


def _fsum(a: np.ndarray, axis: int | None = None, keepdims: bool = False):
    # exactly rounded, so D/C do not depend on latent ordering
    if axis is None:
        return math.fsum(a.ravel().tolist())
    out = np.apply_along_axis(lambda v: math.fsum(v.tolist()), axis, a)
    return np.expand_dims(out, axis) if keepdims else out


def _entropy_rows(p: np.ndarray, base: int) -> np.ndarray:
    if base <= 1:
        return np.zeros(len(p))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -_fsum(terms, axis=1) / np.log(base)


def dci_from_importance(importance: np.ndarray) -> tuple[float, float]:
    """Disentanglement and completeness from a (d, F) importance matrix."""
    r = np.abs(np.asarray(importance, dtype=np.float64))
    d, f = r.shape
    if r.sum() == 0:
        r = np.ones_like(r)
    total = _fsum(r)
    row = _fsum(r, axis=1, keepdims=True)
    p_rows = np.where(row > 0, r / np.where(row > 0, row, 1), 1.0 / f)
    per_dim = 1.0 - _entropy_rows(p_rows, f)
    disentanglement = _fsum(per_dim * row[:, 0] / total)
    col = _fsum(r, axis=0, keepdims=True)
    p_cols = np.where(col > 0, r / np.where(col > 0, col, 1), 1.0 / d)
    per_factor = 1.0 - _entropy_rows(p_cols.T, d)
    completeness = _fsum(per_factor * col[0] / total)
    return disentanglement, completeness


def importance_matrix(x_train, y_train, x_test, y_test, predictor="gbt", random_state=0):
    """Per-factor predictors; returns (importance (d, F), test accuracies (F,))."""
    d, f = x_train.shape[1], y_train.shape[1]
    r = np.zeros((d, f))
    acc = np.zeros(f)
    for k in range(f):
        if predictor == "gbt":
            model = GradientBoostingClassifier(n_estimators=100, max_depth=2, random_state=random_state)
            model.fit(x_train, y_train[:, k])
            r[:, k] = model.feature_importances_
            acc[k] = model.score(x_test, y_test[:, k])
        elif predictor == "logistic":
            scaler = StandardScaler().fit(x_train)
            model = LogisticRegression(max_iter=2000)
            model.fit(scaler.transform(x_train), y_train[:, k])
            r[:, k] = np.abs(model.coef_).mean(axis=0)
            acc[k] = model.score(scaler.transform(x_test), y_test[:, k])
        else:
            raise ValueError(f"unknown DCI predictor {predictor!r}")
    return r, acc


def dci(dataset, rep, n_train: int = 2000, n_test: int = 1000, rng=None, predictor: str = "gbt"):
    """(disentanglement, completeness, informativeness)."""
    rng = np.random.default_rng(rng)
    keep = _informative(dataset)
    x_tr, y_tr = dataset.sample(n_train, rng)
    x_te, y_te = dataset.sample(n_test, rng)
    seed = int(rng.integers(2**31 - 1))
    codes_tr, codes_te = _represent(rep, x_tr), _represent(rep, x_te)
    # tree tie-breaks follow feature order; fit in canonical order for exact permutation invariance
    order = _canonical_columns(codes_tr)
    r_sorted, acc = importance_matrix(
        codes_tr[:, order], y_tr[:, keep], codes_te[:, order], y_te[:, keep], predictor, seed
    )
    r = np.empty_like(r_sorted)
    r[order] = r_sorted
    d_score, c_score = dci_from_importance(r)
    return d_score, c_score, float(acc.mean())


def _canonical_columns(x: np.ndarray) -> np.ndarray:
    # content-defined column order; identical columns are interchangeable anyway
    return np.lexsort(x[::-1])


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    fvae_train_votes: int = 800
    fvae_eval_votes: int = 400
    fvae_batch: int = 64
    fvae_variance_samples: int = 10000
    fvae_prune_threshold: float = 0.05
    mig_samples: int = 10000
    mig_bins: int = 20
    dci_train: int = 2000
    dci_test: int = 1000
    dci_predictor: str = "gbt"

    @classmethod
    def from_flat(cls, flat: dict) -> "EvalConfig":
        valid = [f.name for f in fields(cls)]
        unknown = sorted(set(flat) - set(valid))
        if unknown:
            raise ValueError(f"unknown eval keys {unknown}; valid keys: {valid}")
        types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        return cls(**{k: types[k](v) for k, v in flat.items()})


@dataclass(frozen=True)
class MetricReport:
    factorvae_score: float
    mig: float
    dci_disentanglement: float
    dci_completeness: float
    dci_informativeness: float
    config: EvalConfig

    SCORES = ("factorvae_score", "mig", "dci_disentanglement",
              "dci_completeness", "dci_informativeness")

    def scores(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCORES}

    def to_text(self) -> str:
        lines = [f"{k}: {v:.6f}" for k, v in self.scores().items()]
        lines += [f"config.{k}: {v}" for k, v in asdict(self.config).items()]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_scores(text: str) -> dict[str, float]:
        out = {}
        for line in text.splitlines():
            key, _, value = line.partition(":")
            if key in MetricReport.SCORES:
                out[key] = float(value)
        return out


def evaluate_representation(dataset, rep, config: EvalConfig | None = None) -> MetricReport:
    config = config or EvalConfig()
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    fvae = factorvae_metric(
        dataset, rep, config.fvae_train_votes, config.fvae_eval_votes, config.fvae_batch,
        config.fvae_variance_samples, config.fvae_prune_threshold, np.random.default_rng(seeds[0]),
    )
    m = mig(dataset, rep, config.mig_samples, config.mig_bins, np.random.default_rng(seeds[1]))
    d, c, i = dci(dataset, rep, config.dci_train, config.dci_test,
                  np.random.default_rng(seeds[2]), config.dci_predictor)
    return MetricReport(fvae, m, d, c, i, config)


def evaluate(checkpoint, dataset, config: EvalConfig | None = None) -> MetricReport:
    """Score a checkpoint (path or loaded state) using posterior means."""
    from .trainer import TrainState, load_checkpoint

    state = checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)
    return evaluate_representation(dataset, state.encode_mean, config)
