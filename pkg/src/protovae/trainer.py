"""Training loop for the combined objective.

One step makes a main update of the encoder, decoder and pair network on

    -ELBO + alpha * L_E + lambda * (L_U + L_C) + kappa * L_I

followed by a discriminator update on detached codes. All randomness comes
from four generators seeded from one root seed (batches, eps draws,
intervention plans, discriminator dims), and all of them are checkpointed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .adversary import Discriminator, disc_loss, disc_score, encoder_adv_loss
from .episodes import build_episode, derangement, intervene_rows, make_plan
from .proto import (
    DISTANCES,
    ProtoNet,
    compute_prototypes,
    consistency_loss,
    isometry_loss,
    proto_loss,
    uniqueness_loss,
)
from .vae import Decoder, Encoder, ModelDims, elbo_loss, kl_per_dim, reparameterize

logger = logging.getLogger(__name__)

STREAMS = ("batches", "eps", "plans", "disc")
PRECISIONS = {"float32": torch.float32, "float64": torch.float64}
CKPT_MAGIC = b"PROTOVAE-CKPT-1\n"


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term goes NaN/Inf; the state is left untouched."""

    def __init__(self, step: int, report: dict):
        bad = [k for k, v in report.items() if isinstance(v, float) and not math.isfinite(v)]
        super().__init__(f"non-finite loss at step {step}: {', '.join(bad)}")
        self.step = step
        self.report = report


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    lam: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")
            object.__setattr__(self, f.name, v)


@dataclass(frozen=True)
class TrainConfig:
    dims: ModelDims = field(default_factory=ModelDims)
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 32
    steps: int = 15000
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    disc_lr: float = 1e-4
    disc_betas: tuple[float, float] = (0.5, 0.9)
    disc_width: int = 256
    disc_depth: int = 4
    seed: int = 0
    precision: str = "float32"
    kl_weight_gradient: bool = False
    distance: str = "sqeuclidean"
    isometry_pairs: str = "all"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (interventions need donors)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {list(PRECISIONS)}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {list(DISTANCES)}")
        if self.isometry_pairs not in ("all", "query"):
            raise ValueError("isometry_pairs must be 'all' or 'query'")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "disc_betas", tuple(float(b) for b in self.disc_betas))

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    # flat dotted-key view used by config files, CLI flags and checkpoints

    def to_flat(self) -> dict:
        flat = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("dims", "weights"):
                for k, v in asdict(value).items():
                    key = "lambda" if k == "lam" else k
                    flat[f"{f.name}.{key}"] = list(v) if isinstance(v, tuple) else v
            else:
                flat[f.name] = list(value) if isinstance(value, tuple) else value
        return flat

    @classmethod
    def valid_keys(cls) -> list[str]:
        return list(cls().to_flat())

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        valid = cls.valid_keys()
        unknown = sorted(set(flat) - set(valid))
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; valid keys: {valid}")
        base = cls().to_flat()
        base.update(flat)
        dims = {k[5:]: v for k, v in base.items() if k.startswith("dims.")}
        weights = {("lam" if k == "weights.lambda" else k[8:]): v
                   for k, v in base.items() if k.startswith("weights.")}
        top = {k: v for k, v in base.items() if "." not in k}
        for k in ("batch_size", "steps", "seed", "disc_width", "disc_depth"):
            top[k] = int(top[k])
        for k in ("lr", "disc_lr"):
            top[k] = float(top[k])
        top["kl_weight_gradient"] = bool(top["kl_weight_gradient"])
        dims["latent_dim"] = int(dims["latent_dim"])
        dims["metric_dim"] = int(dims["metric_dim"])
        dims["hidden_dim"] = int(dims["hidden_dim"])
        return cls(dims=ModelDims(**dims), weights=LossWeights(**weights), **top)

    def replace(self, **flat_overrides) -> "TrainConfig":
        return TrainConfig.from_flat({**self.to_flat(), **flat_overrides})


# ------------------------------------------------------------------- state


def _stream_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS) + 1)
    seeds = [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]
    return dict(zip(("init",) + STREAMS, seeds))


@dataclass
class TrainState:
    config: TrainConfig
    encoder: Encoder
    decoder: Decoder
    protonet: ProtoNet
    disc: Discriminator
    opt_main: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    generators: dict[str, torch.Generator]
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        seeds = _stream_seeds(config.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seeds["init"])
            encoder = Encoder(config.dims)
            decoder = Decoder(config.dims)
            protonet = ProtoNet(config.dims)
            disc = Discriminator(config.dims.latent_dim, config.disc_width, config.disc_depth)
        for m in (encoder, decoder, protonet, disc):
            m.to(config.dtype)
        main = [*encoder.parameters(), *decoder.parameters(), *protonet.parameters()]
        opt_main = torch.optim.Adam(main, lr=config.lr, betas=config.betas)
        opt_disc = torch.optim.Adam(disc.parameters(), lr=config.disc_lr, betas=config.disc_betas)
        gens = {}
        for name in STREAMS:
            g = torch.Generator()
            g.manual_seed(seeds[name])
            gens[name] = g
        return cls(config, encoder, decoder, protonet, disc, opt_main, opt_disc, gens)

    @property
    def modules(self) -> dict[str, torch.nn.Module]:
        return {"encoder": self.encoder, "decoder": self.decoder,
                "protonet": self.protonet, "disc": self.disc}

    def main_parameters(self) -> list[torch.nn.Parameter]:
        return [p for group in self.opt_main.param_groups for p in group["params"]]

    def snapshot(self) -> dict[str, torch.Tensor]:
        """Copies of every parameter, keyed ``module.name``."""
        return {f"{m}.{k}": v.detach().clone()
                for m, mod in self.modules.items() for k, v in mod.state_dict().items()}

    @torch.no_grad()
    def encode_mean(self, x) -> np.ndarray:
        """Posterior means for channel-last images (numpy in, numpy out)."""
        x = torch.as_tensor(np.asarray(x), dtype=self.config.dtype)
        self.encoder.eval()
        out = [self.encoder(chunk)[0] for chunk in x.split(512)]
        return torch.cat(out).numpy().astype(np.float64)


# ------------------------------------------------------------------ losses


@dataclass
class StepInputs:
    """Random draws for one step; fixing them makes the loss deterministic."""

    x: torch.Tensor
    eps: torch.Tensor
    plan: object


def draw_inputs(state: TrainState, images: torch.Tensor) -> StepInputs:
    cfg, g = state.config, state.generators
    idx = torch.randint(0, len(images), (cfg.batch_size,), generator=g["batches"])
    eps = torch.randn(cfg.batch_size, cfg.dims.latent_dim, generator=g["eps"], dtype=cfg.dtype)
    plan = make_plan(cfg.batch_size, cfg.dims.latent_dim, g["plans"])
    return StepInputs(images[idx], eps, plan)


def total_loss(state: TrainState, inputs: StepInputs, kl_weights: torch.Tensor | None = None):
    """Combined objective and its separately reported terms.

    Terms whose weight is zero are skipped and reported as 0. ``kl_weights``
    overrides the batch per-dimension KL used to scale the prototypical
    losses (handy for gradient checks with the scale held fixed).
    """
    cfg = state.config
    w = cfg.weights
    x = inputs.x
    mu, log_var = state.encoder(x)
    z = reparameterize(mu, log_var, inputs.eps)
    kl = kl_per_dim(mu, log_var)
    terms: dict[str, torch.Tensor] = {}

    episode = None
    if w.lam > 0 or w.kappa > 0:
        episode = build_episode(z, inputs.plan, state.decoder)
        logits = episode.x_hat_logits
    else:
        logits = state.decoder(z)
    l_v = elbo_loss(x, logits, mu, log_var)
    terms["neg_elbo"] = -l_v
    total = -l_v

    zero = torch.zeros((), dtype=l_v.dtype)
    terms["enc_adv"] = encoder_adv_loss(z, state.disc) if w.alpha > 0 else zero
    total = total + w.alpha * terms["enc_adv"]

    if episode is not None:
        d, b = cfg.dims.latent_dim, cfg.batch_size
        sup_pairs = episode.support_pairs().reshape(d * b, *episode.x_hat.shape[1:-1], -1)
        emb, iso = state.protonet(torch.cat([sup_pairs, episode.query_pairs()]))
        sup_emb = emb[: d * b].view(d, b, -1)
        q_emb = emb[d * b :]
        if kl_weights is None:
            kl_weights = kl if cfg.kl_weight_gradient else kl.detach()
        protos = compute_prototypes(sup_emb)
        l_u = uniqueness_loss(q_emb, protos, episode.labels, kl_weights, cfg.distance)
        l_c = consistency_loss(q_emb, sup_emb, episode.labels, kl_weights, cfg.distance)
        if cfg.isometry_pairs == "all":
            target = torch.cat([episode.support_deltas.reshape(d * b, d), episode.isometry_targets])
            l_i = isometry_loss(iso, target)
        else:
            l_i = isometry_loss(iso[d * b :], episode.isometry_targets)
        terms.update(uniq=l_u, cons=l_c, proto=proto_loss(l_u, l_c), iso=l_i)
    else:
        terms.update(uniq=zero, cons=zero, proto=zero, iso=zero)
    total = total + w.lam * terms["proto"] + w.kappa * terms["iso"]
    terms["total"] = total
    return total, terms, z, kl


def _report(terms: dict, kl: torch.Tensor) -> dict:
    out = {k: float(v.detach()) for k, v in terms.items()}
    for j, v in enumerate(kl.detach().tolist()):
        out[f"kl_{j}"] = float(v)
    return out


def train_step(state: TrainState, images: torch.Tensor) -> dict:
    """Advance ``state`` by one main update and one discriminator update."""
    cfg = state.config
    inputs = draw_inputs(state, images)
    state.encoder.train()
    total, terms, z, kl = total_loss(state, inputs)
    report = _report(terms, kl)
    report["step"] = state.step + 1

    disc_inputs = None
    if cfg.weights.alpha > 0:
        g = state.generators["disc"]
        dims = torch.randint(0, cfg.dims.latent_dim, (cfg.batch_size,), generator=g)
        donor = derangement(cfg.batch_size, g)
        z_real = z.detach()
        z_int = intervene_rows(z_real, dims, donor)
        disc_inputs = (z_real, z_int)

    if not all(math.isfinite(v) for v in report.values()):
        raise NonFiniteLossError(state.step, report)

    params = state.main_parameters()
    grads = torch.autograd.grad(total, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = g
    state.opt_main.step()
    state.opt_main.zero_grad(set_to_none=True)

    if disc_inputs is not None:
        z_real, z_int = disc_inputs
        l_d = disc_loss(z_real, z_int, state.disc)
        dparams = list(state.disc.parameters())
        for p, g in zip(dparams, torch.autograd.grad(l_d, dparams)):
            p.grad = g
        state.opt_disc.step()
        state.opt_disc.zero_grad(set_to_none=True)
        with torch.no_grad():
            report["disc"] = float(l_d)
            report["score_real"] = float(disc_score(z_real, state.disc).mean())
            report["score_intervened"] = float(disc_score(z_int, state.disc).mean())
    state.step += 1
    return report


def dataset_tensor(dataset, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(dataset.get_images(np.arange(len(dataset))), dtype=dtype)


def format_log_line(report: dict) -> str:
    parts = [f"step={report['step']}"]
    parts += [f"{k}={v:.9g}" for k, v in report.items() if k != "step"]
    return " ".join(parts)


def parse_log_line(line: str) -> dict:
    out = {}
    for item in line.split():
        k, v = item.split("=", 1)
        out[k] = int(v) if k == "step" else float(v)
    return out


def train(
    config: TrainConfig,
    dataset,
    *,
    state: TrainState | None = None,
    until: int | None = None,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    log_every: int = 1,
) -> TrainState:
    """Train from scratch (or continue ``state``) up to ``until`` steps.

    A non-finite loss stops training; the last good state is written to
    ``checkpoint_path`` before the error propagates.
    """
    if state is None:
        config = _fit_data_shape(config, dataset)
        state = TrainState.create(config)
    until = state.config.steps if until is None else until
    images = dataset_tensor(dataset, state.config.dtype)
    if tuple(images.shape[1:]) != state.config.dims.data_shape:
        raise ValueError(
            f"dataset images {tuple(images.shape[1:])} do not match model "
            f"data_shape {state.config.dims.data_shape}"
        )
    log = open(log_path, "a", buffering=1) if log_path else None
    try:
        while state.step < until:
            try:
                report = train_step(state, images)
            except NonFiniteLossError:
                if checkpoint_path:
                    save_checkpoint(state, checkpoint_path)
                logger.error("aborting at step %d; last good state saved", state.step)
                raise
            if log and (state.step % log_every == 0 or state.step == until):
                log.write(format_log_line(report) + "\n")
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
            if state.step % 1000 == 0:
                logger.info("step %d total %.4f", state.step, report["total"])
    finally:
        if log:
            log.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


def _fit_data_shape(config: TrainConfig, dataset) -> TrainConfig:
    shape = tuple(dataset.image_shape)
    if shape == config.dims.data_shape:
        return config
    return config.replace(**{"dims.data_shape": list(shape)})


# ------------------------------------------------------------- checkpoints


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for name, module in state.modules.items():
        for k, v in module.state_dict().items():
            arrays[f"param/{name}.{k}"] = v.detach().cpu().numpy()
    for oname, opt in (("opt_main", state.opt_main), ("opt_disc", state.opt_disc)):
        for idx, st in opt.state_dict()["state"].items():
            for k, v in st.items():
                arrays[f"{oname}/{idx}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    for name, g in state.generators.items():
        arrays[f"rng/{name}"] = g.get_state().numpy()
    return arrays


def checkpoint_bytes(state: TrainState) -> bytes:
    arrays = _state_arrays(state)
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"config": state.config.to_flat(), "step": state.step, "arrays": entries}
    body = json.dumps(header, sort_keys=True).encode()
    digest = hashlib.sha256(body + payload).hexdigest()
    head = json.dumps({"digest": digest, "header": header}, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<Q", len(head)) + head + payload


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    blob = Path(path).read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    try:
        head = json.loads(blob[pos + 8 : pos + 8 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = blob[pos + 8 + hlen :]
    header = head["header"]
    body = json.dumps(header, sort_keys=True).encode()
    actual = hashlib.sha256(body + payload).hexdigest()
    if actual != head["digest"]:
        raise CheckpointError(
            f"{path}: digest mismatch (stored {head['digest'][:12]}, computed {actual[:12]})"
        )
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()

    state = TrainState.create(TrainConfig.from_flat(header["config"]))
    for name, module in state.modules.items():
        prefix = f"param/{name}."
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
        module.load_state_dict(sd)
    for oname, opt in (("opt_main", state.opt_main), ("opt_disc", state.opt_disc)):
        sd = opt.state_dict()
        st: dict[int, dict] = {}
        for k, v in arrays.items():
            if k.startswith(oname + "/"):
                _, idx, key = k.split("/")
                st.setdefault(int(idx), {})[key] = torch.from_numpy(v)
        sd["state"] = st
        opt.load_state_dict(sd)
    for name, g in state.generators.items():
        g.set_state(torch.from_numpy(arrays[f"rng/{name}"]))
    state.step = int(header["step"])
    return state
