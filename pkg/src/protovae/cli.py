"""Command-line entry point: ``protovae <subcommand> --config FILE [--key value ...]``.

Config files are YAML mappings; nested mappings flatten to dotted keys, so
``weights: {alpha: 1}`` and ``weights.alpha: 1`` are equivalent. Any key can
be overridden with a ``--dotted.key value`` flag (flags win). Outputs go to a
fresh run directory under ``$PROTOVAE_RUN_DIR`` (default ``./runs``) that
also holds the resolved config.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import artifacts
from .data import TOY_KEYS, ToyConfig, load_archive, make_toy_grid, save_archive
from .metrics import EvalConfig, MetricReport, evaluate
from .trainer import TrainConfig, load_checkpoint, train

logger = logging.getLogger("protovae")

DATA_KEYS = [f"data.{k}" for k in TOY_KEYS] + ["data.archive"]
TRAVERSE_KEYS = ["checkpoint", "indices", "lo", "hi", "steps", "dims", "kl_samples", "seed"]
EXPORT_KEYS = ["checkpoint", "mode", "n", "seed"]


class UsageError(Exception):
    pass


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_overrides(tokens: list[str]) -> dict:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"flag --{key} needs a value")
            raw = tokens[i + 1]
            i += 2
        out[key] = yaml.safe_load(raw)
    return out


def resolve_config(path, overrides: dict, valid: list[str]) -> dict:
    flat = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a mapping")
        flat = flatten(loaded)
    flat.update(overrides)
    unknown = sorted(set(flat) - set(valid))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; valid keys: {sorted(valid)}")
    return flat


def split_prefix(flat: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def build_dataset(data: dict):
    if "archive" in data:
        if len(data) > 1:
            raise UsageError("data.archive cannot be combined with toy dataset keys")
        return load_archive(data["archive"])
    return make_toy_grid(ToyConfig.from_dict(data))


class RunDir:
    """Output directory that only appears once the command has succeeded."""

    def __init__(self, command: str, resolved: dict, explicit=None):
        root = Path(os.environ.get("PROTOVAE_RUN_DIR", "runs"))
        digest = hashlib.sha256(json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest()[:8]
        self.final = Path(explicit) if explicit else root / f"{command}-{digest}"
        self.resolved = resolved

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.final.parent))
        with open(self.tmp / "config.yaml", "w") as fh:
            yaml.safe_dump(self.resolved, fh, sort_keys=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        final, n = self.final, 1
        while final.exists():
            n += 1
            final = self.final.with_name(f"{self.final.name}-{n}")
        os.rename(self.tmp, final)
        self.path = final
        print(final)
        return False


def _sibling_data_config(ckpt: Path) -> dict:
    cfg = ckpt.parent / "config.yaml"
    if cfg.is_file():
        with open(cfg) as fh:
            return split_prefix(flatten(yaml.safe_load(fh) or {}), "data.")
    return {}


def _dataset_for(flat: dict, ckpt: Path):
    data = split_prefix(flat, "data.") or _sibling_data_config(ckpt)
    return build_dataset(data)


# --------------------------------------------------------------- commands


def cmd_gen_data(args, flat):
    plain = {k: v for k, v in flat.items() if not k.startswith("data.")}
    toy = ToyConfig.from_dict({**plain, **split_prefix(flat, "data.")})
    dataset = make_toy_grid(toy)
    resolved = {f"data.{k}": v for k, v in toy.to_dict().items()}
    with RunDir("gen-data", resolved, args.run_dir) as out:
        save_archive(dataset, out / "dataset.npz")


def cmd_train(args, flat):
    data = split_prefix(flat, "data.")
    train_flat = {k: v for k, v in flat.items() if not k.startswith("data.")}
    dataset = build_dataset(data)
    if args.resume:
        state = load_checkpoint(args.resume)
        config = state.config.replace(**train_flat) if train_flat else state.config
        state.config = config
    else:
        config = TrainConfig.from_flat(train_flat)
        config = config.replace(**{"dims.data_shape": list(dataset.image_shape)})
        state = None
    resolved = {**config.to_flat(), **{f"data.{k}": v for k, v in data.items()}}
    with RunDir("train", resolved, args.run_dir) as out:
        train(config, dataset, state=state, log_path=out / "metrics.log",
              checkpoint_path=out / "checkpoint.ckpt", log_every=args.log_every,
              checkpoint_every=args.checkpoint_every)


def _find_checkpoints(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(path.rglob("*.ckpt"))
        if not found:
            raise UsageError(f"no checkpoints under {path}")
        return found
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    return [path]


def cmd_eval(args, flat):
    if "checkpoint" not in flat:
        raise UsageError("eval needs --checkpoint (file or directory)")
    ckpts = _find_checkpoints(Path(flat["checkpoint"]))
    eval_cfg = EvalConfig.from_flat({k: v for k, v in flat.items()
                                     if k != "checkpoint" and not k.startswith("data.")})
    with RunDir("eval", flat, args.run_dir) as out:
        scores = []
        for ckpt in ckpts:
            state = load_checkpoint(ckpt)
            report = evaluate(state, _dataset_for(flat, ckpt), eval_cfg)
            scores.append(report.scores())
            tag = ckpt.parent.name if ckpt.name == "checkpoint.ckpt" else ckpt.stem
            name = f"report_{tag}_trainseed{state.config.seed}_evalseed{eval_cfg.seed}.txt"
            (out / name).write_text(f"checkpoint: {ckpt}\n" + report.to_text())
        lines = [f"n_checkpoints: {len(scores)}"]
        for key in MetricReport.SCORES:
            vals = np.array([s[key] for s in scores])
            lines.append(f"{key}: {vals.mean():.4f} +- {vals.std():.4f}")
        (out / "summary.txt").write_text("\n".join(lines) + "\n")


def cmd_traverse(args, flat):
    if "checkpoint" not in flat:
        raise UsageError("traverse needs --checkpoint")
    ckpt = Path(flat["checkpoint"])
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    kw = {k: flat[k] for k in TRAVERSE_KEYS[1:] if k in flat}
    for k in ("indices", "dims"):
        if k in kw and kw[k] is not None:
            kw[k] = tuple(int(v) for v in np.atleast_1d(kw[k]))
    spec = artifacts.TraversalSpec(**kw)
    state = load_checkpoint(ckpt)
    dataset = _dataset_for(flat, ckpt)
    trav = artifacts.traverse(state, dataset, spec)
    with RunDir("traverse", flat, args.run_dir) as out:
        artifacts.save_png(artifacts.render_traversal(trav, len(spec.indices)), out / "traversal.png")
        (out / "kl.txt").write_text("".join(f"z{j}: {trav.kl[j]:.6f}\n" for j in trav.dims))


def cmd_embed_export(args, flat):
    if "checkpoint" not in flat:
        raise UsageError("embed-export needs --checkpoint")
    ckpt = Path(flat["checkpoint"])
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    state = load_checkpoint(ckpt)
    dataset = _dataset_for(flat, ckpt)
    emb, factors, dims = artifacts.export_pair_embeddings(
        state, dataset, flat.get("mode", "ground-truth-pairs"), int(flat.get("n", 1000)),
        int(flat.get("seed", 0)))
    with RunDir("embed-export", flat, args.run_dir) as out:
        artifacts.write_embeddings_csv(out / "embeddings.csv", emb, factors, dims)
        meta = {"checkpoint": str(ckpt), "lambda": state.config.weights.lam,
                "metric_dim": state.config.dims.metric_dim, "rows": len(emb)}
        with open(out / "metadata.yaml", "w") as fh:
            yaml.safe_dump(meta, fh, sort_keys=True)


COMMANDS = {
    "gen-data": (cmd_gen_data, lambda: list(TOY_KEYS) + DATA_KEYS),
    "train": (cmd_train, lambda: TrainConfig.valid_keys() + DATA_KEYS),
    "eval": (cmd_eval, lambda: ["checkpoint"] + list(EvalConfig.__dataclass_fields__) + DATA_KEYS),
    "traverse": (cmd_traverse, lambda: TRAVERSE_KEYS + DATA_KEYS),
    "embed-export": (cmd_embed_export, lambda: EXPORT_KEYS + DATA_KEYS),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protovae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--run-dir", help="exact output directory (default: derived from config)")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
            p.add_argument("--log-every", type=int, default=10)
            p.add_argument("--checkpoint-every", type=int, default=1000)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    func, valid = COMMANDS[args.command]
    try:
        flat = resolve_config(args.config, parse_overrides(rest), valid())
        func(args, flat)
    except (UsageError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"protovae {args.command}: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
