"""``bil`` command line: train, pretrain, eval, selftest.

Exit status is 0 on success, 1 when a verification fails and 2 for usage
errors (bad flags, incompatible options, missing files).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import selftest
from .architectures import INPUT_SHAPES, build_model
from .data import Dataset, gen_synthetic, label_split, load_idx, mnist_subset, split_shards, train_test_split
from .errors import ConfigurationError, ConsistencyError, FormatError, StructureError
from .laplace import (
    LaplaceConfig,
    build_pretrained_prior,
    default_transfer_mask,
    grid_search_sigma,
    init_from_prior_means,
    laplace_fit_sigma,
    train_map,
)
from .persistence import load_checkpoint, save_checkpoint, write_metrics
from .training import LARGE_NET_KL_SCALE, PREDICTIVE_SAMPLES, IncrementalLearner, TrainConfig, evaluate

USAGE_ERRORS = (ConfigurationError, StructureError, FormatError, ConsistencyError, FileNotFoundError)

TRAIN_DEFAULTS = {
    "arch": "mlp:2-32-32-3",
    "family": "ffg",
    "dataset": "synthetic:blobs",
    "T": 1,
    "epochs": 50,
    "batch_size": 32,
    "beta": None,
    "lr": 1e-3,
    "mc_samples": 1,
    "samples": PREDICTIVE_SAMPLES,
    "test_fraction": 0.2,
    "split_seed": 0,
    "init_sigma": 0.05,
    "flow_depth": 2,
    "local_reparam": False,
    "early_stop": False,
    "prior": None,
    "part": None,
    "out": "run",
    "metrics_format": "csv",
}

PRETRAIN_DEFAULTS = {
    "arch": "mlp:784-100-5",
    "dataset": "mnist",
    "epochs": 10,
    "batch_size": 32,
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "test_fraction": 0.2,
    "split_seed": 0,
    "sigma_mode": "laplace",
    "sigma": 0.1,
    "grid": "0.001,0.01,0.1",
    "grid_T": 2,
    "grid_epochs": 10,
    "damping": None,
    "sigma_floor": 1e-3,
    "sigma_ceil": 1.0,
    "out": "pretrained",
}

EVAL_DEFAULTS = {"checkpoint": None, "dataset": None, "samples": PREDICTIVE_SAMPLES, "part": None, "test_fraction": None, "split_seed": None}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- datasets


def load_dataset(spec: str) -> Dataset:
    """``mnist``, ``idx:IMAGES,LABELS`` or ``synthetic:KIND[,key=value...]``."""
    if spec == "mnist":
        return mnist_subset()
    if spec.startswith("idx:"):
        paths = spec[4:].split(",")
        if len(paths) != 2:
            raise UsageError("idx datasets are given as idx:IMAGES,LABELS")
        return load_idx(*paths)
    if spec.startswith("synthetic:"):
        kind, *opts = spec[len("synthetic:"):].split(",")
        params = {"n": 3000, "classes": 3 if kind == "blobs" else 2, "noise": 0.3, "seed": 0}
        for opt in opts:
            key, _, value = opt.partition("=")
            if key not in params:
                raise UsageError(f"unknown synthetic option {key!r}; expected n, classes, noise or seed")
            params[key] = float(value) if key == "noise" else int(value)
        return gen_synthetic(kind, params["n"], params["classes"], params["noise"], params["seed"])
    raise UsageError(f"unknown dataset {spec!r}; expected mnist, idx:IMAGES,LABELS or synthetic:KIND")


def task_data(spec: str, part: str | None, split_seed: int, test_fraction: float) -> tuple[Dataset, Dataset]:
    """Train/test split of the dataset, or of one label-split half of it."""
    data = load_dataset(spec)
    if part is not None:
        halves = label_split(data, split_seed)
        data = halves.part_a if part == "a" else halves.part_b
    return train_test_split(data, test_fraction, split_seed)


# --------------------------------------------------------------------------- config plumbing


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; the seed falls back to $BIL_SEED."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from None
        unknown = set(loaded) - set(defaults) - {"seed"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in defaults and value is not None:
            cfg[key] = value
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        seed = int(os.environ.get("BIL_SEED", "0"))
    cfg["seed"] = int(seed)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- commands


def _retarget(model, source_prior, meta):
    """Pretrained gauss prior -> prior in ``model``'s family (same means and sigmas)."""
    mask = meta["transfer_mask"]
    pretrained, sigma = {}, {}
    for i in mask:
        lp = source_prior.layers[i]
        pretrained[f"{i}.weight"], pretrained[f"{i}.bias"] = lp["w_mu"], lp["b_mu"]
        sigma[f"{i}.weight"], sigma[f"{i}.bias"] = lp["w_sigma"], lp["b_sigma"]
    return build_pretrained_prior(model, pretrained, sigma, mask), mask


def default_beta(arch: str) -> float:
    """KL scale when none is given: downscaled for the named conv nets, 1 otherwise."""
    return LARGE_NET_KL_SCALE if arch in INPUT_SHAPES else 1.0


def cmd_train(cfg: dict, out=print) -> int:
    if cfg["beta"] is None:
        cfg["beta"] = default_beta(cfg["arch"])
    prior_meta = None
    if cfg["prior"] is not None:
        pre = load_checkpoint(cfg["prior"])
        prior_meta = pre.meta
        if cfg["part"] is None and prior_meta.get("kind") == "pretrained_prior":
            cfg["part"] = "b"
            cfg["split_seed"] = prior_meta["split_seed"]
    train, test = task_data(cfg["dataset"], cfg["part"], cfg["split_seed"], cfg["test_fraction"])
    model = build_model(
        cfg["arch"], cfg["family"], cfg["seed"], init_sigma=cfg["init_sigma"], flow_depth=cfg["flow_depth"], local_reparam=cfg["local_reparam"]
    )
    initial_prior = None
    if prior_meta is not None:
        initial_prior, mask = _retarget(model, pre.prior, prior_meta)
        init_from_prior_means(model, initial_prior, mask)
    shards = split_shards(train, cfg["T"], cfg["split_seed"])
    config = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        kl_scale=cfg["beta"],
        mc_samples=cfg["mc_samples"],
        eval_samples=cfg["samples"],
        seed=cfg["seed"],
        early_stop=cfg["early_stop"],
    )
    learner = IncrementalLearner(model, config, initial_prior)
    metrics = learner.fit(shards, test)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = write_metrics(metrics, out_dir / f"metrics.{cfg['metrics_format']}", config=cfg)
    save_checkpoint(
        out_dir / "checkpoint",
        model,
        learner=learner,
        meta={"kind": "trained", "resolved_config": cfg, "final_test_accuracy": metrics[-1].test_accuracy},
    )
    for m in metrics:
        out(f"stage {m.stage}/{len(shards)}  elbo {m.elbo[-1]:.4f}  test_acc {m.test_accuracy:.4f}  test_nll {m.test_nll:.4f}")
    out(f"metrics: {metrics_path}")
    out(f"checkpoint: {out_dir / 'checkpoint'}")
    return 0


def cmd_pretrain(cfg: dict, out=print) -> int:
    if cfg["sigma_mode"] not in ("laplace", "grid", "fixed"):
        raise UsageError("--sigma-mode must be laplace, grid or fixed")
    part_a, _ = task_data(cfg["dataset"], "a", cfg["split_seed"], cfg["test_fraction"])
    ft = build_model(cfg["arch"], "ft", cfg["seed"])
    w_star = train_map(ft, part_a, cfg["epochs"], cfg["weight_decay"], cfg["lr"], cfg["batch_size"], cfg["seed"])
    target = build_model(cfg["arch"], "ffg", cfg["seed"])
    mask = default_transfer_mask(target)
    meta = {"kind": "pretrained_prior", "sigma_mode": cfg["sigma_mode"], "transfer_mask": mask, "split_seed": cfg["split_seed"], "resolved_config": cfg}
    if cfg["sigma_mode"] == "laplace":
        lcfg = LaplaceConfig(len(part_a), cfg["damping"], cfg["sigma_floor"], cfg["sigma_ceil"])
        sigma = {k: np.sqrt(v) for k, v in laplace_fit_sigma(ft, part_a, lcfg).items()}
        out(f"laplace sigma: median {np.median(np.concatenate([s.ravel() for s in sigma.values()])):.4g}")
    elif cfg["sigma_mode"] == "fixed":
        sigma = float(cfg["sigma"])
        meta["sigma"] = sigma
    else:
        candidates = [float(c) for c in str(cfg["grid"]).split(",") if c]
        part_b, _ = task_data(cfg["dataset"], "b", cfg["split_seed"], cfg["test_fraction"])
        fit_part, val_part = train_test_split(part_b, 0.2, cfg["split_seed"])
        short = TrainConfig(epochs=cfg["grid_epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"])
        sigma, scores = grid_search_sigma(
            candidates,
            make_model=lambda: build_model(cfg["arch"], "ffg", cfg["seed"]),
            pretrained=w_star,
            shards=split_shards(fit_part, cfg["grid_T"], cfg["split_seed"]),
            eval_data=val_part,
            config=short,
            transfer_mask=mask,
        )
        meta["sigma"] = sigma
        meta["grid_scores"] = {repr(k): v for k, v in scores.items()}
        for c, s in scores.items():
            out(f"grid sigma {c:g}: validation accuracy {s:.4f}")
        out(f"chosen sigma: {sigma:g}")
    prior = build_pretrained_prior(target, w_star, sigma, mask)
    save_checkpoint(cfg["out"], ft, prior=prior, meta=meta)
    out(f"pretrained prior: {cfg['out']}")
    return 0


def cmd_eval(cfg: dict, out=print) -> int:
    if cfg["checkpoint"] is None:
        raise UsageError("eval needs --checkpoint")
    ckpt = load_checkpoint(cfg["checkpoint"])
    saved = ckpt.meta.get("resolved_config", {})
    spec = cfg["dataset"] or saved.get("dataset")
    if spec is None:
        raise UsageError("checkpoint does not record a dataset; pass --dataset")
    part = cfg["part"] if cfg["part"] is not None else saved.get("part")
    split_seed = cfg["split_seed"] if cfg["split_seed"] is not None else saved.get("split_seed", 0)
    frac = cfg["test_fraction"] if cfg["test_fraction"] is not None else saved.get("test_fraction", 0.2)
    _, test = task_data(spec, part, split_seed, frac)
    acc, nll = evaluate(ckpt.model, test, cfg["samples"], np.random.default_rng(cfg["seed"]))
    if ckpt.model.family == "ft":
        out("ft model: single deterministic pass, --samples ignored")
    else:
        out(f"predictive samples: {cfg['samples']}")
    out(f"test_accuracy {acc:.6f}")
    out(f"test_nll {nll:.6f}")
    return 0


def cmd_selftest(cfg: dict, out=print) -> int:
    return selftest.main(cfg["seed"], cfg.get("suites"), out)


# --------------------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="random seed (falls back to $BIL_SEED, then 0)")
    p.add_argument("--config", help="JSON file of option values; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bil", description="Bayesian incremental learning")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="incremental training over T shards")
    _common(t)
    t.add_argument("--arch", help="lenet5, conv3fc3 or mlp:W0-W1-...")
    t.add_argument("--family", choices=["ft", "ffg", "cfg", "mnf"])
    t.add_argument("--dataset", help="mnist, idx:IMAGES,LABELS or synthetic:blobs[,n=..,classes=..,noise=..,seed=..]")
    t.add_argument("--T", type=int, help="number of shards")
    t.add_argument("--epochs", type=int, help="epochs per stage")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--beta", type=float, help="KL scale (default 0.05 for lenet5/conv3fc3, 1 for mlp)")
    t.add_argument("--lr", type=float)
    t.add_argument("--mc-samples", type=int, help="weight draws per ELBO evaluation")
    t.add_argument("--samples", type=int, help="predictive draws at evaluation")
    t.add_argument("--test-fraction", type=float)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--init-sigma", type=float)
    t.add_argument("--flow-depth", type=int)
    t.add_argument("--local-reparam", action="store_true", default=None)
    t.add_argument("--early-stop", action="store_true", default=None)
    t.add_argument("--prior", help="pretrained prior checkpoint (from bil pretrain)")
    t.add_argument("--part", choices=["a", "b"], help="train on one label-split half")
    t.add_argument("--out", help="output directory")
    t.add_argument("--metrics-format", choices=["csv", "json"])

    p = sub.add_parser("pretrain", help="point-estimate training on label-split half A, then a prior")
    _common(p)
    p.add_argument("--arch")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--sigma-mode", choices=["laplace", "grid", "fixed"])
    p.add_argument("--sigma", type=float, help="prior std for --sigma-mode fixed")
    p.add_argument("--grid", help="comma-separated sigma candidates; implies --sigma-mode grid")
    p.add_argument("--grid-T", type=int)
    p.add_argument("--grid-epochs", type=int)
    p.add_argument("--damping", type=float)
    p.add_argument("--sigma-floor", type=float)
    p.add_argument("--sigma-ceil", type=float)
    p.add_argument("--out", help="checkpoint directory")

    e = sub.add_parser("eval", help="test accuracy and NLL of a checkpoint")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--samples", type=int)
    e.add_argument("--part", choices=["a", "b"])
    e.add_argument("--test-fraction", type=float)
    e.add_argument("--split-seed", type=int)

    s = sub.add_parser("selftest", help="gradient, KL and flow verification suites")
    _common(s)
    s.add_argument("--suite", action="append", choices=sorted(selftest.SUITES), dest="suites")
    return parser


COMMANDS = {
    "train": (cmd_train, TRAIN_DEFAULTS),
    "pretrain": (cmd_pretrain, PRETRAIN_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "selftest": (cmd_selftest, {"suites": None}),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    fn, defaults = COMMANDS[args.command]
    try:
        cfg = resolve(args, defaults)
        if args.command == "pretrain" and args.grid is not None and args.sigma_mode is None:
            cfg["sigma_mode"] = "grid"
        return fn(cfg)
    except (UsageError, *USAGE_ERRORS) as e:
        print(f"bil {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
