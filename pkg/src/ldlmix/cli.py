"""``ldlmix`` command line: synth, train, eval, cv, ablate, noise, score, check."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import NoiseSource
from .dataset import (
    LdlDataset,
    build_synthetic,
    inject_feature_noise,
    load_idx_images,
    load_idx_labels,
    parse_ldl_file,
    read_matrix,
    write_ldl_file,
    zscore_fit_transform,
)
from .errors import ConfigurationError, LdlError
from .metrics import DIRECTIONS, METRIC_NAMES, MetricsReport, score_predictions
from .tabmixer import AUGMENTED, TILED, load_checkpoint, predict_batch, save_checkpoint
from .train import LossConfig, TrainConfig, derive_seed, evaluate_model, run_cv, train_model

log = logging.getLogger("ldlmix")

DEFAULT_SEED = 1024

# option dest -> (type, default); these are the keys a --config file may set
TUNABLES = {
    "seed": (int, DEFAULT_SEED),
    "batch": (int, 1000),
    "lr": (float, 2e-4),
    "epochs": (int, 500),
    "pretrain_epochs": (int, None),
    "weight_decay": (float, 0.01),
    "alpha": (float, 1.0),
    "beta": (float, 0.5),
    "blocks": (int, 12),
    "hidden": (int, 512),
    "learner_hidden": (int, 64),
    "block_form": (str, "residual"),
    "folds": (int, 5),
    "repeats": (int, 10),
    "workers": (int, 1),
    "sigmas": (str, "0.1,0.5,1.0"),
    "no_fa": (bool, False),
    "no_pt": (bool, False),
}


class UsageError(Exception):
    """Bad invocation detected after argparse (exit status 2)."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TUNABLES:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        typ = TUNABLES[key][0]
        try:
            out[key] = _parse_bool(value) if typ is bool else typ(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options: flag > config file > LDL_SEED (seed only) > default."""
    config = read_config(args.config) if getattr(args, "config", None) else {}
    for key, (_, default) in TUNABLES.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) is not None:
            continue
        if key in config:
            setattr(args, key, config[key])
        elif key == "seed" and os.environ.get("LDL_SEED", "").strip():
            try:
                args.seed = int(os.environ["LDL_SEED"])
            except ValueError:
                raise UsageError(f"LDL_SEED must be an integer, got {os.environ['LDL_SEED']!r}") from None
        else:
            setattr(args, key, default)
    return args


def train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch, learning_rate=args.lr, epochs=args.epochs,
        weight_decay=args.weight_decay, seed=args.seed, pretrain_epochs=args.pretrain_epochs,
        with_fa=not args.no_fa, with_pt=not args.no_pt, loss=LossConfig(args.alpha, args.beta),
        blocks=args.blocks, hidden=args.hidden, learner_hidden=args.learner_hidden,
        block_form=args.block_form,
    )


def parse_sigmas(text: str) -> list[float]:
    try:
        sigmas = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sigmas must be comma separated numbers, got {text!r}") from None
    if not sigmas or any(s < 0 for s in sigmas):
        raise UsageError("--sigmas needs at least one non-negative value")
    return sigmas


def emit(text: str, out) -> None:
    """Write a report to ``out`` (a path) or stdout."""
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(text.encode("utf-8"))


def _require(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def row_csv(row: dict[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "direction", "value"])
    for name in METRIC_NAMES:
        w.writerow([name, "up" if DIRECTIONS[name] else "down", repr(row[name])])
    return buf.getvalue()


def side_by_side_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["metric", "direction"]
    for label in reports:
        header += [f"{label}_mean", f"{label}_std"]
    w.writerow(header)
    for name in METRIC_NAMES:
        row = [name, "up" if DIRECTIONS[name] else "down"]
        for rep in reports.values():
            row += [repr(rep[name].mean), repr(rep[name].std)]
        w.writerow(row)
    return buf.getvalue()


def run_ablation(data: LdlDataset, cfg: TrainConfig, k: int = 5, repeats: int = 10,
                 workers: int = 1) -> dict[str, MetricsReport]:
    """Full model, without feature augmentation, without pre-training."""
    variants = {
        "full": replace(cfg, with_fa=True, with_pt=True),
        "wo_fa": replace(cfg, with_fa=False, with_pt=True),
        "wo_pt": replace(cfg, with_fa=True, with_pt=False),
    }
    out = {}
    for label, vcfg in variants.items():
        log.info("ablation variant %s", label)
        out[label] = run_cv(data, vcfg, k, repeats, workers)
    return out


def run_noise_sweep(data: LdlDataset, cfg: TrainConfig, sigmas, k: int = 5, repeats: int = 10,
                    workers: int = 1) -> dict[str, MetricsReport]:
    """Cross-validate on copies of ``data`` with N(0, sigma^2) added to the raw features."""
    out = {}
    for i, sigma in enumerate(sigmas):
        noisy = LdlDataset(data.name, inject_feature_noise(data.features, sigma,
                                                           derive_seed(cfg.seed, 7, i)),
                           data.labels)
        log.info("noise sigma=%g", sigma)
        out[f"sigma_{sigma:g}"] = run_cv(noisy, cfg, k, repeats, workers)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    images = load_idx_images(_require(args.images, "--images"))
    classes = load_idx_labels(_require(args.labels, "--labels"))
    if args.limit is not None:
        images, classes = images[:args.limit], classes[:args.limit]
    ds = build_synthetic(images, classes, c=args.label_count, sigma=args.label_sigma,
                         components=args.components)
    if args.out is None:
        raise UsageError("--out is required")
    write_ldl_file(ds, args.out)
    print(f"wrote {args.out}: m={ds.m} n={ds.n} c={ds.c}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    data = parse_ldl_file(_require(args.data, "--data"))
    if args.out is None:
        raise UsageError("--out is required")
    cfg = train_config(args)
    x, mean, std = zscore_fit_transform(data.features, data.features)
    scaled = LdlDataset(data.name, x, data.labels)
    model = cfg.new_model(data.n, data.c, derive_seed(cfg.seed, 0))
    t0 = time.perf_counter()
    result = train_model(model, scaled, cfg, NoiseSource(derive_seed(cfg.seed, 3)))
    log.info("trained in %.1fs", time.perf_counter() - t0)
    extra = {"scaler.mean": mean, "scaler.std": std,
             "config.with_fa": np.array([float(cfg.with_fa)]),
             "config.eval_seed": np.array([float(derive_seed(cfg.seed, 4))])}
    save_checkpoint(result.model, args.out, extra)
    emit(result.trace_csv(), str(args.out) + ".trace.csv")
    return 0


def cmd_eval(args) -> int:
    data = parse_ldl_file(_require(args.data, "--data"))
    model, extra = load_checkpoint(_require(args.model, "--model"))
    x = data.features
    if "scaler.mean" in extra:
        x = (x - extra["scaler.mean"]) / extra["scaler.std"]
    with_fa = bool(extra.get("config.with_fa", np.array([1.0]))[0])
    seed = int(extra.get("config.eval_seed", np.array([float(derive_seed(args.seed, 4))]))[0])
    noise = NoiseSource(seed) if with_fa else None
    mode = AUGMENTED if with_fa else TILED
    scaled = LdlDataset(data.name, x, data.labels)
    if args.predictions:
        noise_p = NoiseSource(seed) if with_fa else None
        pred = predict_batch(model, x, noise_p, mode)
        emit("".join(" ".join(repr(float(v)) for v in r) + "\n" for r in pred), args.predictions)
    emit(row_csv(evaluate_model(model, scaled, noise, mode)), args.out)
    return 0


def cmd_cv(args) -> int:
    data = parse_ldl_file(_require(args.data, "--data"))
    report = run_cv(data, train_config(args), args.folds, args.repeats, args.workers)
    emit(report.to_csv(), args.out)
    if args.folds_out:
        emit(report.folds_csv(), args.folds_out)
    log.info("\n%s", report.format())
    return 0


def cmd_ablate(args) -> int:
    data = parse_ldl_file(_require(args.data, "--data"))
    reports = run_ablation(data, train_config(args), args.folds, args.repeats, args.workers)
    emit(side_by_side_csv(reports), args.out)
    return 0


def cmd_noise(args) -> int:
    data = parse_ldl_file(_require(args.data, "--data"))
    reports = run_noise_sweep(data, train_config(args), parse_sigmas(args.sigmas),
                              args.folds, args.repeats, args.workers)
    emit(side_by_side_csv(reports), args.out)
    return 0


def cmd_score(args) -> int:
    data = parse_ldl_file(_require(args.data, "--data"))
    pred = read_matrix(_require(args.pred, "--pred"))
    emit(row_csv(score_predictions(pred, data.labels)), args.out)
    return 0


def cmd_check(args) -> int:
    from .checks import run_all

    t0 = time.perf_counter()
    results = run_all(print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _training_flags(p: argparse.ArgumentParser, cv: bool) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--config", help="key = value file; flags given here override it")
    g.add_argument("--seed", type=int, help=f"master seed (default {DEFAULT_SEED}, or $LDL_SEED)")
    g.add_argument("--batch", type=int, help="mini-batch size (default 1000)")
    g.add_argument("--lr", type=float, help="AdamW learning rate (default 2e-4)")
    g.add_argument("--epochs", type=int, help="training epochs (default 500)")
    g.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int,
                   help="tiled pre-training epochs (default 10%% of --epochs)")
    g.add_argument("--weight-decay", dest="weight_decay", type=float, help="default 0.01")
    g.add_argument("--alpha", type=float, help="L1 weight (default 1)")
    g.add_argument("--beta", type=float, help="KL weight (default 0.5)")
    g.add_argument("--blocks", type=int, help="LMResidual blocks (default 12)")
    g.add_argument("--hidden", type=int, help="block perceptron width (default 512)")
    g.add_argument("--learner-hidden", dest="learner_hidden", type=int, help="default 64")
    g.add_argument("--block-form", dest="block_form", choices=("residual", "literal"),
                   help="residual: x + LA(x)*MLP(LN(x)) (default); literal: LA(x)*MLP(LN(x)+x)")
    g.add_argument("--no-fa", dest="no_fa", action="store_const", const=True,
                   help="train without feature augmentation (tiled input throughout)")
    g.add_argument("--no-pt", dest="no_pt", action="store_const", const=True,
                   help="skip tiled pre-training")
    if cv:
        g.add_argument("--folds", type=int, help="k of k-fold (default 5)")
        g.add_argument("--repeats", type=int, help="repetitions (default 10)")
        g.add_argument("--workers", type=int, help="parallel fold workers (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldlmix", description="Label distribution learning toolkit.")
    parser.add_argument("--version", action="version", version=f"ldlmix {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="build the synthetic LDL dataset from IDX images")
    p.add_argument("--images", help="IDX image file (optionally .gz)")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--out", help="output dataset file")
    p.add_argument("--limit", type=int, help="use only the first N images")
    p.add_argument("--components", type=int, default=28, help="PCA components (default 28)")
    p.add_argument("--label-count", dest="label_count", type=int, default=56, help="default 56")
    p.add_argument("--label-sigma", dest="label_sigma", type=float, default=0.5, help="default 0.5")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a whole dataset")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--out", help="checkpoint path; the loss trace goes to <out>.trace.csv")
    _training_flags(p, cv=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--model", help="TBMX checkpoint")
    p.add_argument("--out", help="metrics CSV (default stdout)")
    p.add_argument("--predictions", help="also write predicted distributions here")
    p.add_argument("--seed", type=int, help="used only when the checkpoint lacks an evaluation seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="repeated k-fold cross-validation")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--out", help="summary CSV (default stdout)")
    p.add_argument("--folds-out", dest="folds_out", help="per-fold CSV")
    _training_flags(p, cv=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="full vs without-FA vs without-PT")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--out", help="side-by-side CSV (default stdout)")
    _training_flags(p, cv=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noise", help="cross-validate under Gaussian feature noise")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--out", help="side-by-side CSV (default stdout)")
    p.add_argument("--sigmas", help="comma separated noise levels (default 0.1,0.5,1.0)")
    _training_flags(p, cv=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("score", help="score an external prediction file")
    p.add_argument("--data", help="dataset file holding the target distributions")
    p.add_argument("--pred", help="prediction matrix, one row per sample")
    p.add_argument("--out", help="metrics CSV (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("check", help="gradient, metric and degeneracy self-checks")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        resolve(args)
        if hasattr(args, "workers") and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))   # exits 2
    except (LdlError, ConfigurationError, OSError, ValueError) as exc:
        print(f"ldlmix: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
