"""Command-line entry point: ``emoe {train,eval,analyze,gradcheck,probe}``.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import checkpoint, gradcheck
from .config import RunConfig, dump_config, load_config, stream
from .data import LabeledImages, channel_stats, few_shot_split, gen_class_images, load_cifar10
from .errors import ConfigError, EmoeError, FormatError, NumericError
from .train import (LoadStats, MetricsLog, balance_metrics, evaluate, linear_probe, train, write_heatmap_csv,
                    write_heatmap_pgm)
from .vit import ViT

log = logging.getLogger("emoe")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.emoe"


class UsageError(EmoeError):
    pass


# ---------------------------------------------------------------- helpers


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, router=getattr(args, "router", None), output_dir=args.out)


def load_data(cfg: RunConfig):
    """Return ``(train, test)`` for the configured source."""
    d, m = cfg.data, cfg.model
    seed = cfg.train.seed
    if d.source == "synthetic":
        if d.num_classes != m.num_classes:
            raise ConfigError(f"data.num_classes = {d.num_classes} but model.num_classes = {m.num_classes}")
        # one draw so train and test share the class patterns
        full = gen_class_images(d.num_classes, d.per_class + d.test_per_class, m.image_size, m.patch_size,
                                m.channels, d.noise, seed=seed)
        rank = np.zeros(len(full), dtype=np.int64)
        for c in range(d.num_classes):
            members = np.flatnonzero(full.labels == c)
            rank[members] = np.arange(members.size)
        return full.subset(np.flatnonzero(rank < d.per_class)), full.subset(np.flatnonzero(rank >= d.per_class))
    if not d.path:
        raise ConfigError("data.path is required when data.source = cifar10")
    if (m.image_size, m.channels, m.num_classes) != (32, 3, 10):
        raise ConfigError("CIFAR-10 needs model.image_size = 32, model.channels = 3, model.num_classes = 10")
    train_set = load_cifar10(d.path, "train")
    test_set = load_cifar10(d.path, "test")
    rng = stream(seed, "data")
    if d.train_subset and d.train_subset < len(train_set):
        train_set = train_set.subset(np.sort(rng.choice(len(train_set), d.train_subset, replace=False)))
    if d.test_subset and d.test_subset < len(test_set):
        test_set = test_set.subset(np.sort(rng.choice(len(test_set), d.test_subset, replace=False)))
    return train_set, test_set


def check_compatible(model: ViT, data: LabeledImages, source: str) -> None:
    cfg = model.config
    _, h, w, c = data.images.shape
    if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigError(f"checkpoint expects {cfg.image_size}x{cfg.image_size}x{cfg.channels} images, "
                          f"{source} has {h}x{w}x{c}")
    if data.num_classes != cfg.num_classes:
        raise ConfigError(f"checkpoint has {cfg.num_classes} classes, {source} has {data.num_classes}")


def open_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model, extra = checkpoint.load_model(p)
    if "data.mean" not in extra or "data.std" not in extra:
        raise FormatError(f"{path}: checkpoint lacks data.mean / data.std")
    return model, extra["data.mean"], extra["data.std"]


def checkpoint_path(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / CHECKPOINT_NAME


def _finite(x):
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def write_json(path: Path, record: dict) -> None:
    path.write_text(json.dumps(_finite(record), indent=2, sort_keys=True) + "\n")


def alignment(counts: np.ndarray) -> dict:
    """Best one-to-one expert/class matching of the routing counts.

    ``matched_fraction`` is the share of routed tokens on matched pairs
    (1.0 means each class goes to its own expert).
    """
    total = counts.sum()
    rows, cols = linear_sum_assignment(counts, maximize=True)
    matched = counts[rows, cols].sum()
    return {
        "expert_for_class": {int(c): int(r) for r, c in zip(rows, cols)},
        "matched_fraction": float(matched / total) if total else 0.0,
    }


def summarize_load(load: dict) -> dict:
    out = {}
    for i, stats in sorted(load.items()):
        if stats.tokens_seen == 0:
            out[str(i)] = {"routed_tokens": 0}
            continue
        out[str(i)] = {"routed_tokens": stats.tokens_seen, **balance_metrics(stats), **alignment(stats.counts)}
    return out


def export_heatmaps(out_dir: Path, prefix: str, load: dict, class_names) -> list:
    written = []
    for i, stats in sorted(load.items()):
        csv, pgm = out_dir / f"{prefix}_block{i}.csv", out_dir / f"{prefix}_block{i}.pgm"
        write_heatmap_csv(csv, stats, list(class_names))
        write_heatmap_pgm(pgm, stats)
        written += [csv, pgm]
    return written


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg.model.validate()
    train_set, test_set = load_data(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    mean, std = channel_stats(train_set.images)
    model = ViT(cfg.model, rng=stream(cfg.train.seed, "init"))
    if model.moe_layers:
        from .data import normalize

        warm_rng = stream(cfg.train.seed, "warmup")
        idx = warm_rng.choice(len(train_set), min(cfg.train.batch_size, len(train_set)), replace=False)
        model.warm_start(normalize(train_set.images[idx], mean, std), warm_rng)

    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    metrics = MetricsLog(metrics_path)
    try:
        history, load = train(model, train_set, cfg.train, mean, std, metrics, test_set,
                              rng=stream(cfg.train.seed, "shuffle"))
    finally:
        metrics.close()

    checkpoint.save_model(out / CHECKPOINT_NAME, model, {"data.mean": mean, "data.std": std})
    export_heatmaps(out, "load", load, train_set.class_names)
    ev = evaluate(model, test_set, mean, std)
    summary = {
        "router": cfg.model.router,
        "seed": cfg.train.seed,
        "steps": cfg.train.steps,
        "final_loss": history[-1]["loss"] if history else {},
        "test_loss": ev.loss,
        "test_accuracy": ev.accuracy,
        "train_load": summarize_load(load),
        "test_load": summarize_load(ev.load),
    }
    write_json(out / "summary.json", summary)
    print(f"trained {cfg.train.steps} steps ({cfg.model.router}); test accuracy {ev.accuracy:.4f}, "
          f"test loss {ev.loss:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, mean, std = open_checkpoint(checkpoint_path(args, cfg))
    _, test_set = load_data(cfg)
    check_compatible(model, test_set, "the configured dataset")
    ev = evaluate(model, test_set, mean, std)
    record = {"test_loss": ev.loss, "test_accuracy": ev.accuracy, "load": summarize_load(ev.load)}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "eval.json", record)
    print(f"test accuracy {ev.accuracy:.4f}, test loss {ev.loss:.4f} on {len(test_set)} images")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    model, mean, std = open_checkpoint(checkpoint_path(args, cfg))
    train_set, test_set = load_data(cfg)
    data = test_set if args.split == "test" else train_set
    check_compatible(model, data, "the configured dataset")
    if args.ablate_moe:
        model.moe_enabled = False
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not model.moe_layers or not model.moe_enabled:
        write_json(out / "analysis.json", {"routed_tokens": 0, "blocks": {}})
        print("no routed tokens: the checkpoint has no active MoE blocks (MoE ablated), nothing to analyze")
        return EXIT_OK
    ev = evaluate(model, data, mean, std)
    summary = summarize_load(ev.load)
    export_heatmaps(out, "analysis", ev.load, data.class_names)
    write_json(out / "analysis.json", {"routed_tokens": sum(s.tokens_seen for s in ev.load.values()),
                                       "blocks": summary})
    for i, s in summary.items():
        if not s["routed_tokens"]:
            print(f"block {i}: no routed tokens")
            continue
        print(f"block {i}: {s['routed_tokens']} routed tokens, max/min {s['max_min_ratio']:.3g}, "
              f"entropy {s['entropy']:.3f}, dead {s['dead_experts']}, matched {s['matched_fraction']:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    report = gradcheck.run_suite(seed=seed, perturb=args.corrupt_gradient)
    failures = []
    for section, rows in report.items():
        print(f"[{section}]")
        for component, w, n, skipped in rows:
            if w is None:
                print(f"  {component}: no entries checked")
                failures.append((component, None))
                continue
            flag = "ok" if w.rel_error < gradcheck.TOLERANCE else "FAIL"
            print(f"  {component}: worst rel error {w.rel_error:.3e} at {w.name}{list(w.index)} "
                  f"({n} checked, {skipped} skipped) {flag}")
            if flag == "FAIL":
                failures.append((component, w))
    if failures:
        print("gradient check failed for:")
        for component, w in failures:
            where = f"{w.name}{list(w.index)} analytic {w.analytic:.6e} numeric {w.numeric:.6e}" if w else "-"
            print(f"  {component}: {where}")
        return EXIT_VERIFY
    print(f"all gradients within {gradcheck.TOLERANCE:g}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = resolve_config(args)
    model, mean, std = open_checkpoint(checkpoint_path(args, cfg))
    train_set, test_set = load_data(cfg)
    check_compatible(model, test_set, "the configured dataset")
    support, _ = few_shot_split(train_set, args.shots, cfg.train.seed)
    fs = evaluate(model, support, mean, std).features
    fq = evaluate(model, test_set, mean, std).features
    feats = np.concatenate([fs, fq])
    labels = np.concatenate([support.labels, test_set.labels])
    split = (np.arange(len(support)), len(support) + np.arange(len(test_set)))
    acc = linear_probe(feats, labels, split, num_classes=test_set.num_classes)
    chance = 1.0 / test_set.num_classes
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "probe.json", {"shots": args.shots, "accuracy": acc, "chance": chance,
                                    "support": len(support), "query": len(test_set)})
    print(f"{args.shots}-shot linear probe accuracy {acc:.4f} (chance {chance:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run config (dotted key = value lines)")
    common.add_argument("--seed", type=int, metavar="N", help="override train.seed")
    common.add_argument("--router", choices=("eigen", "gate", "gate+lbl"), help="override model.router")
    common.add_argument("--out", metavar="DIR", help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="emoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and write checkpoint, metrics and heatmaps")
    for name, text in (("eval", "evaluate a checkpoint on the test split"),
                       ("analyze", "expert-by-class routing heatmaps and balance metrics"),
                       ("probe", "few-shot linear probe on frozen features")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", metavar="PATH", help=f"default: <out>/{CHECKPOINT_NAME}")
    sub.choices["analyze"].add_argument("--split", choices=("train", "test"), default="test")
    sub.choices["analyze"].add_argument("--ablate-moe", action="store_true", help="run with MoE branches disabled")
    sub.choices["probe"].add_argument("--shots", type=int, default=5)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    # test hook: scales every analytic gradient by (1 + x)
    g.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck,
            "probe": cmd_probe}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"emoe {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, FormatError, FileNotFoundError) as exc:
        print(f"emoe {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
