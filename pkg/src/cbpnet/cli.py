"""Command-line entry point.

Subcommands: pretrain, run, ablate, probe, report. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .backbone import save_checkpoint
from .errors import CbpNetError, UsageError
from .harness import (
    AccuracyMatrix,
    MetricsReport,
    avg_accuracy,
    curves_svg,
    emit_report,
    forgetting,
    read_matrix_csv,
)
from .trainer import (
    VARIANT_NAMES,
    ExperimentConfig,
    VariantFlags,
    _map_labels,
    _prepare_data,
    _shared_pretrain,
    count_trainable,
    plasticity_probe,
    pretrain_backbone,
    run_sequence,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbpnet",
        description="Continual learning with dual prompts and a re-init block.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("pretrain", parents=[common],
                   help="train and freeze the backbone on base classes")
    sub.add_parser("run", parents=[common],
                   help="run one continual sequence").add_argument(
        "--pretrained", help="backbone checkpoint to start from")
    ablate = sub.add_parser("ablate", parents=[common],
                            help="run all four variants over shared seeds")
    ablate.add_argument("--seeds", type=int, default=5, help="number of seeds")
    probe = sub.add_parser("probe", parents=[common],
                           help="plasticity probe: block on vs off")
    probe.add_argument("--seeds", type=int, default=5, help="number of seeds")
    report = sub.add_parser("report", parents=[common],
                            help="recompute metrics from a matrix.csv")
    report.add_argument("--matrix", help="path to matrix.csv (default <out>/matrix.csv)")
    sub.add_parser("params", parents=[common],
                   help="print the trainable-parameter breakdown")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        with open(args.config) as f:
            cfg = ExperimentConfig.from_json(json.load(f))
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    split = _prepare_data(cfg)
    if split.base_train is None:
        raise UsageError("config has no base classes to pretrain on")
    images, labels = split.base_train
    local = _map_labels(labels, split.spec.base_classes)
    store = pretrain_backbone(cfg, images, local, len(split.spec.base_classes))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "backbone.ckpt")
    save_checkpoint(path, {name: t.data for name, t in store.params.items()})
    print(f"pretrained backbone written to {path}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    pretrained = None
    if getattr(args, "pretrained", None):
        from .backbone import load_checkpoint

        pretrained = load_checkpoint(args.pretrained)
    start = time.time()
    matrix = run_sequence(cfg, pretrained=pretrained)
    report = MetricsReport(
        matrix=matrix, config=cfg.to_json(), seed=cfg.seed,
        variant=cfg.variant.name, wall_clock=time.time() - start,
    )
    emit_report(report, args.out)
    print(f"avg_accuracy={report.average_accuracy:.4f} "
          f"forgetting={report.forgetting_rate}")
    return 0


def run_ablation(cfg: ExperimentConfig, seeds) -> dict:
    """All four variant rows over shared seeds with shared pretraining."""
    results = {name: [] for name in VARIANT_NAMES}
    curves = {}
    for seed in seeds:
        seed_cfg = cfg.with_seed(seed)
        pretrained = _shared_pretrain(seed_cfg)
        for name in VARIANT_NAMES:
            flags = VariantFlags.named(name)
            variant_cfg = seed_cfg.with_variant(flags)
            matrix = run_sequence(variant_cfg, pretrained=pretrained)
            results[name].append(matrix)
            curves.setdefault(name, []).append(matrix.just_learned())
    return {"matrices": results, "curves": curves}


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    start = time.time()
    out = run_ablation(cfg, seeds)
    os.makedirs(args.out, exist_ok=True)
    summary = {"seeds": seeds, "wall_clock_s": time.time() - start, "variants": {}}
    mean_curves = {}
    for name, matrices in out["matrices"].items():
        accs = [avg_accuracy(m) for m in matrices]
        forgets = [forgetting(m) for m in matrices] if matrices[0].size >= 2 else []
        summary["variants"][name] = {
            "avg_accuracy_mean": float(np.mean(accs)),
            "avg_accuracy_per_seed": accs,
            "forgetting_mean": float(np.mean(forgets)) if forgets else None,
        }
        mean_curves[name] = list(np.mean(out["curves"][name], axis=0))
        for seed, matrix in zip(seeds, matrices):
            report = MetricsReport(matrix=matrix, config=cfg.to_json(), seed=seed,
                                   variant=name)
            emit_report(report, os.path.join(args.out, f"{name}-seed{seed}"))
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(args.out, "curves.svg"), "w") as f:
        f.write(curves_svg(mean_curves) + "\n")
    for name, stats in summary["variants"].items():
        print(f"{name}: avg_accuracy={stats['avg_accuracy_mean']:.4f}")
    return 0


def _cmd_probe(args) -> int:
    cfg = _load_config(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    out = plasticity_probe(cfg, seeds)
    os.makedirs(args.out, exist_ok=True)
    mean_curves = {name: list(np.mean(runs, axis=0))
                   for name, runs in out["curves"].items()}
    doc = {
        "seeds": seeds,
        "curves_mean": mean_curves,
        "pretrain_checksums": out["pretrain_checksums"],
    }
    with open(os.path.join(args.out, "probe.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(args.out, "curves.svg"), "w") as f:
        f.write(curves_svg(mean_curves) + "\n")
    late = {name: float(np.mean(vals[10:])) if len(vals) > 10 else None
            for name, vals in mean_curves.items()}
    print(f"late just-learned accuracy: {late}")
    return 0


def _cmd_report(args) -> int:
    path = args.matrix or os.path.join(args.out, "matrix.csv")
    if not os.path.exists(path):
        raise UsageError(f"matrix file not found: {path}")
    mx = read_matrix_csv(path)
    doc = {
        "average_accuracy": avg_accuracy(mx),
        "forgetting": forgetting(mx) if mx.size >= 2 else None,
        "tasks": mx.size,
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _cmd_params(args) -> int:
    cfg = _load_config(args)
    report = count_trainable(cfg)
    for key, value in report.items():
        print(f"{key}: {value}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "run": _cmd_run,
    "ablate": _cmd_ablate,
    "probe": _cmd_probe,
    "report": _cmd_report,
    "params": _cmd_params,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except CbpNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
