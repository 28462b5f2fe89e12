"""Command-line entry point: ``contaqa <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .checkpoint import CheckpointError, inspect_checkpoint, load_checkpoint
from .runner import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    RunConfig,
    export_plot_data,
    load_config,
    recompute_metrics,
    resume_from_checkpoint,
    run_ablation_suite,
    run_experiment,
)
from .synthbench import VARIANTS, resolve_variant

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    data = config.model_dump()
    if getattr(args, "variant", None):
        data["variant"] = args.variant
    if getattr(args, "seeds", None):
        data["suite"]["order_seeds"] = args.seeds
    try:
        return RunConfig.model_validate(data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_run(args) -> int:
    config = _config(args)
    out = run_experiment(config, args.out, jobs=args.jobs)
    print(json.dumps(json.loads((out / "metrics.json").read_text())["mean"], sort_keys=True))
    print(out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _config(args)
    variants = args.variants.split(",") if args.variants else None
    if variants:
        try:
            variants = [resolve_variant(v) for v in variants]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    root, summary = run_ablation_suite(config, args.out, variants, jobs=args.jobs)
    for name, row in summary["variants"].items():
        cells = "  ".join(f"{k}={row[k]:.4f}" for k in ("AP", "NBT", "MF") if k in row)
        print(f"{name:<10} {cells}")
    print(root)
    return EXIT_OK


def cmd_metrics(args) -> int:
    print(json.dumps(recompute_metrics(args.target), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    for kind, path in export_plot_data(args.run_dir, args.out).items():
        print(f"{kind}: {path}")
    return EXIT_OK


def cmd_checkpoint(args) -> int:
    if args.action == "inspect":
        print(json.dumps(inspect_checkpoint(args.path), indent=2, sort_keys=True, default=str))
    elif args.action == "verify":
        load_checkpoint(args.path)
        print(f"{args.path}: ok")
    else:
        result = resume_from_checkpoint(args.path, args.out)
        print(f"order seed {result['seed']} finished")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="contaqa",
        description=f"Continual score-regression experiments. Relative output paths live under "
                    f"${OUTPUT_ROOT_ENV} (default ./runs).",
    )
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True):
        sp.add_argument("--config", help="JSON run config; defaults apply when omitted")
        if variant:
            sp.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
        sp.add_argument("--seeds", type=int, nargs="+", help="order seeds, overriding the config")
        sp.add_argument("--out", help="run directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel order-seed workers")

    sp = sub.add_parser("run", help="run one variant over every order seed")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="run every ablation variant")
    common(sp, variant=False)
    sp.add_argument("--variants", help="comma-separated subset")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("metrics", help="recompute AP/NBT/MF from saved matrices")
    sp.add_argument("target", help="run directory or matrix CSV")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("export-plots", help="write curve and scatter CSVs for a run")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="destination (default <run_dir>/plots)")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("checkpoint", help="inspect, verify or resume a checkpoint")
    sp.add_argument("action", choices=("inspect", "verify", "resume"))
    sp.add_argument("path")
    sp.add_argument("--out", help="run directory for resumed outputs")
    sp.set_defaults(func=cmd_checkpoint)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
