"""Command-line entry points: run an experiment, write a partition manifest,
or compare finished runs (table + CSV + convergence figure)."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import config as cfgmod
from . import report, runner


def _add_run_parser(sub) -> None:
    p = sub.add_parser("run", help="execute one training run from a JSON config")
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="force deterministic mode (byte-stable metrics, worker-count invariant)",
    )
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--workers", type=int, default=None, help="override the worker pool size")
    p.add_argument("--label", default=None, help="override the run label used by compare")


def _add_partition_parser(sub) -> None:
    p = sub.add_parser("partition", help="write the client partition manifest for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True, help="output path for the manifest JSON")


def _add_compare_parser(sub) -> None:
    p = sub.add_parser("compare", help="compare rounds-to-target across finished runs")
    p.add_argument("dirs", nargs="+", help="two or more run directories")
    p.add_argument("--metric", choices=report.METRICS, default="val_acc")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--out", default=".", help="directory for comparison.csv / figures")
    p.add_argument("--no-figure", action="store_true", help="skip rendering the PNG")


def cmd_run(args) -> int:
    cfg = cfgmod.parse_config(Path(args.config).read_text())
    fed_overrides = {}
    if args.seed is not None:
        fed_overrides["seed"] = args.seed
    if args.deterministic:
        fed_overrides["deterministic"] = True
    if args.workers is not None:
        fed_overrides["workers"] = args.workers
    if fed_overrides:
        cfg = dataclasses.replace(
            cfg, federation=dataclasses.replace(cfg.federation, **fed_overrides)
        )
    if args.label is not None:
        cfg = dataclasses.replace(cfg, label=args.label)
    out = args.out or cfg.output_dir
    if out is None:
        print("error: no output directory (set --out or config output_dir)", file=sys.stderr)
        return 2
    summary = runner.execute_run(cfg, out, force=args.force)
    print(
        f"run complete: {summary['rounds_completed']} rounds, "
        f"final val_acc {summary['final_val_acc']:.4f}"
        + (
            f", target hit at round {summary['rounds_to_target']}"
            if summary["rounds_to_target"] is not None
            else ""
        )
    )
    print(f"artifacts in {out}")
    return 0


def cmd_partition(args) -> int:
    cfg = cfgmod.parse_config(Path(args.config).read_text())
    manifest = runner.write_partition_manifest(cfg, args.manifest)
    sizes = [len(v) for v in manifest.values()]
    print(
        f"wrote {args.manifest}: {len(manifest)} clients, "
        f"sizes min={min(sizes)} max={max(sizes)}"
    )
    return 0


def cmd_compare(args) -> int:
    cmp = report.compare(args.dirs, args.metric, args.target)
    print(cmp.render_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_comparison_csv(cmp, out / "comparison.csv")
    report.write_speedups_csv(cmp, out / "speedups.csv")
    report.write_curves_csv(args.dirs, args.metric, out / "curves.csv")
    written = ["comparison.csv", "speedups.csv", "curves.csv"]
    if not args.no_figure:
        report.plot_convergence(args.dirs, args.metric, out / "convergence.png", args.target)
        written.append("convergence.png")
    print(f"\nwrote {', '.join(written)} to {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Round-based federated learning simulator with weighted aggregation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)
    _add_partition_parser(sub)
    _add_compare_parser(sub)
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "partition":
            return cmd_partition(args)
        return cmd_compare(args)
    except (cfgmod.ConfigError, runner.RunDirectoryExists) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
