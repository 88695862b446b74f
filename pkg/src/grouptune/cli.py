"""Command-line entry point.

Commands:

* ``train``: one training run; writes ``report.csv``, ``summary.json`` and
  ``checkpoint.bin`` into the output directory.
* ``ablate``: the seven objective variants over the config's seed list;
  writes ``ablation.csv`` and ``ablation.png``.
* ``sweep``: projector-size x queue-size grid; writes ``sweep.csv`` and
  ``sweep.png``.
* ``report``: re-renders figures (``curves.png``, ``gap.png``) from a run
  directory's ``report.csv``.

Exit codes: 0 success, 2 configuration or validation problem, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import plots, trainer
from .config import (ConfigError, apply_overrides, build_splits, load_config,
                     parse_config)
from .model import save_checkpoint


def _load(args) -> "ExperimentConfig":
    if args.config is None:
        raise ConfigError("--config is required")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    apply_overrides(raw, args.override or [])
    if getattr(args, "seed", None) is not None:
        raw.setdefault("train", {})["seed"] = args.seed
    return parse_config(raw)


def _out_dir(args, config) -> str:
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(args) -> int:
    config = _load(args)
    data = build_splits(config)
    report, bundle, _ = trainer.run(config.train, data,
                                    pretrained=config.pretrained_checkpoint)
    out = _out_dir(args, config)
    report.save_csv(os.path.join(out, "report.csv"))
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(report.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_checkpoint(bundle, os.path.join(out, "checkpoint.bin"))
    print(f"run complete: final test accuracy "
          f"{report.final_test_accuracy():.4f}")
    print(f"wrote {out}/report.csv, {out}/summary.json, "
          f"{out}/checkpoint.bin")
    return 0


def cmd_ablate(args) -> int:
    config = _load(args)
    data = build_splits(config)
    result = trainer.run_ablation_suite(
        config.train, data, seeds=config.seeds,
        pretrained=config.pretrained_checkpoint)
    out = _out_dir(args, config)
    result.save_csv(os.path.join(out, "ablation.csv"))
    plots.render_ablation_bars(result, os.path.join(out, "ablation.png"))
    for row in result.rows:
        print(f"{row.name:>18}: mean {row.mean:.4f} std {row.std:.4f}")
    print(f"wrote {out}/ablation.csv, {out}/ablation.png")
    return 0


def parse_grid(spec: str):
    """'L=16,32;D=8,16' -> (projector dims [16, 32], queue sizes [8, 16])."""
    axes = {}
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        name, eq, values = part.partition("=")
        name = name.strip()
        if not eq or name not in ("L", "D"):
            raise ConfigError(
                f"grid axis must be 'L=...' or 'D=...', got {part!r}")
        try:
            axes[name] = [int(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"grid axis {part!r} has non-integer values")
        if not axes[name]:
            raise ConfigError(f"grid axis {part!r} is empty")
    if set(axes) != {"L", "D"}:
        raise ConfigError("grid must define both axes, e.g. 'L=16,32;D=8,16'")
    return axes["L"], axes["D"]


def cmd_sweep(args) -> int:
    config = _load(args)
    dims, sizes = parse_grid(args.grid)
    data = build_splits(config)
    result = trainer.run_sensitivity_sweep(
        config.train, dims, sizes, data,
        pretrained=config.pretrained_checkpoint)
    out = _out_dir(args, config)
    result.save_csv(os.path.join(out, "sweep.csv"))
    plots.render_sensitivity_heatmap(result, os.path.join(out, "sweep.png"))
    print(f"accuracy spread across the grid: {result.spread():.4f}")
    print(f"wrote {out}/sweep.csv, {out}/sweep.png")
    return 0


def cmd_report(args) -> int:
    csv_path = os.path.join(args.run_dir, "report.csv")
    if not os.path.isfile(csv_path):
        raise ConfigError(f"no report.csv in {args.run_dir!r}")
    report = trainer.report_from_csv(csv_path)
    curves = plots.render_accuracy_curves(
        report, os.path.join(args.run_dir, "curves.png"))
    gap = plots.render_gap_curve(report,
                                 os.path.join(args.run_dir, "gap.png"))
    print(f"wrote {curves}, {gap}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grouptune",
        description="Semi-supervised fine-tuning with a shared group-"
                    "contrast key store")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="path to the JSON experiment config")
        p.add_argument("--out", help="output directory (default: config "
                                     "out_dir)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="config override, e.g. train.base_lr=0.01 "
                            "(repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="override train.seed")

    p_train = sub.add_parser("train", help="run one training")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate", help="run the 7 objective variants")
    common(p_ablate, seed=False)
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="projector/queue size grid")
    common(p_sweep, seed=False)
    p_sweep.add_argument("--grid", default="L=16,32,64;D=8,16,32",
                         help="axes spec, e.g. 'L=16,32;D=8,16'")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="render figures from a run dir")
    p_report.add_argument("run_dir", help="directory holding report.csv")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
