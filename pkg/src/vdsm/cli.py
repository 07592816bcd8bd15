"""Command-line entry point: ``vdsm {train,eval,grid,synth,export-latent}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from . import experiment as exp
from . import metrics
from .errors import ConfigError, IngestionError, InvalidInputError, TrainingDivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--threads", type=int, default=1, help="worker threads for grid cells")


def build_parser():
    parser = argparse.ArgumentParser(prog="vdsm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train all seeds and write reports")
    _common(p)

    p = sub.add_parser("eval", help="evaluate checkpoints on a split")
    _common(p)
    p.add_argument("--checkpoint", action="append", required=True, type=Path)
    p.add_argument("--subset", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("grid", help="grid search over config fields")
    _common(p)
    p.add_argument("--grid", type=Path, help="JSON object mapping field -> list of values (default: DSM grid)")

    p = sub.add_parser("synth", help="write a synthetic dataset and its cluster labels")
    _common(p)

    p = sub.add_parser("export-latent", help="write per-record cluster posteriors")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--subset", choices=("train", "val", "test"), default="test")
    return parser


def _config(args, base=None):
    overrides = dict(exp.parse_override(o) for o in args.overrides)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    text = None
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        config = exp.ExperimentConfig.load(args.config)
    else:
        config = base or exp.ExperimentConfig(off_grid=["k"], k=3)
    if overrides:
        config = config.with_overrides(overrides)
        text = None
    return config, text


def cmd_train(args):
    config, text = _config(args)
    artifact = exp.train(config, out_dir=args.out, config_text=text)
    print(metrics.reports_to_table([artifact.report], config.dataset.upper()), end="")
    print(f"wrote {args.out}")


def cmd_eval(args):
    model, _ = exp.SurvivalModel.load(args.checkpoint[0])
    config = model.config
    if args.config is not None or args.overrides:
        config, _ = _config(args, base=config)
    split = exp.make_split(config)
    report = exp.evaluate(args.checkpoint, split, subset=args.subset)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.csv").write_text(metrics.reports_to_csv([report]))
    table = metrics.reports_to_table([report], config.dataset.upper())
    (args.out / "report.txt").write_text(table)
    print(table, end="")


def cmd_grid(args):
    config, _ = _config(args)
    grid = exp.DSM_GRID
    if args.grid is not None:
        try:
            grid = json.loads(args.grid.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read grid {args.grid}: {err}") from err
    results = exp.grid_search(config, grid, threads=args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "grid.csv").write_text(exp.grid_table(results))
    ok = [r for r in results if r.error is None]
    if ok:
        best = config.with_overrides(ok[0].params)
        (args.out / "best_config.json").write_text(best.to_json())
        print(f"best: {json.dumps(ok[0].params, sort_keys=True)} val C^td@50% = {ok[0].score:.4f}")
    failed = len(results) - len(ok)
    if failed:
        print(f"{failed} grid cell(s) failed; see grid.csv", file=sys.stderr)


def cmd_synth(args):
    config, _ = _config(args)
    records, labels = exp.load_dataset(config.with_overrides({"dataset": "synthetic"}))
    args.out.mkdir(parents=True, exist_ok=True)
    data_mod.write_records_csv(records, args.out / "records.csv")
    data_mod.write_labels_csv(records.ids, labels, args.out / "labels.csv")
    print(f"wrote {len(records)} records to {args.out}")


def cmd_export_latent(args):
    model, _ = exp.SurvivalModel.load(args.checkpoint)
    config = model.config
    if args.config is not None or args.overrides:
        config, _ = _config(args, base=config)
    split = exp.make_split(config)
    args.out.mkdir(parents=True, exist_ok=True)
    path = exp.export_latent(model, getattr(split, args.subset), args.out / "latent.csv")
    print(f"wrote {path}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "synth": cmd_synth,
    "export-latent": cmd_export_latent,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except TrainingDivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except IngestionError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, InvalidInputError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
