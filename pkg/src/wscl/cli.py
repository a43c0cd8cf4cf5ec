"""Command-line entry point: run / grid / report."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import config as config_mod
from . import runner


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="wscl",
        description="Weakly supervised continual-learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one config across its seeds")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
    p_run.add_argument("--out", default=None, help="output directory")

    p_grid = sub.add_parser("grid", help="grid search on the validation split")
    p_grid.add_argument("--config", required=True)
    p_grid.add_argument("--grid", required=True)
    p_grid.add_argument("--out", default=None)

    p_rep = sub.add_parser("report", help="tabulate records under a directory")
    p_rep.add_argument("--in", dest="in_dir", required=True)

    args = parser.parse_args(argv)

    if args.command == "run":
        cfg = config_mod.load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(args.seed,))
        record = runner.run(cfg, out_dir=args.out)
        print(
            f"{record['method']} m={record['buffer_size']} p_s={record['p_s']}: "
            f"A_f = {100 * record['a_f_mean']:.2f} ± {100 * record['a_f_std']:.2f}"
        )
        return 0

    if args.command == "grid":
        cfg = config_mod.load_config(args.config)
        grid = config_mod.load_grid(args.grid)
        best, records = runner.grid_search(cfg, grid, out_dir=args.out)
        print("best grid point:")
        for key, value in sorted(records[0]["assignment"].items()):
            print(f"  {key} = {value}")
        print(f"validation A_f = {100 * records[0]['a_f_mean']:.2f}")
        return 0

    records = runner.load_records(args.in_dir)
    csv_text, aligned = runner.report(records)
    print(aligned, end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
