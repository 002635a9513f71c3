"""Run the three-seed LoRA vs BLoRA experiment and print the summary tables.

    python scripts/run_experiment.py --out runs/default
    python scripts/run_experiment.py --config my.cfg --set train.beta=5 --out runs/beta5
"""

import argparse
import logging
from pathlib import Path

from blora.config import load_config
from blora.experiment import run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key=value run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--out", default="runs/default")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = dict(kv.split("=", 1) for kv in args.set)
    run = load_config(args.config, overrides)
    run_experiment(run, args.out)
    print((Path(args.out) / "summary.md").read_text(), end="")


if __name__ == "__main__":
    main()
