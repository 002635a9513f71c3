"""Norm of the mean BLoRA update as the KL weight grows.

Pretrains (or loads) one base model, adapts with each beta and reports
the Frobenius norm of all mean updates of the final iterate.

    python scripts/beta_sweep.py --betas 0 0.5 5 50
    python scripts/beta_sweep.py --base runs/default/seed0/base.blra
"""

import argparse
import json
import logging

from blora.checkpoint import load_model
from blora.config import load_config
from blora.experiment import beta_sweep, build_suite, pretrain_base


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base", help="existing base checkpoint; pretrained from scratch if omitted")
    p.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.5, 5.0, 50.0])
    p.add_argument("--out", help="JSON file for the norms")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run = load_config(args.config)
    suite = build_suite(run, args.seed)
    if args.base:
        model, _ = load_model(args.base)
    else:
        model, _ = pretrain_base(run, args.seed, suite)
    norms = beta_sweep(model, suite, run, args.seed, betas=tuple(args.betas))
    ref = norms[min(norms)]
    for beta in sorted(norms):
        print(f"beta={beta:<6g} ||dW||_F={norms[beta]:.4f}  ratio to beta={min(norms):g}: {norms[beta] / ref:.3f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({str(b): v for b, v in norms.items()}, f, indent=2)


if __name__ == "__main__":
    main()
