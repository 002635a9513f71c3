"""Command-line entry point: ``blora {pretrain,adapt,eval,analyze,experiment}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_adapters, load_model, save_adapters, save_model
from .config import ConfigError, RunConfig, load_config
from .evaluation import evaluate
from .experiment import StageError, adapt_method, build_suite, pretrain_base, run_experiment, sparsity_pair
from .sparsity import format_table
from .tensor import RandomStream
from .training import TrainingDiverged

log = logging.getLogger("blora")


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
        overrides["seeds"] = str(args.seed)
    return load_config(args.config, overrides)


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _meta(run: RunConfig, **extra) -> dict:
    return {"config": run.to_json_dict(), "seed": run.seed, **extra}


def cmd_pretrain(args) -> None:
    run = _config(args)
    model, info = pretrain_base(run, run.seed)
    out = _out(args.out)
    save_model(out, model, _meta(run, step=run.pretrain.total_steps, mode="pretrain"))
    out.with_suffix(".config.txt").write_text(run.to_text())
    for name, ter in info["backward_ter"].items():
        print(f"{name}\tTER {100 * ter:.2f}%")


def cmd_adapt(args) -> None:
    run = _config(args)
    method = args.method
    if method == "lora" and args.beta is not None:
        log.warning("--beta is ignored for method=lora")
    beta = args.beta if method == "blora" else None
    model, _ = load_model(args.base)
    suite = build_suite(run, run.seed)
    best, info, cfg = adapt_method(model, suite, run, run.seed, method, beta=beta)
    out = _out(args.out)
    save_adapters(out, best, _meta(run, step=info["best_step"], mode=method, method=method,
                                   beta=cfg.beta if method == "blora" else None))
    out.with_suffix(".log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in info["records"]))
    print(f"{method}: best validation TER {100 * info['best_val_ter']:.2f}% at step {info['best_step']}")


def cmd_eval(args) -> None:
    run = _config(args)
    model, _ = load_model(args.base)
    suite = build_suite(run, run.seed)
    base = evaluate(model, None, suite)
    report = base
    if args.adapters:
        adapters, _ = load_adapters(args.adapters)
        report = evaluate(model, adapters, suite, mode=args.mode, n_samples=args.n_samples,
                          stream=RandomStream(run.seed).child("eval"), base=base)
    text = report.to_json()
    if args.out:
        _out(args.out).write_text(text + "\n")
    print(text)


def cmd_analyze(args) -> None:
    run = _config(args)
    lora, _ = load_adapters(args.lora)
    blora, _ = load_adapters(args.blora)
    reports = sparsity_pair(lora, blora, run)
    table = format_table(list(reports.values()))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sparsity.txt").write_text(table)
        (out / "sparsity.json").write_text(
            json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True) + "\n")
    print(table, end="")


def cmd_experiment(args) -> None:
    run = _config(args)
    out = args.out or run.out
    run_experiment(run, out)
    print((Path(out) / "summary.md").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blora", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--seed", type=int, help="overrides seed (and seeds) from the config")

    sp = sub.add_parser("pretrain", help="train the base model")
    common(sp)
    sp.add_argument("--out", required=True, help="base checkpoint to write")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="train adapters on the code-switch split")
    sp.add_argument("base", help="base checkpoint")
    common(sp)
    sp.add_argument("--method", choices=("lora", "blora"), default="blora")
    sp.add_argument("--beta", type=float, help="KL weight for blora (default from config, 0.5)")
    sp.add_argument("--out", required=True, help="adapter checkpoint to write")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="in-domain and backward TER report")
    sp.add_argument("base", help="base checkpoint")
    sp.add_argument("adapters", nargs="?", help="adapter checkpoint; omit to score the base")
    common(sp)
    sp.add_argument("--mode", choices=("mean", "mc"), default="mean")
    sp.add_argument("--n-samples", type=int, default=8, help="adapter draws for --mode mc")
    sp.add_argument("--out", help="report JSON to write")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="sparsity table of LoRA vs BLoRA updates")
    sp.add_argument("lora", help="LoRA adapter checkpoint (also the adaptive baseline)")
    sp.add_argument("blora", help="BLoRA adapter checkpoint")
    common(sp)
    sp.add_argument("--out", help="directory for sparsity.txt and sparsity.json")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("experiment", help="pretrain, adapt both methods, evaluate, analyze")
    common(sp)
    sp.add_argument("--out", help="output directory (default from config)")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "n_samples", 1) < 1:
        print("error: --n-samples must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (ConfigError, CheckpointError, StageError, TrainingDiverged, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
