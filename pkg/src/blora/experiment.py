"""The full comparison: pretrain a base, adapt it with LoRA and BLoRA, score both.

Every stage that produces weights writes a checkpoint and the next stage
reloads it, so a pipeline run and a sequence of separate CLI invocations see
the same f32-rounded tensors and produce identical reports.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .adapter import mean_delta
from .checkpoint import load_adapters, load_model, save_adapters, save_model
from .config import RunConfig
from .evaluation import EvalReport, evaluate, set_ter
from .model import FrozenModel, attach_adapters
from .sparsity import SparsityReport, analyze, column_names, format_table
from .tasks import standard_suite
from .tensor import RandomStream
from .training import adapt, pretrain

log = logging.getLogger(__name__)

METHODS = ("lora", "blora")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def build_suite(run: RunConfig, seed: int):
    return standard_suite(seed, run.suite, run.model.max_src_len, run.model.max_tgt_len)


def pretrain_base(run: RunConfig, seed: int, suite=None) -> tuple[FrozenModel, dict]:
    """Train a fresh base model; return it with per-language backward TERs."""
    suite = suite or build_suite(run, seed)
    root = RandomStream(seed)
    model = FrozenModel.initialize(run.model, root.child("init"))
    records = pretrain(model, suite.pretrain, run.pretrain, root.child("pretrain"))
    ters = {name: set_ter(model, None, exs) for name, exs in suite.backward.items()}
    return model, {"records": records, "backward_ter": ters}


def adapt_method(model: FrozenModel, suite, run: RunConfig, seed: int, method: str,
                 beta: float | None = None, use_validation: bool = True):
    """Fresh adapters (same initial draw for every method) trained on the code-switch split."""
    overrides = {"mode": method}
    if beta is not None:
        overrides["beta"] = beta
    cfg = run.training_for(seed, **overrides)
    adapters = attach_adapters(model, cfg.rank, cfg.alpha, RandomStream(seed).child("adapters"),
                               cfg.include_cross)
    valid = suite.cs_valid if use_validation else None
    best, info = adapt(model, adapters, suite.cs_train, valid, cfg)
    return best, info, cfg


def delta_norm(adapters) -> float:
    """Frobenius norm of all mean updates taken together."""
    return math.sqrt(sum(float((mean_delta(a).data ** 2).sum()) for a in adapters.values()))


def sparsity_pair(lora, blora, run: RunConfig) -> dict[str, SparsityReport]:
    return {
        "lora": analyze(lora, lora, run.sparsity, label="LoRA"),
        "blora": analyze(blora, lora, run.sparsity, label="BLoRA"),
    }


def _stage(name: str, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except Exception as e:  # re-raised with the stage attached
        raise StageError(name, e) from e
    log.info("%s finished in %.1fs", name, time.perf_counter() - t0)
    return out, time.perf_counter() - t0


def run_seed(run: RunConfig, seed: int, out_dir) -> dict:
    out = Path(out_dir) / f"seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    suite = build_suite(run, seed)
    meta = {"config": run.to_json_dict(), "seed": seed}
    timings = {}

    (model, pre_info), timings["pretrain"] = _stage("pretrain", pretrain_base, run, seed, suite)
    save_model(out / "base.blra", model, dict(meta, step=run.pretrain.total_steps, mode="pretrain"))
    model, _ = load_model(out / "base.blra")

    base_report, timings["eval/base"] = _stage("eval/base", evaluate, model, None, suite)
    reports = {"base": base_report}
    infos = {}
    adapters = {}
    for method in METHODS:
        (best, info, cfg), timings[f"adapt/{method}"] = _stage(
            f"adapt/{method}", adapt_method, model, suite, run, seed, method)
        path = out / f"{method}.blra"
        save_adapters(path, best, dict(meta, step=info["best_step"], mode=method, method=method,
                                       beta=cfg.beta if method == "blora" else None))
        adapters[method], _ = load_adapters(path)
        reports[method], timings[f"eval/{method}"] = _stage(
            f"eval/{method}", evaluate, model, adapters[method], suite, base=base_report)
        infos[method] = {"best_step": info["best_step"], "best_val_ter": info["best_val_ter"],
                         "records": info["records"]}

    sparsity, timings["analyze"] = _stage("analyze", sparsity_pair, adapters["lora"],
                                          adapters["blora"], run)
    result = {
        "seed": seed,
        "pretrain_backward_ter": pre_info["backward_ter"],
        "reports": {k: json.loads(v.to_json()) for k, v in reports.items()},
        "sparsity": {k: v.to_dict() for k, v in sparsity.items()},
        "delta_norm": {m: delta_norm(adapters[m]) for m in METHODS},
        "training": infos,
        "timings": timings,
    }
    for name, rep in reports.items():
        (out / f"report_{name}.json").write_text(rep.to_json() + "\n")
    (out / "sparsity.txt").write_text(format_table(list(sparsity.values())))
    return result


def run_experiment(run: RunConfig, out_dir) -> dict:
    """All seeds of ``run``; writes summary.md, summary.json and the resolved config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text())
    t0 = time.perf_counter()
    seeds = [run_seed(run, s, out) for s in run.seeds]
    summary = {"seeds": seeds, "config": run.to_json_dict(),
               "wall_seconds": time.perf_counter() - t0}
    (out / "summary.json").write_text(json.dumps(_timing_free(summary), indent=2, sort_keys=True) + "\n")
    (out / "summary.md").write_text(summary_markdown(summary, run))
    return summary


def _timing_free(summary: dict) -> dict:
    """Drop wall-clock fields so reruns of one config give identical files."""
    clean = dict(summary)
    clean.pop("wall_seconds", None)
    clean["seeds"] = [{k: v for k, v in s.items() if k != "timings"} for s in summary["seeds"]]
    return clean


# ---------------------------------------------------------------------------
# summary tables


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def table1(seeds: list[dict]) -> str:
    lines = ["| Model | In-domain | Backward | Δ |", "|---|---:|---:|---:|"]
    names = {"base": "Base", "lora": "LoRA", "blora": "BLoRA"}
    for key, label in names.items():
        reps = [EvalReport.from_dict(s["reports"][key]) for s in seeds]
        ind = np.mean([r.in_domain_ter for r in reps])
        back = np.mean([r.backward_avg for r in reps])
        delta = np.mean([r.delta for r in reps])
        d = "" if key == "base" else f"{'+' if delta >= 0 else ''}{_pct(delta)}"
        lines.append(f"| {label} | {_pct(ind)} | {_pct(back)} | {d} |")
    return "\n".join(lines) + "\n"


def table2(seeds: list[dict], run: RunConfig) -> str:
    cols = column_names(run.sparsity)
    keys = ["thresh", "adaptive", "top_energy", "hoyer"]
    if run.sparsity.extra_tau is not None:
        cols.insert(2, f"Adaptive@{run.sparsity.extra_tau:g}")
        keys.insert(2, "adaptive_extra")
    lines = ["| Adapter | " + " | ".join(cols) + " |", "|---|" + "---:|" * len(cols)]
    for key, label in (("lora", "LoRA"), ("blora", "BLoRA")):
        avg = [np.mean([s["sparsity"][key]["average"][k] for s in seeds]) for k in keys]
        lines.append(f"| {label} | " + " | ".join(f"{v:.4f}" for v in avg) + " |")
    return "\n".join(lines) + "\n"


def summary_markdown(summary: dict, run: RunConfig) -> str:
    seeds = summary["seeds"]
    parts = [
        "# Code-switch adaptation: LoRA vs BLoRA\n",
        f"Seeds: {', '.join(str(s['seed']) for s in seeds)}. "
        f"beta = {run.train.beta}, rank = {run.train.rank}, prior sigma = {run.train.sigma_p}. "
        "Token error rates in percent, posterior-mean decoding, averaged over seeds.\n",
        "## Adaptation and forgetting\n",
        table1(seeds),
        "\nΔ is the change of the backward average relative to the base model.\n",
        "## Sparsity of the mean updates\n",
        table2(seeds, run),
        "\n## Per seed\n",
    ]
    for s in seeds:
        parts.append(f"\n### Seed {s['seed']}\n\n")
        parts.append(table1([s]))
    if "wall_seconds" in summary:
        parts.append(f"\nWall time: {summary['wall_seconds']:.0f} s\n")
    return "".join(parts)


def beta_sweep(model: FrozenModel, suite, run: RunConfig, seed: int,
               betas=(0.0, 0.5, 5.0, 50.0)) -> dict[float, float]:
    """Mean-update norm of the final BLoRA iterate for each beta.

    No validation selection: the shrinkage is a property of the objective,
    so the last iterate is measured.
    """
    return {b: delta_norm(adapt_method(model, suite, run, seed, "blora", beta=b,
                                       use_validation=False)[0]) for b in betas}
