"""Token error rate, in-domain / backward evaluation and MC predictive decoding."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import FrozenModel, greedy_decode_batch
from .tasks import BOS, EOS, PAD, Example
from .tensor import RandomStream

REPORT_FIELDS = ("in_domain_ter", "backward", "backward_avg", "delta", "mode")


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref = list(ref)
    hyp = list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_error_rate(ref, hyp) -> float:
    if len(ref) == 0:
        raise ValueError("token_error_rate: reference is empty")
    return edit_distance(ref, hyp) / len(ref)


def corpus_ter(refs, hyps) -> float:
    """Pooled TER: total edits over total reference length."""
    edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps, strict=True))
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("corpus_ter: references are empty")
    return edits / total


@dataclass
class EvalReport:
    in_domain_ter: float
    backward: dict[str, float]
    backward_avg: float
    delta: float = 0.0
    mode: str = "mean"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        missing = set(REPORT_FIELDS) - set(d)
        if missing:
            raise ValueError(f"report is missing fields {sorted(missing)}")
        return cls(float(d["in_domain_ter"]), {k: float(v) for k, v in d["backward"].items()},
                   float(d["backward_avg"]), float(d["delta"]), str(d["mode"]))


def backward_average(per_language: dict[str, float]) -> float:
    if not per_language:
        raise ValueError("no backward sets")
    return sum(per_language.values()) / len(per_language)


def make_report(in_domain: float, backward: dict[str, float], mode: str = "mean",
                base: EvalReport | None = None) -> EvalReport:
    """Build a report; ``delta`` is the backward-average change versus ``base``.

    Without a base the report is its own reference and delta is 0.
    """
    avg = backward_average(backward)
    delta = 0.0 if base is None else avg - base.backward_avg
    for v in (in_domain, avg, delta, *backward.values()):
        if not math.isfinite(v):
            raise ValueError("report contains a non-finite value")
    return EvalReport(in_domain, dict(backward), avg, delta, mode)


def decode_set(model: FrozenModel, adapters, examples, mode: str = "mean",
               n_samples: int = 8, stream: RandomStream | None = None,
               batch_size: int = 250) -> list[list[int]]:
    srcs = [list(e.src) for e in examples]
    out: list[list[int]] = []
    for i in range(0, len(srcs), batch_size):
        chunk = srcs[i:i + batch_size]
        if mode == "mean" or not adapters:
            out += greedy_decode_batch(model, adapters, chunk, mode="mean")
        elif mode == "mc":
            s = (stream or RandomStream(0)).child(f"mc/{i}")
            out += predict_mc_batch(model, adapters, chunk, n_samples, s)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
    return out


def set_ter(model, adapters, examples, mode="mean", n_samples=8, stream=None) -> float:
    hyps = decode_set(model, adapters, examples, mode, n_samples, stream)
    return corpus_ter([e.tgt for e in examples], hyps)


def evaluate(model: FrozenModel, adapters, suite, mode: str = "mean", n_samples: int = 8,
             stream: RandomStream | None = None, base: EvalReport | None = None) -> EvalReport:
    """In-domain (code-switch test) and per-language backward TER."""
    stream = stream or RandomStream(0)
    label = "mean" if mode == "mean" else f"mc({n_samples})"
    in_dom = set_ter(model, adapters, suite.cs_test, mode, n_samples, stream.child("cs_test"))
    back = {name: set_ter(model, adapters, exs, mode, n_samples, stream.child(name))
            for name, exs in suite.backward.items()}
    return make_report(in_dom, back, label, base)


def average_probabilities(prob_rows) -> np.ndarray:
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in prob_rows]), axis=0)


def predict_mc_batch(model: FrozenModel, adapters, src_batch, n_samples: int,
                     stream: RandomStream, return_probs: bool = False):
    """Greedy decoding under the Monte Carlo predictive.

    ``n_samples`` adapter draws are taken once per call; at every step the
    softmax distributions of the sampled models are averaged and the argmax
    of the average is emitted.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = model.cfg
    n = len(src_batch)
    S = max(1, max(len(s) for s in src_batch))
    src = np.full((n, S), PAD, dtype=np.int64)
    for i, s in enumerate(src_batch):
        src[i, :len(s)] = s
    max_len = cfg.max_tgt_len - 1
    history = []
    with T.no_grad():
        draws = []
        for k in range(n_samples):
            w = model.resolve(adapters, "sampled", stream)
            memory, mask = model.encode(w, src)
            draws.append((w, memory, mask))
        tin = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        for _ in range(max_len):
            probs = []
            for w, memory, mask in draws:
                logits = model.decode(w, memory, mask, tin).data[:, -1]
                probs.append(T.softmax_rows(T.constant(logits)).data)
            avg = average_probabilities(probs)
            if return_probs:
                history.append(avg)
            nxt = avg.argmax(axis=1)
            nxt[done] = PAD
            done |= nxt == EOS
            tin = np.concatenate([tin, nxt[:, None]], axis=1)
            if done.all():
                break
    out = []
    for row in tin[:, 1:]:
        seq = []
        for t in row:
            if t in (EOS, PAD):
                break
            seq.append(int(t))
        out.append(seq)
    return (out, history) if return_probs else out


def predict_mc(model: FrozenModel, adapters, src, n_samples: int, stream: RandomStream) -> list[int]:
    return predict_mc_batch(model, adapters, [list(src)], n_samples, stream)[0]
