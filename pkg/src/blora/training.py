"""Objectives (LoRA cross-entropy, BLoRA ELBO), Adam with warmup, and the adaptation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import IsotropicPrior, kl_total
from .evaluation import set_ter
from .model import FrozenModel
from .tasks import PAD, batch_arrays
from .tensor import RandomStream, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainingConfig:
    beta: float = 0.5
    lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 100
    mode: str = "blora"
    rank: int = 32
    alpha: float | None = None  # None -> alpha = rank
    sigma_p: float = 0.01
    include_cross: bool = True
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("lora", "blora"):
            raise ValueError(f"mode must be 'lora' or 'blora', got {self.mode!r}")

    @property
    def prior(self) -> IsotropicPrior:
        return IsotropicPrior(0.0, self.sigma_p)


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 3e-3
    warmup_steps: int = 200
    total_steps: int = 4000
    batch_size: int = 32
    clip_norm: float = 1.0


def lr_at(step: int, config) -> float:
    """Linear warmup from 0 to ``config.lr``, then constant."""
    if step < 0 or step > config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    return config.lr


class Adam:
    """Adam (0.9, 0.999, 1e-8), no weight decay, over a fixed list of leaves."""

    def __init__(self, params: list[Tensor], b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float, bool]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        return [g * k for g in grads], norm, True
    return grads, norm, False


# ---------------------------------------------------------------------------
# objectives


def _token_ce(model, adapters, batch, mode, stream) -> Tensor:
    src, tin, tout = batch
    logits = model.forward(adapters, src, tin, mode, stream)
    V = logits.shape[-1]
    return T.cross_entropy(T.reshape(logits, (-1, V)), tout.reshape(-1), PAD)


def blora_loss(model: FrozenModel, adapters, batch, prior: IsotropicPrior, beta: float,
               stream: RandomStream) -> tuple[Tensor, dict[str, float]]:
    """Sampled-adapter cross-entropy plus beta times the normalized KL."""
    ce = _token_ce(model, adapters, batch, "sampled", stream)
    kl = kl_total(adapters, prior)
    loss = T.add(ce, T.scale(kl, beta)) if beta else ce
    return loss, {"ce": ce.item(), "kl": kl.item()}


def lora_loss(model: FrozenModel, adapters, batch) -> Tensor:
    """Cross-entropy with the deterministic update (alpha/r) mu_A mu_B."""
    return _token_ce(model, adapters, batch, "mean", None)


def trainable_leaves(adapters, mode: str) -> list[Tensor]:
    """Leaves optimized in ``mode``; log-sigma is frozen for plain LoRA."""
    leaves = []
    for pid in sorted(adapters):
        ad = adapters[pid]
        ad.A.log_sigma.requires_grad = mode == "blora"
        ad.B.log_sigma.requires_grad = mode == "blora"
        ad.A.mu.requires_grad = True
        ad.B.mu.requires_grad = True
        leaves += [ad.A.mu, ad.B.mu]
        if mode == "blora":
            leaves += [ad.A.log_sigma, ad.B.log_sigma]
    return leaves


def copy_adapters(adapters) -> dict:
    return {k: v.copy() for k, v in adapters.items()}


# ---------------------------------------------------------------------------
# loops


class BatchSampler:
    """Epoch-wise shuffled minibatches drawn from ``stream``."""

    def __init__(self, examples, batch_size: int, stream: RandomStream):
        self.examples = list(examples)
        self.batch_size = min(batch_size, len(self.examples))
        self.stream = stream
        self._order = np.array([], dtype=np.int64)

    def next(self):
        if len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.stream.permutation(len(self.examples))])
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size:]
        return [self.examples[i] for i in idx]


def adapt(model: FrozenModel, adapters, train_set, valid_set, config: TrainingConfig):
    """Train adapters on ``train_set``; return the best-validation snapshot and a log.

    The base model is frozen for the duration.  Validation TER (posterior-mean
    decoding) is measured at step 0 and every ``eval_every`` steps; the first
    snapshot attaining the lowest TER is returned.
    """
    model.set_trainable(False)
    root = RandomStream(config.seed)
    sampler = BatchSampler(train_set, config.batch_size, root.child("batches"))
    noise = root.child("noise")
    prior = config.prior
    leaves = trainable_leaves(adapters, config.mode)
    opt = Adam(leaves)
    cfg = model.cfg

    records: list[dict] = []
    best = copy_adapters(adapters)
    best_ter = set_ter(model, adapters, valid_set) if valid_set else math.inf
    best_step = 0
    records.append({"step": 0, "lr": 0.0, "ce": None, "kl": None, "val_ter": best_ter})

    for step in range(1, config.total_steps + 1):
        batch = batch_arrays(sampler.next(), cfg.max_src_len, cfg.max_tgt_len)
        for p in leaves:
            p.grad = None
        if config.mode == "blora":
            loss, parts = blora_loss(model, adapters, batch, prior, config.beta, noise)
        else:
            loss = lora_loss(model, adapters, batch)
            with T.no_grad():
                parts = {"ce": loss.item(), "kl": kl_total(adapters, prior).item()}
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        grads = T.backward(loss, leaves)
        grads, gnorm, clipped = clip_global_norm(grads, config.clip_norm)
        lr = lr_at(step, config)
        opt.step(grads, lr)

        if step % config.eval_every == 0 or step == config.total_steps:
            rec = {"step": step, "lr": lr, "ce": parts["ce"], "kl": parts["kl"],
                   "grad_norm": gnorm, "clipped": clipped}
            if valid_set:
                ter = set_ter(model, adapters, valid_set)
                rec["val_ter"] = ter
                if ter < best_ter:
                    best_ter, best_step = ter, step
                    best = copy_adapters(adapters)
            records.append(rec)
            log.info("step %d lr %.2e ce %.4f kl %.4f val_ter %s", step, lr, parts["ce"],
                     parts["kl"], rec.get("val_ter"))
    if not valid_set:
        best = copy_adapters(adapters)
        best_step = config.total_steps
    return best, {"records": records, "best_step": best_step, "best_val_ter": best_ter}


def pretrain(model: FrozenModel, examples, config: PretrainConfig, stream: RandomStream,
             on_eval=None, eval_every: int = 0) -> list[dict]:
    """Train every base weight on ``examples`` with teacher-forced cross-entropy."""
    model.set_trainable(True)
    leaves = [model.params[k] for k in sorted(model.params)]
    opt = Adam(leaves)
    sampler = BatchSampler(examples, config.batch_size, stream.child("batches"))
    cfg = model.cfg
    records = []
    try:
        for step in range(1, config.total_steps + 1):
            batch = batch_arrays(sampler.next(), cfg.max_src_len, cfg.max_tgt_len)
            for p in leaves:
                p.grad = None
            loss = _token_ce(model, None, batch, "mean", None)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            grads = T.backward(loss, leaves)
            grads, gnorm, _ = clip_global_norm(grads, config.clip_norm)
            opt.step(grads, lr_at(step, config))
            if step % 100 == 0 or step == config.total_steps:
                rec = {"step": step, "ce": value, "grad_norm": gnorm}
                if on_eval is not None and eval_every and step % eval_every == 0:
                    rec.update(on_eval(step))
                records.append(rec)
                log.info("pretrain step %d ce %.4f", step, value)
    finally:
        model.set_trainable(False)
    return records
