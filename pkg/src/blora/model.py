"""A small pre-norm transformer encoder-decoder with adaptable q/k projections.

Projection weights are stored as ``W`` in R^{d_out x d_in} and applied as
``x @ W.T``.  Every attention block exposes its query and key projections
under ids like ``enc.0.self.q`` or ``dec.1.cross.k``; an :class:`AdapterSet`
maps those ids to :class:`~blora.adapter.LowRankAdapter` objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import LowRankAdapter, init_adapter, merge
from .tasks import BOS, EOS, PAD
from .tensor import RandomStream, Tensor

NEG_INF = -1e30

AdapterSet = dict  # projection id -> LowRankAdapter


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 48
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 64
    max_src_len: int = 24
    max_tgt_len: int = 26

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers",
                     "d_ff", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def sinusoidal_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def qk_projection_ids(cfg: ModelConfig, include_cross: bool = True) -> list[str]:
    ids = []
    for l in range(cfg.n_enc_layers):
        ids += [f"enc.{l}.self.q", f"enc.{l}.self.k"]
    for l in range(cfg.n_dec_layers):
        ids += [f"dec.{l}.self.q", f"dec.{l}.self.k"]
        if include_cross:
            ids += [f"dec.{l}.cross.q", f"dec.{l}.cross.k"]
    return ids


def init_params(cfg: ModelConfig, stream: RandomStream) -> dict[str, np.ndarray]:
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, np.ndarray] = {}

    def lin(name, d_out, d_in):
        p[name] = stream.normal((d_out, d_in)) / math.sqrt(d_in)

    def norm(name):
        p[name + ".g"] = np.ones(d)
        p[name + ".b"] = np.zeros(d)

    def ffn(prefix):
        lin(prefix + ".ff1.W", f, d)
        p[prefix + ".ff1.b"] = np.zeros(f)
        lin(prefix + ".ff2.W", d, f)
        p[prefix + ".ff2.b"] = np.zeros(d)

    p["embed"] = stream.normal((cfg.vocab_size, d))
    for l in range(cfg.n_enc_layers):
        pre = f"enc.{l}"
        norm(pre + ".ln1")
        for w in "qkvo":
            lin(f"{pre}.self.{w}", d, d)
        norm(pre + ".ln2")
        ffn(pre)
    for l in range(cfg.n_dec_layers):
        pre = f"dec.{l}"
        norm(pre + ".ln1")
        for w in "qkvo":
            lin(f"{pre}.self.{w}", d, d)
        norm(pre + ".ln2")
        for w in "qkvo":
            lin(f"{pre}.cross.{w}", d, d)
        norm(pre + ".ln3")
        ffn(pre)
    norm("enc.ln_f")
    norm("dec.ln_f")
    lin("out", cfg.vocab_size, d)
    return p


class FrozenModel:
    """Base weights plus config.  Weights are leaves that train only during pretraining."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = {k: Tensor(np.array(v, dtype=np.float64), name=k) for k, v in params.items()}
        self.pos = sinusoidal_table(max(cfg.max_src_len, cfg.max_tgt_len), cfg.d_model)

    @classmethod
    def initialize(cls, cfg: ModelConfig, stream: RandomStream) -> "FrozenModel":
        return cls(cfg, init_params(cfg, stream))

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def qk_ids(self, include_cross: bool = True) -> list[str]:
        return qk_projection_ids(self.cfg, include_cross)

    # -- weight resolution ------------------------------------------------

    def resolve(self, adapters: AdapterSet | None, mode: str = "mean",
                stream: RandomStream | None = None) -> dict[str, Tensor]:
        """Effective weights: base weights with adapted projections merged.

        In sampled mode every adapter gets one noise draw, in sorted id order.
        """
        if not adapters:
            return self.params
        weights = dict(self.params)
        for pid in sorted(adapters):
            if pid not in self.params:
                raise KeyError(f"no projection named {pid!r} in the model")
            weights[pid] = merge(self.params[pid], adapters[pid], mode, stream)
        return weights

    # -- building blocks --------------------------------------------------

    def _check_tokens(self, ids: np.ndarray, max_len: int, what: str) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"{what}: token id outside [0, {self.cfg.vocab_size})")
        if ids.shape[-1] > max_len:
            raise ValueError(f"{what}: length {ids.shape[-1]} exceeds maximum {max_len}")

    def _embed(self, w, ids: np.ndarray) -> Tensor:
        x = T.embedding(w["embed"], ids)
        return T.add(x, T.constant(self.pos[: ids.shape[1]]))

    def _ln(self, w, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, w[name + ".g"], w[name + ".b"])

    def _attention(self, w, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H, dh = self.cfg.n_heads, self.cfg.head_dim

        def heads(x, n):
            x = T.reshape(x, (B, n, H, dh))
            return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B * H, n, dh))

        q = heads(T.matmul(xq, T.transpose(w[prefix + ".q"])), Tq)
        k = heads(T.matmul(xkv, T.transpose(w[prefix + ".k"])), Tk)
        v = heads(T.matmul(xkv, T.transpose(w[prefix + ".v"])), Tk)
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        probs = T.softmax_rows(scores, mask)
        ctx = T.reshape(T.matmul(probs, v), (B, H, Tq, dh))
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
        return T.matmul(ctx, T.transpose(w[prefix + ".o"]))

    def _ffn(self, w, prefix: str, x: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(x, T.transpose(w[prefix + ".ff1.W"])), w[prefix + ".ff1.b"]))
        return T.add(T.matmul(h, T.transpose(w[prefix + ".ff2.W"])), w[prefix + ".ff2.b"])

    def _key_mask(self, pad: np.ndarray, q_len: int) -> np.ndarray:
        # pad: (B, S) bool -> additive (B*H, 1, S)
        B, S = pad.shape
        m = np.where(pad, NEG_INF, 0.0)[:, None, None, :]
        m = np.broadcast_to(m, (B, self.cfg.n_heads, 1, S))
        return m.reshape(B * self.cfg.n_heads, 1, S)

    # -- encoder / decoder ------------------------------------------------

    def encode(self, w, src: np.ndarray) -> tuple[Tensor, np.ndarray]:
        mask = self._key_mask(src == PAD, src.shape[1])
        x = self._embed(w, src)
        for l in range(self.cfg.n_enc_layers):
            pre = f"enc.{l}"
            h = self._ln(w, pre + ".ln1", x)
            x = T.add(x, self._attention(w, pre + ".self", h, h, mask))
            x = T.add(x, self._ffn(w, pre, self._ln(w, pre + ".ln2", x)))
        return self._ln(w, "enc.ln_f", x), mask

    def decode(self, w, memory: Tensor, mem_mask: np.ndarray, tin: np.ndarray) -> Tensor:
        Tn = tin.shape[1]
        causal = np.triu(np.full((Tn, Tn), NEG_INF), k=1)
        self_mask = causal
        x = self._embed(w, tin)
        for l in range(self.cfg.n_dec_layers):
            pre = f"dec.{l}"
            h = self._ln(w, pre + ".ln1", x)
            x = T.add(x, self._attention(w, pre + ".self", h, h, self_mask))
            h = self._ln(w, pre + ".ln2", x)
            x = T.add(x, self._attention(w, pre + ".cross", h, memory, mem_mask))
            x = T.add(x, self._ffn(w, pre, self._ln(w, pre + ".ln3", x)))
        x = self._ln(w, "dec.ln_f", x)
        return T.matmul(x, T.transpose(w["out"]))

    def forward(self, adapters: AdapterSet | None, src, tin, mode: str = "mean",
                stream: RandomStream | None = None) -> Tensor:
        """Teacher-forced logits.

        ``src`` and ``tin`` are (B, S) / (B, T) id arrays, or 1-D for a single
        example in which case the result is (T, V).
        """
        src = np.asarray(src, dtype=np.int64)
        tin = np.asarray(tin, dtype=np.int64)
        single = src.ndim == 1
        if single:
            src, tin = src[None], tin[None]
        self._check_tokens(src, self.cfg.max_src_len, "source")
        self._check_tokens(tin, self.cfg.max_tgt_len, "target")
        w = self.resolve(adapters, mode, stream)
        memory, mem_mask = self.encode(w, src)
        logits = self.decode(w, memory, mem_mask, tin)
        if single:
            logits = T.reshape(logits, logits.shape[1:])
        return logits


def forward(model: FrozenModel, adapters, mode, src, tin, stream=None) -> Tensor:
    return model.forward(adapters, src, tin, mode, stream)


def attach_adapters(model: FrozenModel, r: int, alpha: float | None, stream: RandomStream,
                    include_cross: bool = True) -> AdapterSet:
    """One fresh adapter per q/k projection; ``alpha=None`` means alpha = r."""
    d = model.cfg.d_model
    if r < 1 or r > d:
        raise ValueError(f"adapter rank must lie in [1, {d}], got {r}")
    alpha = float(r) if alpha is None else alpha
    return {pid: init_adapter(d, d, r, alpha, stream.child(pid), target=pid)
            for pid in model.qk_ids(include_cross)}


def greedy_decode_batch(model: FrozenModel, adapters: AdapterSet | None, src_batch,
                        max_len: int | None = None, mode: str = "mean",
                        stream: RandomStream | None = None) -> list[list[int]]:
    """Argmax decoding for a batch of sources (lists of ids).

    Adapter weights are resolved once, so a sampled mode uses one draw for the
    whole decode.  Returned sequences exclude BOS and the terminating EOS.
    """
    cfg = model.cfg
    max_len = cfg.max_tgt_len - 1 if max_len is None else min(max_len, cfg.max_tgt_len - 1)
    n = len(src_batch)
    S = max(1, max(len(s) for s in src_batch))
    src = np.full((n, S), PAD, dtype=np.int64)
    for i, s in enumerate(src_batch):
        src[i, :len(s)] = s
    if not any(len(s) for s in src_batch):
        src[:, 0] = EOS
    model._check_tokens(src, cfg.max_src_len, "source")
    with T.no_grad():
        w = model.resolve(adapters, mode, stream)
        memory, mem_mask = model.encode(w, src)
        tin = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        for _ in range(max_len):
            logits = model.decode(w, memory, mem_mask, tin).data[:, -1]
            nxt = logits.argmax(axis=1)
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
    return out


def greedy_decode(model: FrozenModel, adapters: AdapterSet | None, src, max_len=None,
                  mode: str = "mean", stream: RandomStream | None = None) -> list[int]:
    return greedy_decode_batch(model, adapters, [list(src)], max_len, mode, stream)[0]
