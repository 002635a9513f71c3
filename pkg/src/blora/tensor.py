"""Dense float64 tensors with a reverse-mode tape and a seeded normal stream.

Every differentiable operation is one of a fixed set of op kinds.  Each op
records a node (kind, parents, cached forward values) and the backward pass
dispatches on the kind through ``_BACKWARD``.  There are no closures on the
tape, so a node can be inspected after the fact.

Normal draws use the Box-Muller transform applied to uniform doubles from
numpy's PCG64 generator::

    z0 = sqrt(-2 ln u1) cos(2 pi u2),  z1 = sqrt(-2 ln u1) sin(2 pi u2)

with ``u1`` taken from (0, 1].  Results are reproducible within this
implementation for a given seed and draw sequence.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "RandomStream",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "reshape",
    "exp",
    "square",
    "relu",
    "softmax_rows",
    "layer_norm",
    "embedding",
    "cross_entropy",
    "sum_all",
    "concat",
    "backward",
    "gauss_draw",
]


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording tape nodes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus, when produced by an op, its tape node.

    Leaves created with ``requires_grad=True`` accumulate ``.grad`` when
    :func:`backward` is called on a scalar that depends on them.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "saved", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.saved: tuple = ()
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the enumerated ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], saved: tuple = ()) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = None
    out.parents = ()
    out.saved = ()
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.op = op
        out.parents = tuple(parents)
        out.saved = saved
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(data, "add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(data, "sub", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (numpy broadcasting allowed)."""
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(data, "mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), (float(c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, "add_scalar", (a,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    2-D operands give the ordinary product.  A 3-D operand is treated as a
    stack of matrices; a 2-D right operand is shared across the stack.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    return _make(np.matmul(a.data, b.data), "matmul", (a, b))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), (axes,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), (a.shape,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), (out,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), (mask,))


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` is an optional additive constant (e.g. large negative entries
    for disallowed positions) broadcast against ``x`` before normalizing.
    """
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, "softmax", (x,), (out,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-10) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    return _make(out, "layer_norm", (x, gain, bias), (xhat, inv))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: token id outside [0, {vocab})")
    return _make(table.data[ids], "embedding", (table,), (ids,))


def cross_entropy(logits: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-pad rows of ``logits`` [N x V]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected 2-D logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {targets.shape[0]} targets")
    keep = np.ones(n, dtype=bool) if pad_id is None else targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is padding, mean is undefined")
    kept = targets[keep]
    if kept.min() < 0 or kept.max() >= vocab:
        raise IndexError(f"cross_entropy: target outside [0, {vocab})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, kept].sum() / count
    return _make(np.asarray(loss), "cross_entropy", (logits,), (logp, rows, kept, count))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), "sum", (a,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    return _make(data, "concat", tuple(parts), (axis, sizes))


# ---------------------------------------------------------------------------
# backward rules, keyed by op kind


def _bw_add(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _bw_mul(node, g):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _bw_scale(node, g):
    return (g * node.saved[0],)


def _bw_add_scalar(node, g):
    return (g,)


def _bw_matmul(node, g):
    a, b = node.parents
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    if b.data.ndim == 2 and gb.ndim > 2:
        gb = gb.reshape(-1, *b.shape).sum(axis=0)
    return ga, gb


def _bw_transpose(node, g):
    axes = node.saved[0]
    return (np.transpose(g, np.argsort(axes)),)


def _bw_reshape(node, g):
    return (g.reshape(node.saved[0]),)


def _bw_exp(node, g):
    return (g * node.saved[0],)


def _bw_square(node, g):
    return (2.0 * g * node.parents[0].data,)


def _bw_relu(node, g):
    return (g * node.saved[0],)


def _bw_softmax(node, g):
    s = node.saved[0]
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _bw_layer_norm(node, g):
    x, gain, bias = node.parents
    xhat, inv = node.saved
    lead = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=lead)
    gbias = g.sum(axis=lead)
    gx_hat = g * gain.data
    gx = inv * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, ggain, gbias


def _bw_embedding(node, g):
    (table,) = node.parents
    (ids,) = node.saved
    gt = np.zeros_like(table.data)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def _bw_cross_entropy(node, g):
    logp, rows, kept, count = node.saved
    grad = np.zeros_like(logp)
    grad[rows] = np.exp(logp[rows])
    grad[rows, kept] -= 1.0
    return (grad * (float(g) / count),)


def _bw_sum(node, g):
    return (np.broadcast_to(g, node.parents[0].shape).copy(),)


def _bw_concat(node, g):
    axis, sizes = node.saved
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "add_scalar": _bw_add_scalar,
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "reshape": _bw_reshape,
    "exp": _bw_exp,
    "square": _bw_square,
    "relu": _bw_relu,
    "softmax": _bw_softmax,
    "layer_norm": _bw_layer_norm,
    "embedding": _bw_embedding,
    "cross_entropy": _bw_cross_entropy,
    "sum": _bw_sum,
    "concat": _bw_concat,
}


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every reachable leaf with
    ``requires_grad``.  When ``wrt`` is given, returns their gradients in
    order; tensors not on the path get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, _BACKWARD[node.op](node, g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# randomness


class RandomStream:
    """Seeded source of uniform and standard-normal draws.

    Uniforms come from numpy's PCG64; normals use Box-Muller on pairs of
    uniforms.  ``counter`` counts the normal/uniform values handed out.
    """

    algorithm = "PCG64 uniforms + Box-Muller normals"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.counter = 0

    def child(self, tag: str) -> "RandomStream":
        """Independent stream derived from this seed and a text tag."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(tag.encode()),))
        return RandomStream(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape).tolist()) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64))
        self.counter += n
        return low + (high - low) * self._gen.random(n).reshape(shape)

    def integers(self, low: int, high: int, size=None):
        if size is None:
            self.counter += 1
            return int(self._gen.integers(low, high))
        out = self._gen.integers(low, high, size=size)
        self.counter += out.size
        return out

    def normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        self.counter += n
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)


def gauss_draw(stream: RandomStream, shape) -> Tensor:
    """Tensor of i.i.d. N(0, 1) entries; advances ``stream``."""
    return Tensor(stream.normal(shape))
