"""Tape-based reverse-mode autodiff over numpy tensors.

Operations record onto the active :class:`Tape` only when some input
requires a gradient.  Outside a tape every op is a plain forward
computation, which is how generator forwards run without building a graph.
Cut points are explicit: wrap a value in a fresh :func:`leaf` and the graph
upstream of it is not part of the tape.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("telelora_tape", default=None)


class Var:
    __slots__ = ("value", "requires_grad", "parents", "vjp", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) else _float(value)
        self.requires_grad = requires_grad
        self.parents: tuple[Var, ...] = ()
        self.vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def leaf(value, name: str | None = None) -> Var:
    """Independent variable; gradients accumulate here and stop here."""
    return Var(value, requires_grad=True, name=name)


def _float(value) -> np.ndarray:
    arr = np.asarray(value)
    return arr if arr.dtype == np.float64 else arr.astype(np.float32, copy=False)


def const(value) -> Var:
    """Wrap ``value`` without tracking; float64 stays float64, anything else becomes float32."""
    return value if isinstance(value, Var) else Var(_float(value))


class Tape:
    """Records differentiable ops in creation order (a topological order)."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def gradients(
        self,
        roots: Sequence[Var],
        seeds: Sequence[np.ndarray],
        leaves: Iterable[Var],
    ) -> list[np.ndarray]:
        leaves = list(leaves)
        grads: dict[int, np.ndarray] = {}
        for r, s in zip(roots, seeds):
            s = np.asarray(s, dtype=r.value.dtype)
            if s.shape != r.shape:
                raise ValueError(f"seed shape {s.shape} does not match output shape {r.shape}")
            if r.requires_grad:
                _accumulate(grads, r, s)
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            if node.vjp is not None:
                for p, pg in zip(node.parents, node.vjp(g)):
                    if pg is not None and p.requires_grad:
                        _accumulate(grads, p, pg)
        out = []
        for lf in leaves:
            g = grads.get(id(lf))
            out.append(np.zeros_like(lf.value) if g is None else g.astype(lf.value.dtype, copy=False))
        return out


def _accumulate(grads: dict[int, np.ndarray], v: Var, g: np.ndarray) -> None:
    if g.shape != v.shape:
        raise ValueError(f"gradient shape {g.shape} does not match value shape {v.shape}")
    prev = grads.get(id(v))
    grads[id(v)] = g if prev is None else prev + g


def current_tape() -> Tape | None:
    return _ACTIVE.get()


def backward(root: Var, leaves: Mapping[str, Var] | Sequence[Var], tape: Tape | None = None):
    """Gradient of scalar ``root`` with respect to each leaf.

    Leaves unreachable from ``root`` get zero gradients.  ``leaves`` may be
    a mapping (returns a dict with the same keys) or a sequence.
    """
    if root.value.size != 1 or root.ndim != 0:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = tape or current_tape()
    if tape is None:
        raise RuntimeError("no tape recorded this graph")
    items = list(leaves.values()) if isinstance(leaves, Mapping) else list(leaves)
    grads = tape.gradients([root], [np.ones((), dtype=root.value.dtype)], items)
    if isinstance(leaves, Mapping):
        return dict(zip(leaves.keys(), grads))
    return grads


def vjp_through(fn: Callable, inputs: Mapping[str, np.ndarray], upstream: Sequence[np.ndarray]):
    """Re-run ``fn`` on a fresh tape and pull ``upstream`` back to ``inputs``.

    ``fn`` receives leaf Vars keyed like ``inputs`` and returns a Var or a
    sequence of Vars matching ``upstream``.
    """
    with Tape() as tape:
        leaves = {k: leaf(v, name=k) for k, v in inputs.items()}
        outs = fn(leaves)
    if isinstance(outs, Var):
        outs = [outs]
    if len(outs) != len(upstream):
        raise ValueError(f"fn returned {len(outs)} outputs for {len(upstream)} upstream gradients")
    grads = tape.gradients(list(outs), list(upstream), leaves.values())
    return dict(zip(leaves.keys(), grads))


def _record(value: np.ndarray, parents: Sequence[Var], vjp: Callable) -> Var:
    out = Var(value)
    tape = _ACTIVE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    a, b = const(a), const(b)
    y = a.value + b.value
    return _record(y, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    y = a.value - b.value
    return _record(y, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    y = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        )

    return _record(y, (a, b), vjp)


def scale(a: Var, c: float) -> Var:
    a = const(a)
    y = a.value * np.asarray(c, dtype=a.value.dtype)
    return _record(y, (a,), lambda g: (g * np.asarray(c, dtype=g.dtype),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Var) -> Var:
    """Gaussian-error linear unit, tanh approximation."""
    x = const(x)
    v = x.value
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    y = 0.5 * v * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _record(y, (x,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Var, shape: Sequence[int]) -> Var:
    x = const(x)
    y = x.value.reshape(shape)
    return _record(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Var, axes: Sequence[int]) -> Var:
    x = const(x)
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _record(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Var, a1: int, a2: int) -> Var:
    x = const(x)
    axes = list(range(x.ndim))
    a1, a2 = a1 % x.ndim, a2 % x.ndim
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def split(x: Var, sections: int | Sequence[int], axis: int = -1) -> list[Var]:
    """Split along ``axis`` into equal parts (int) or the given sizes."""
    x = const(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ValueError(f"axis of length {n} not divisible into {sections} parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ValueError(f"split sizes {sizes} do not sum to {n}")
    bounds = np.cumsum([0] + sizes)
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, hi)
        idx = tuple(idx)

        def vjp(g, idx=idx):
            full = np.zeros_like(x.value, dtype=g.dtype)
            full[idx] = g
            return (full,)

        outs.append(_record(x.value[idx], (x,), vjp))
    return outs


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    xs = [const(x) for x in xs]
    axis = axis % xs[0].ndim
    y = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(y, xs, vjp)


def broadcast_to(x: Var, shape: Sequence[int]) -> Var:
    x = const(x)
    y = np.ascontiguousarray(np.broadcast_to(x.value, tuple(shape)))
    return _record(y, (x,), lambda g: (_unbroadcast(g, x.shape),))


def take(table: Var, ids: np.ndarray) -> Var:
    """Row gather ``table[ids]`` (embedding lookup)."""
    table = const(table)
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(table.value, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _record(table.value[ids], (table,), vjp)


def gather_last(x: Var, index: np.ndarray) -> Var:
    """Select ``x[..., i, :]`` per leading batch row: ``x[b, index[b]]``."""
    x = const(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def vjp(g):
        full = np.zeros_like(x.value, dtype=g.dtype)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _record(x.value[rows, index], (x,), vjp)


def select_rows(x: Var, index: np.ndarray, axis: int = 0) -> Var:
    x = const(x)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim

    def vjp(g):
        full = np.zeros_like(x.value, dtype=g.dtype)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _record(np.take(x.value, index, axis=axis), (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Var, axis=None, keepdims: bool = False) -> Var:
    x = const(x)
    y = np.asarray(x.value.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(y, (x,), vjp)


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    x = const(x)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    n = math.prod(x.shape[a] for a in axes)
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# diagonals


def diagonal(x: Var, axis1: int, axis2: int) -> Var:
    """Diagonal over two equal-length axes, moved to the last position."""
    x = const(x)
    a1, a2 = axis1 % x.ndim, axis2 % x.ndim
    y = np.diagonal(x.value, axis1=a1, axis2=a2).copy()

    def vjp(g):
        return (_embed(g, a1, a2, x.ndim),)

    return _record(y, (x,), vjp)


def _embed(d: np.ndarray, a1: int, a2: int, ndim: int) -> np.ndarray:
    n = d.shape[-1]
    out = np.zeros(d.shape[:-1] + (n, n), dtype=d.dtype)
    k = np.arange(n)
    out[..., k, k] = d
    lo, hi = sorted((a1, a2))
    return np.moveaxis(out, (-2, -1), (lo, hi))


def diag_embed(d: Var, axis1: int, axis2: int) -> Var:
    """Inverse of :func:`diagonal`: place the last axis on the (axis1, axis2) diagonal."""
    d = const(d)
    ndim = d.ndim + 1
    a1, a2 = axis1 % ndim, axis2 % ndim
    y = _embed(d.value, a1, a2, ndim)
    return _record(y, (d,), lambda g: (np.diagonal(g, axis1=a1, axis2=a2).copy(),))


# ---------------------------------------------------------------------------
# einsum


def einsum(spec: str, *xs) -> Var:
    spec = T.EinsumSpec.parse(spec)
    xs = [const(x) for x in xs]
    y = T.einsum(spec, *[x.value for x in xs])

    def vjp(g):
        grads = []
        for k, x in enumerate(xs):
            if not x.requires_grad:
                grads.append(None)
                continue
            grads.append(_einsum_operand_grad(spec, k, g, [o.value for o in xs]))
        return tuple(grads)

    return _record(y, xs, vjp)


def _einsum_operand_grad(spec: T.EinsumSpec, k: int, g: np.ndarray, values) -> np.ndarray:
    term = spec.inputs[k]
    others = [(t, v) for i, (t, v) in enumerate(zip(spec.inputs, values)) if i != k]
    avail = set(spec.output).union(*[set(t) for t, _ in others])
    uniq = "".join(dict.fromkeys(term))
    got = "".join(c for c in uniq if c in avail)
    sizes = dict(zip(term, values[k].shape))
    sub = T.EinsumSpec((spec.output,) + tuple(t for t, _ in others), got)
    r = T.einsum(sub, g, *[v for _, v in others])
    # broadcast over labels summed only inside this operand
    full = np.broadcast_to(
        r.reshape([sizes[c] if c in got else 1 for c in uniq]), [sizes[c] for c in uniq]
    ).astype(g.dtype)
    if len(uniq) != len(term):
        full = _expand_diagonals(full, uniq, term)
    return np.ascontiguousarray(full)


def _expand_diagonals(x: np.ndarray, uniq: str, term: str) -> np.ndarray:
    out = np.zeros([dict(zip(uniq, x.shape))[c] for c in term], dtype=x.dtype)
    grids = np.indices(x.shape, sparse=True)
    idx = tuple(grids[uniq.index(c)] for c in term)
    np.add.at(out, idx, x)
    return out


# ---------------------------------------------------------------------------
# normalization and losses


def normalize(x: Var, axis: int = -1, eps: float = 1e-12) -> Var:
    """``x / max(||x||_2, eps)`` along ``axis``."""
    x = const(x)
    v = x.value
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, np.asarray(eps, dtype=v.dtype), norm)
    y = v / denom

    def vjp(g):
        gx = g / denom
        dot = (g * y).sum(axis=axis, keepdims=True)
        corr = np.where(clipped, 0.0, y * dot / denom)
        return ((gx - corr).astype(v.dtype, copy=False),)

    return _record(y, (x,), vjp)


def softmax(x: Var, axis: int = -1) -> Var:
    x = const(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), vjp)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Var, targets: np.ndarray, weights: np.ndarray | None = None) -> Var:
    """Weighted mean token cross-entropy; ``weights`` masks e.g. prompt tokens."""
    logits = const(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    dt = logits.value.dtype
    w = np.ones(targets.shape, dtype=dt) if weights is None else np.asarray(weights, dtype=dt)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs a positive total weight")
    logp = log_softmax_np(logits.value.astype(np.float64), axis=-1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    y = np.asarray(-(picked * w).sum() / total, dtype=dt)

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return ((p * (w / total)[..., None] * g).astype(dt),)

    return _record(y, (logits,), vjp)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w.T + b`` over the last axis (weights stored out x in)."""
    y = einsum(_linear_spec(const(x).ndim), x, w)
    return y if b is None else add(y, b)


def _linear_spec(ndim: int) -> str:
    lead = "ABCDEFG"[: ndim - 1]
    return f"{lead}i,oi->{lead}o"
