"""Dense tensors, einsum with a greedy pairwise contraction planner, and seeded RNG.

Tensors are plain ``numpy.ndarray`` values of dtype float32.  Contractions
run in the widest input dtype, so callers that pass float64 arrays (e.g.
gradient checks) get a full 64-bit evaluation.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_LABELS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")


class EinsumError(ValueError):
    """Malformed einsum spec or operands inconsistent with it."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Convert ``x`` to a contiguous tensor, rejecting zero-length axes."""
    arr = np.array(x, dtype=dtype, order="C")
    if any(n == 0 for n in arr.shape):
        raise ValueError(f"zero-length axis in shape {arr.shape}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; equal seeds give equal streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def split_seed(seed: int, name: str) -> int:
    """Derive a stable 64-bit child seed for subsystem ``name``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [ord(c) for c in name]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# spec parsing


@dataclass(frozen=True)
class EinsumSpec:
    inputs: tuple[str, ...]
    output: str

    @property
    def operand_count(self) -> int:
        return len(self.inputs)

    def __str__(self) -> str:
        return ",".join(self.inputs) + "->" + self.output

    @classmethod
    def parse(cls, spec: "str | EinsumSpec") -> "EinsumSpec":
        if isinstance(spec, EinsumSpec):
            return spec
        spec = spec.replace(" ", "")
        if "->" not in spec:
            raise EinsumError(f"spec {spec!r} has no '->'")
        lhs, out = spec.split("->", 1)
        inputs = tuple(lhs.split(","))
        for term in inputs + (out,):
            bad = set(term) - _LABELS
            if bad:
                raise EinsumError(f"invalid labels {sorted(bad)} in {spec!r}")
        if len(set(out)) != len(out):
            raise EinsumError(f"repeated output label in {spec!r}")
        seen = set("".join(inputs))
        missing = set(out) - seen
        if missing:
            raise EinsumError(f"unknown output label(s) {sorted(missing)} in {spec!r}")
        return cls(inputs, out)


def _label_sizes(spec: EinsumSpec, shapes: Sequence[Sequence[int]]) -> dict[str, int]:
    if len(shapes) != spec.operand_count:
        raise EinsumError(f"{spec} expects {spec.operand_count} operands, got {len(shapes)}")
    sizes: dict[str, int] = {}
    for term, shape in zip(spec.inputs, shapes):
        if len(term) != len(shape):
            raise EinsumError(f"term {term!r} does not match operand of rank {len(shape)}")
        for label, n in zip(term, shape):
            if sizes.setdefault(label, n) != n:
                raise EinsumError(f"label {label!r} bound to both {sizes[label]} and {n}")
    return sizes


# ---------------------------------------------------------------------------
# kernels


def _take_diagonals(x: np.ndarray, term: str) -> tuple[np.ndarray, str]:
    """Collapse repeated labels in ``term`` by diagonal extraction."""
    while len(set(term)) != len(term):
        for i, c in enumerate(term):
            j = term.find(c, i + 1)
            if j >= 0:
                break
        x = np.diagonal(x, axis1=i, axis2=j)
        term = term[:i] + term[i + 1 : j] + term[j + 1 :] + c
    return x, term


def _reduce_single(x: np.ndarray, term: str, keep: str) -> tuple[np.ndarray, str]:
    x, term = _take_diagonals(x, term)
    drop = tuple(i for i, c in enumerate(term) if c not in keep)
    if drop:
        x = x.sum(axis=drop)
        term = "".join(c for c in term if c in keep)
    return x, term


def _contract_pair(a, ta: str, b, tb: str, out: str):
    """Contract two operands to labels ``out`` via one batched matmul."""
    keep_a = set(tb) | set(out)
    keep_b = set(ta) | set(out)
    a, ta = _reduce_single(a, ta, "".join(keep_a))
    b, tb = _reduce_single(b, tb, "".join(keep_b))
    batch = [c for c in ta if c in tb and c in out]
    summed = [c for c in ta if c in tb and c not in out]
    left = [c for c in ta if c not in tb]
    right = [c for c in tb if c not in ta]
    size = {**dict(zip(ta, a.shape)), **dict(zip(tb, b.shape))}
    pa = a.transpose([ta.index(c) for c in batch + left + summed])
    pb = b.transpose([tb.index(c) for c in batch + summed + right])
    nb = math.prod(size[c] for c in batch)
    nl = math.prod(size[c] for c in left)
    ns = math.prod(size[c] for c in summed)
    nr = math.prod(size[c] for c in right)
    # contiguous operands keep matmul on the BLAS path
    y = np.matmul(np.ascontiguousarray(pa.reshape(nb, nl, ns)), np.ascontiguousarray(pb.reshape(nb, ns, nr)))
    cur = batch + left + right
    y = y.reshape([size[c] for c in cur])
    return y.transpose([cur.index(c) for c in out])


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class PlanStep:
    lhs: int
    rhs: int
    spec: EinsumSpec
    flops: int


@dataclass
class ContractionPlan:
    spec: EinsumSpec
    shapes: tuple[tuple[int, ...], ...]
    steps: list[PlanStep] = field(default_factory=list)
    est_flops: int = 0
    naive_flops: int = 0
    max_intermediate_rank: int = 0

    def path(self) -> list[str]:
        return [str(s.spec) for s in self.steps]


def _pair_result(terms: list[str], i: int, j: int, output: str) -> str:
    rest = set(output)
    for k, t in enumerate(terms):
        if k not in (i, j):
            rest |= set(t)
    seen: list[str] = []
    for c in terms[i] + terms[j]:
        if c in rest and c not in seen:
            seen.append(c)
    # order like the final output where possible for cheaper transposes
    return "".join(sorted(seen, key=lambda c: (output.find(c) < 0, output.find(c), seen.index(c))))


def _flops(labels: str, sizes: dict[str, int]) -> int:
    return math.prod(sizes[c] for c in set(labels))


def _build(spec: EinsumSpec, sizes, order) -> tuple[list[PlanStep], int, int]:
    terms = list(spec.inputs)
    steps: list[PlanStep] = []
    total = 0
    max_rank = 0
    for pick in order:
        i, j = pick(terms) if callable(pick) else pick
        res = _pair_result(terms, i, j, spec.output)
        cost = _flops(terms[i] + terms[j], sizes)
        steps.append(PlanStep(i, j, EinsumSpec((terms[i], terms[j]), res), cost))
        total += cost
        max_rank = max(max_rank, len(res))
        terms = [t for k, t in enumerate(terms) if k not in (i, j)] + [res]
    return steps, total, max_rank


def _greedy_pick(spec: EinsumSpec, sizes):
    def pick(terms: list[str]) -> tuple[int, int]:
        best = None
        for i in range(len(terms)):
            for j in range(i + 1, len(terms)):
                res = _pair_result(terms, i, j, spec.output)
                key = (_flops(terms[i] + terms[j], sizes), _flops(res, sizes), i, j)
                if best is None or key < best:
                    best = key
        return best[2], best[3]

    return pick


def plan_contraction(spec, shapes: Sequence[Sequence[int]]) -> ContractionPlan:
    """Greedy pairwise plan minimizing estimated multiply-add count.

    The naive baseline contracts operands left to right, keeping every label
    still needed later.  If greedy loses to it, the naive path is returned,
    so ``est_flops <= naive_flops`` always holds.  Plans are cached and
    shared, so treat them as read-only.
    """
    spec = EinsumSpec.parse(spec)
    shapes = tuple(tuple(int(n) for n in s) for s in shapes)
    return _cached_plan(spec, shapes)


@functools.lru_cache(maxsize=4096)
def _cached_plan(spec: EinsumSpec, shapes: tuple[tuple[int, ...], ...]) -> ContractionPlan:
    sizes = _label_sizes(spec, shapes)
    if spec.operand_count < 2:
        raise EinsumError("planning needs at least two operands")
    n = spec.operand_count
    # after each step the accumulator sits at the end of the list
    naive_steps, naive, naive_rank = _build(
        spec, sizes, [(0, 1)] + [lambda terms: (0, len(terms) - 1)] * (n - 2)
    )
    greedy = _build(spec, sizes, [_greedy_pick(spec, sizes)] * (n - 1))
    steps, total, rank = greedy if greedy[1] <= naive else (naive_steps, naive, naive_rank)
    return ContractionPlan(spec, shapes, steps, total, naive, rank)


def execute_plan(plan: ContractionPlan, operands: Sequence[np.ndarray]) -> np.ndarray:
    shapes = tuple(tuple(np.shape(x)) for x in operands)
    if shapes != plan.shapes:
        raise EinsumError(f"operand shapes {shapes} do not match plan shapes {plan.shapes}")
    dtype = np.result_type(np.float32, *[np.asarray(x).dtype for x in operands])
    work = [np.asarray(x, dtype=dtype) for x in operands]
    for step in plan.steps:
        a, b = work[step.lhs], work[step.rhs]
        ta, tb = step.spec.inputs
        y = _contract_pair(a, ta, b, tb, step.spec.output)
        work = [w for k, w in enumerate(work) if k not in (step.lhs, step.rhs)] + [y]
    (last,) = work
    term = plan.steps[-1].spec.output
    last, term = _reduce_single(last, term, plan.spec.output)
    last = last.transpose([term.index(c) for c in plan.spec.output])
    return np.array(last, dtype=dtype, order="C")


def einsum(spec, *operands) -> np.ndarray:
    """Full tensor contraction described by ``spec`` (e.g. ``'ij,jk->ik'``)."""
    spec = EinsumSpec.parse(spec)
    if len(operands) == 1 and isinstance(operands[0], (list, tuple)) and spec.operand_count != 1:
        operands = tuple(operands[0])
    shapes = [np.shape(x) for x in operands]
    _label_sizes(spec, shapes)
    if spec.operand_count == 1:
        (x,) = operands
        dtype = np.result_type(np.float32, np.asarray(x).dtype)
        y, term = _reduce_single(np.asarray(x, dtype=dtype), spec.inputs[0], spec.output)
        y = y.transpose([term.index(c) for c in spec.output])
        return np.array(y, dtype=dtype, order="C")
    return execute_plan(plan_contraction(spec, shapes), operands)


def permute_axis(x: np.ndarray, axis: int, perm: Sequence[int]) -> np.ndarray:
    """Move the element at position ``i`` along ``axis`` to position ``perm[i]``."""
    x = np.asarray(x)
    perm = np.asarray(perm, dtype=np.int64)
    n = x.shape[axis]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of range({n}): {perm.tolist()}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(n)
    return np.take(x, inv, axis=axis)
