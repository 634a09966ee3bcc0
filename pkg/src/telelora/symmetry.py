"""Parameter sharing under permutation symmetry, and einsum pooling ops.

Two tools live here:

* :func:`solve_coefficient_basis` stacks the linear constraints that a
  permutation symmetry puts on order-k Taylor coefficients and solves for
  their null space.  The free parameters are the orbits of the group acting
  on coefficient indices.
* :func:`enumerate_pooling_ops` lists einsum contractions of copies of an
  input that stay equivariant, then prunes ones reachable by stacking.

Symmetry types use a compact notation: lowercase letters are permuted axes
(a repeated letter permutes jointly, e.g. ``aa``), ``Z`` is a batch axis and
other uppercase letters are latent axes with no symmetry.  Dependencies go
after a semicolon, ``abcH;a->b`` meaning b is permuted separately per a.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .tensor import EinsumSpec

SVD_TOL = 1e-8
DENSE_LIMIT = 1024


class SymmetryError(ValueError):
    pass


@dataclass(frozen=True)
class Axis:
    label: str
    kind: str  # "perm", "latent" or "batch"


@dataclass(frozen=True)
class SymmetryType:
    axes: tuple[Axis, ...]
    dependencies: tuple[tuple[str, str], ...] = ()
    notation: str = ""

    @classmethod
    def parse(cls, text: "str | SymmetryType") -> "SymmetryType":
        if isinstance(text, SymmetryType):
            return text
        text = text.strip()
        core, _, deps = text.partition(";")
        if not core or not re.fullmatch(r"[A-Za-z]+", core):
            raise SymmetryError(f"malformed symmetry type {text!r}")
        axes = []
        for c in core:
            kind = "perm" if c.islower() else ("batch" if c == "Z" else "latent")
            axes.append(Axis(c, kind))
        perm_labels = {a.label for a in axes if a.kind == "perm"}
        dependencies = []
        for d in filter(None, (s.strip() for s in deps.split(","))):
            m = re.fullmatch(r"([a-z])->([a-z])", d)
            if not m:
                raise SymmetryError(f"malformed dependency {d!r} in {text!r}")
            src, dst = m.groups()
            if src == dst or not {src, dst} <= perm_labels:
                raise SymmetryError(f"dependency {d!r} must link two distinct permuted axes")
            dependencies.append((src, dst))
        sym = cls(tuple(axes), tuple(dependencies), text)
        sym._check_acyclic()
        return sym

    def _check_acyclic(self) -> None:
        graph: dict[str, set[str]] = {}
        for s, d in self.dependencies:
            graph.setdefault(s, set()).add(d)
        state: dict[str, int] = {}

        def visit(u):
            if state.get(u) == 1:
                raise SymmetryError(f"cyclic dependencies in {self.notation!r}")
            if state.get(u) == 2:
                return
            state[u] = 1
            for v in graph.get(u, ()):
                visit(v)
            state[u] = 2

        for u in list(graph):
            visit(u)
        for s, d in self.dependencies:
            if (d, s) in self.dependencies:
                raise SymmetryError(f"cyclic dependencies in {self.notation!r}")

    @property
    def perm_term(self) -> str:
        """Permuted-axis labels in order, e.g. ``'aa'`` for ``aaH``."""
        return "".join(a.label for a in self.axes if a.kind == "perm")

    @property
    def groups(self) -> list[str]:
        return list(dict.fromkeys(self.perm_term))

    @property
    def latent(self) -> str:
        return "".join(a.label for a in self.axes if a.kind != "perm")

    def __str__(self) -> str:
        return self.notation or "".join(a.label for a in self.axes)


# ---------------------------------------------------------------------------
# group actions on coefficient multi-indices


def _digits(n: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.indices((n,) * width).reshape(width, -1).T
    return np.ascontiguousarray(grids)


def _to_flat(d: np.ndarray, n: int) -> np.ndarray:
    flat = np.zeros(d.shape[0], dtype=np.int64)
    for c in range(d.shape[1]):
        flat = flat * n + d[:, c]
    return flat


def _column_groups(sym: SymmetryType, copies: int) -> dict[str, list[int]]:
    term = sym.perm_term
    cols: dict[str, list[int]] = {g: [] for g in sym.groups}
    for c in range(copies):
        for i, g in enumerate(term):
            cols[g].append(c * len(term) + i)
    return cols


def _parent_columns(sym: SymmetryType, copies: int, src: str, dst: str) -> list[tuple[int, int]]:
    """(src column, dst column) pairs living in the same copy of the input."""
    term = sym.perm_term
    pairs = []
    for c in range(copies):
        base = c * len(term)
        si = term.index(src)
        for i, g in enumerate(term):
            if g == dst:
                pairs.append((base + si, base + i))
    return pairs


def _generators(sym: SymmetryType, n: int, copies: int, full: bool) -> Iterator:
    """Yield functions mapping a digit array to its image under one group element."""
    cols = _column_groups(sym, copies)
    if full:
        if sym.dependencies:
            raise SymmetryError("full enumeration is only supported without dependencies")
        for perms in itertools.product(itertools.permutations(range(n)), repeat=len(cols)):
            def act(d, perms=perms):
                out = d.copy()
                for p, (g, cs) in zip(perms, cols.items()):
                    p = np.asarray(p)
                    out[:, cs] = p[d[:, cs]]
                return out

            yield act
        return
    for g, cs in cols.items():
        for t in range(n - 1):
            swap = np.arange(n)
            swap[t], swap[t + 1] = t + 1, t

            def act(d, cs=cs, swap=swap):
                out = d.copy()
                out[:, cs] = swap[d[:, cs]]
                return out

            yield act
    for src, dst in sym.dependencies:
        pairs = _parent_columns(sym, copies, src, dst)
        for parent in range(n):
            for t in range(n - 1):
                swap = np.arange(n)
                swap[t], swap[t + 1] = t + 1, t

                def act(d, pairs=pairs, parent=parent, swap=swap):
                    out = d.copy()
                    for sc, dc in pairs:
                        hit = d[:, sc] == parent
                        out[hit, dc] = swap[d[hit, dc]]
                    return out

                yield act


def _copies(order: int, equivariant: bool) -> int:
    return order + (1 if equivariant else 0)


def constraint_matrix(sym, order: int, n: int, equivariant: bool = False, full: bool = False):
    """Sparse rows ``c[g(i)] - c[i] = 0``, one block per generator."""
    sym = SymmetryType.parse(sym)
    width = len(sym.perm_term) * _copies(order, equivariant)
    d = _digits(n, width)
    size = d.shape[0]
    src = np.arange(size)
    rows, cols, vals = [], [], []
    r0 = 0
    for act in _generators(sym, n, _copies(order, equivariant), full):
        img = _to_flat(act(d), n)
        moved = img != src
        k = int(moved.sum())
        if k == 0:
            continue
        rid = r0 + np.arange(k)
        rows += [rid, rid]
        cols += [img[moved], src[moved]]
        vals += [np.ones(k), -np.ones(k)]
        r0 += k
    if r0 == 0:
        return scipy.sparse.csr_matrix((0, size))
    return scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r0, size)
    )


def null_space(a) -> np.ndarray:
    """Orthonormal null-space basis, columns; dense SVD for small systems."""
    size = a.shape[1]
    if a.shape[0] == 0:
        return np.eye(size)
    if size <= DENSE_LIMIT:
        _, sv, vh = scipy.linalg.svd(a.toarray(), full_matrices=True)
        rank = int((sv > SVD_TOL).sum())
        return vh[rank:].T
    gram = (a.T @ a).tocsc()
    k = 16
    while True:
        k = min(k, size - 1)
        vals, vecs = scipy.sparse.linalg.eigsh(gram, k=k, sigma=-1e-3, which="LM")
        zero = vals < SVD_TOL
        if not zero.all() or k == size - 1:
            return vecs[:, zero]
        k *= 2


@dataclass
class CoefficientBasis:
    order: int
    n: int
    shape: tuple[int, ...]
    patterns: list[np.ndarray] = field(repr=False)
    dof: int = 0
    unconstrained: int = 0

    def representatives(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in np.argwhere(p)[0]) for p in self.patterns]


def solve_coefficient_basis(
    sym, order: int, n: int, equivariant: bool = False, full_group: bool = False
) -> CoefficientBasis:
    """Free parameters of order-``order`` coefficients under ``sym``.

    Builds the constraint system from adjacent transpositions (or every
    group element with ``full_group``), takes its numerical null space and
    snaps the basis to exact 0/1 orbit indicators.
    """
    sym = SymmetryType.parse(sym)
    if order < 0 or n < 1:
        raise SymmetryError("order must be >= 0 and n >= 1")
    width = len(sym.perm_term) * _copies(order, equivariant)
    shape = (n,) * width
    size = n**width
    a = constraint_matrix(sym, order, n, equivariant, full_group)
    basis = null_space(a)
    patterns = _snap(basis, shape)
    if len(patterns) != basis.shape[1]:
        raise ArithmeticError(
            f"null space of dimension {basis.shape[1]} did not snap to orbit indicators ({len(patterns)})"
        )
    return CoefficientBasis(order, n, shape, patterns, len(patterns), size)


def _snap(basis: np.ndarray, shape: tuple[int, ...], tol: float = 1e-6) -> list[np.ndarray]:
    size = basis.shape[0]
    label = np.full(size, -1)
    patterns = []
    for i in range(size):
        if label[i] >= 0:
            continue
        hit = np.linalg.norm(basis - basis[i], axis=1) < tol
        hit &= label < 0
        label[hit] = len(patterns)
        patterns.append(hit.reshape(shape))
    return patterns


def count_orbits(sym, order: int, n: int, equivariant: bool = False) -> int:
    """Orbit count by union-find over generator images (no linear algebra)."""
    sym = SymmetryType.parse(sym)
    width = len(sym.perm_term) * _copies(order, equivariant)
    d = _digits(n, width)
    parent = np.arange(d.shape[0])

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for act in _generators(sym, n, _copies(order, equivariant), full=False):
        img = _to_flat(act(d), n)
        for i, j in zip(range(len(img)), img):
            ri, rj = find(i), find(int(j))
            if ri != rj:
                parent[ri] = rj
    return len({find(i) for i in range(len(parent))})


# ---------------------------------------------------------------------------
# pooling operations


@dataclass(frozen=True)
class PoolingOp:
    """Einsum over copies of one input, on permuted axes only.

    ``inputs``/``output`` hold lowercase labels for the permuted axes; the
    latent and batch axes ride along untouched.  Output labels absent from
    the inputs broadcast, and a repeated output label embeds a diagonal.
    """

    inputs: tuple[str, ...]
    output: str
    symmetry: SymmetryType

    @property
    def order(self) -> int:
        return len(self.inputs)

    @property
    def spec(self) -> str:
        lat = self.symmetry.latent
        return ",".join(t + lat for t in self.inputs) + "->" + self.output + lat

    def __str__(self) -> str:
        return self.spec


def _relabel(inputs: Sequence[str], output: str) -> tuple[tuple[str, ...], str]:
    names: dict[str, str] = {}
    for c in "".join(inputs) + output:
        if c not in names:
            names[c] = "abcdefghijklmnopqrstuvwxy"[len(names)]
    return tuple("".join(names[c] for c in t) for t in inputs), "".join(names[c] for c in output)


def _rotations(term_pattern: str) -> list[tuple[int, ...]]:
    """Axis permutations that only swap axes within a joint group."""
    positions: dict[str, list[int]] = {}
    for i, g in enumerate(term_pattern):
        positions.setdefault(g, []).append(i)
    options = [list(itertools.permutations(p)) for p in positions.values()]
    out = []
    for choice in itertools.product(*options):
        perm = list(range(len(term_pattern)))
        for src, dst in zip(positions.values(), choice):
            for s, d in zip(src, dst):
                perm[s] = d
        out.append(tuple(perm))
    return out


def canonical(inputs: Sequence[str], output: str, pattern: str, rotate: bool = False) -> str:
    """Lexicographically smallest relabeling over operand orders (and rotations)."""
    rots = _rotations(pattern) if rotate else [tuple(range(len(pattern)))]
    best = None
    for order in itertools.permutations(inputs):
        for rs in itertools.product(rots, repeat=len(order) + 1):
            terms = ["".join(t[i] for i in r) for t, r in zip(order, rs[:-1])]
            out = "".join(output[i] for i in rs[-1])
            ins, o = _relabel(terms, out)
            s = ",".join(ins) + "->" + o
            if best is None or s < best:
                best = s
    return best


def canonical_spec(spec: str, sym, rotate: bool | None = None) -> str:
    """Canonical form of a table-style spec such as ``'abH,cbH,cdH->adH'``."""
    sym = SymmetryType.parse(sym)
    lat = set(sym.latent)
    lhs, out = spec.replace(" ", "").replace("→", "->").split("->")
    ins = ["".join(c for c in t if c not in lat) for t in lhs.split(",")]
    out = "".join(c for c in out if c not in lat)
    if rotate is None:
        rotate = len(ins) >= 2
    return canonical(ins, out, sym.perm_term, rotate)


def _set_partitions(items: list) -> Iterator[list[list]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]
        yield [[first]] + part


def _all_ops(sym: SymmetryType, order: int) -> Iterator[tuple[tuple[str, ...], str]]:
    pattern = sym.perm_term
    m = len(pattern)
    slots = (order + 1) * m
    by_group: dict[str, list[int]] = {}
    for s in range(slots):
        by_group.setdefault(pattern[s % m], []).append(s)
    for parts in itertools.product(*[list(_set_partitions(v)) for v in by_group.values()]):
        labels = [""] * slots
        k = 0
        for part in parts:
            for block in part:
                for s in block:
                    labels[s] = chr(ord("a") + k)
                k += 1
        terms = ["".join(labels[i * m : (i + 1) * m]) for i in range(order + 1)]
        yield tuple(terms[:-1]), terms[-1]


def _label_group(sym: SymmetryType, inputs, output) -> dict[str, str]:
    pattern = sym.perm_term
    groups = {}
    for t in list(inputs) + [output]:
        for c, g in zip(t, pattern):
            groups[c] = g
    return groups


def satisfies_dependencies(sym: SymmetryType, inputs, output) -> bool:
    """Each dependent label must always travel with one and the same parent label."""
    pattern = sym.perm_term
    for src, dst in sym.dependencies:
        si = pattern.index(src)
        partners: dict[str, set[str]] = {}
        for t in list(inputs) + [output]:
            for i, g in enumerate(pattern):
                if g == dst:
                    partners.setdefault(t[i], set()).add(t[si])
        if any(len(p) > 1 for p in partners.values()):
            return False
    return True


def _is_breakable(inputs, output) -> bool:
    """Operands split into two groups sharing no summed label (pointwise product)."""
    k = len(inputs)
    if k < 2:
        return False
    out = set(output)
    for mask in range(1, 2 ** (k - 1)):
        a = [inputs[i] for i in range(k) if mask >> i & 1]
        b = [inputs[i] for i in range(k) if not mask >> i & 1]
        shared = set("".join(a)) & set("".join(b))
        if not (shared - out):
            return True
    return False


def _is_pointwise_primitive(inputs, output) -> bool:
    return len(inputs) == 2 and inputs[0] == inputs[1] == output and len(set(output)) == len(output)


def _expands(inputs, output) -> bool:
    return bool(set(output) - set("".join(inputs)))


def _has_pooled_operand(inputs, output) -> bool:
    """Some label lives in a single term: an order-1 op applied before or after."""
    terms = list(inputs) + [output]
    counts = {}
    for t in terms:
        for c in set(t):
            counts[c] = counts.get(c, 0) + 1
    return any(v < 2 for v in counts.values()) or any(len(set(t)) != len(t) for t in terms)


def _is_stackable(sym: SymmetryType, inputs, output) -> bool:
    """A proper operand subset whose interface is itself a valid term.

    Such an op is the composition of two lower-order ops across two
    stacked layers, e.g. ``ab,bc,cd->ad`` = ``(ab,bc->ac)`` then ``ac,cd->ad``.
    """
    k = len(inputs)
    pattern = sym.perm_term
    groups = _label_group(sym, inputs, output)
    for size in range(2, k):
        for subset in itertools.combinations(range(k), size):
            inside = set("".join(inputs[i] for i in subset))
            outside = set("".join(inputs[i] for i in range(k) if i not in subset)) | set(output)
            iface = inside & outside
            if len(iface) != len(pattern):
                continue
            need = sorted(pattern)
            if sorted(groups[c] for c in iface) == need:
                return True
    return False


def _order1_elementary(sym: SymmetryType, term: str, out: str) -> bool:
    """Identity, an axis rotation, a diagonal, or pooling along a single axis."""
    distinct = len(set(term)) == len(term)
    if distinct and out == term:
        return True
    if distinct and sorted(out) == sorted(term):
        return True
    if not distinct and out == term:
        return len(term) - len(set(term)) == 1
    if distinct and len(out) == len(term):
        diff = [i for i in range(len(term)) if term[i] != out[i]]
        return len(diff) == 1 and out[diff[0]] not in term and term[diff[0]] not in out
    return False


def _pool_axis(term: str, out: str) -> int | None:
    diff = [i for i in range(len(term)) if term[i] != out[i]]
    if len(diff) == 1 and out[diff[0]] not in term:
        return diff[0]
    return None


def enumerate_pooling_ops(sym, max_order: int) -> list[PoolingOp]:
    """Admissible pooling ops of order 1..``max_order``.

    Steps: enumerate label assignments consistent with the axis groups
    (unique up to renaming and operand order); drop those violating
    dependencies; for order >= 2 drop pointwise-breakable, rotation
    duplicates, output expansions and ops that factor through a stacked
    layer.  Order-1 ops are kept when elementary, one pooling axis per
    joint group.  Orders above 3 come from :data:`LOOKUP_TABLE`.
    """
    sym = SymmetryType.parse(sym)
    if not sym.perm_term:
        raise SymmetryError(f"symmetry type {sym} has no permuted axes")
    if max_order < 1:
        raise SymmetryError("max_order must be >= 1")
    pattern = sym.perm_term
    ops: list[PoolingOp] = []
    for order in range(1, min(max_order, 3) + 1):
        seen: dict[str, tuple] = {}
        for inputs, output in _all_ops(sym, order):
            if not satisfies_dependencies(sym, inputs, output):
                continue
            if order == 1:
                if not _order1_elementary(sym, inputs[0], output):
                    continue
                key = canonical(inputs, output, pattern, rotate=False)
            else:
                if _is_breakable(inputs, output) and not _is_pointwise_primitive(inputs, output):
                    continue
                if _expands(inputs, output) or _has_pooled_operand(inputs, output):
                    continue
                if _is_stackable(sym, inputs, output):
                    continue
                key = canonical(inputs, output, pattern, rotate=True)
            if key not in seen:
                seen[key] = (inputs, output)
        chosen = sorted(seen)
        if order == 1:
            chosen = _normalize_order1_pools(sym, chosen)
        for key in chosen:
            lhs, out = key.split("->")
            ops.append(PoolingOp(tuple(lhs.split(",")), out, sym))
    if max_order > 3:
        for order in range(4, max_order + 1):
            for spec in LOOKUP_TABLE.get((str(sym).split(";")[0], order), []):
                lhs, out = canonical_spec(spec, sym).split("->")
                ops.append(PoolingOp(tuple(lhs.split(",")), out, sym))
    return ops


def _normalize_order1_pools(sym: SymmetryType, keys: list[str]) -> list[str]:
    """Keep, per joint group, only the pooling over its first axis."""
    pattern = sym.perm_term
    first = {g: pattern.index(g) for g in set(pattern)}
    kept = []
    for key in keys:
        (term,), out = key.split("->")[0].split(","), key.split("->")[1]
        axis = _pool_axis(term, out) if len(set(term)) == len(term) and len(out) == len(term) else None
        if axis is not None and first[pattern[axis]] != axis:
            continue
        kept.append(key)
    return kept


# Ops the enumerator is not asked to discover (order 4+), and "no need" rows.
LOOKUP_TABLE: dict[tuple[str, int], list[str]] = {
    ("aH", 1): ["aH->aH", "aH->bH"],
    ("aH", 2): ["aH,aH->aH"],
    ("aH", 3): [],
    ("abH", 1): ["abH->abH", "abH->cbH", "abH->acH"],
    ("abH", 2): ["abH,abH->abH"],
    ("abH", 3): ["abH,cbH,cdH->adH"],
    ("abH", 4): [],
    ("abH", 5): ["abH,acH,dbH,dcH,deH->aeH", "abH,acH,dbH,dcH,ecH->ebH"],
    ("aaH", 1): ["abH->abH", "aaH->aaH", "abH->baH", "abH->cbH"],
    ("aaH", 2): ["abH,bcH->acH", "abH,abH->abH"],
    ("aaH", 3): [],
}


def table_ops(sym, order: int) -> set[str]:
    """Canonical forms of the lookup-table entries for ``sym`` at ``order``."""
    sym = SymmetryType.parse(sym)
    return {canonical_spec(s, sym) for s in LOOKUP_TABLE[(str(sym), order)]}


# ---------------------------------------------------------------------------
# numerics


def apply_pooling_op(op: PoolingOp, x: np.ndarray) -> np.ndarray:
    """Evaluate ``op`` on ``x`` whose trailing axes are latent/batch-free perm axes.

    ``x`` has the permuted axes first (in ``perm_term`` order) followed by
    one trailing channel axis.  Sums, not means.
    """
    x = np.asarray(x, dtype=np.float64)
    m = len(op.symmetry.perm_term)
    sizes = {}
    for t in op.inputs:
        for c, n in zip(t, x.shape[:m]):
            sizes[c] = n
    pattern = op.symmetry.perm_term
    for c, g in zip(op.output, pattern):
        if c not in sizes:
            sizes[c] = x.shape[pattern.index(g)]
    present = "".join(dict.fromkeys(c for c in op.output if c in set("".join(op.inputs))))
    spec = ",".join(t + "Z" for t in op.inputs) + "->" + present + "Z"
    y = np.einsum(spec, *([x] * op.order))
    # broadcast over fresh labels, then embed repeated labels as diagonals
    uniq = "".join(dict.fromkeys(op.output))
    shape = [sizes[c] if c in present else 1 for c in uniq]
    y = y.transpose([present.index(c) for c in uniq if c in present] + [len(present)])
    y = y.reshape(shape + [x.shape[-1]])
    y = np.broadcast_to(y, [sizes[c] for c in uniq] + [x.shape[-1]])
    if len(uniq) == len(op.output):
        return y.transpose([uniq.index(c) for c in op.output] + [len(uniq)]).copy()
    out = np.zeros([sizes[c] for c in op.output] + [x.shape[-1]])
    grids = np.indices(y.shape[:-1])
    idx = tuple(grids[uniq.index(c)] for c in op.output)
    out[idx] = y
    return out


def random_group_element(sym: SymmetryType, sizes: dict[str, int], rng: np.random.Generator):
    """Per-group permutations, plus per-parent permutations for dependent groups."""
    perms = {}
    deps = dict((dst, src) for src, dst in sym.dependencies)
    for g in sym.groups:
        if g in deps:
            perms[g] = np.stack([rng.permutation(sizes[g]) for _ in range(sizes[deps[g]])])
        else:
            perms[g] = rng.permutation(sizes[g])
    return perms


def act(sym: SymmetryType, perms, x: np.ndarray) -> np.ndarray:
    """Apply a group element to ``x`` (perm axes first, then anything)."""
    pattern = sym.perm_term
    deps = dict((dst, src) for src, dst in sym.dependencies)
    m = len(pattern)
    idx = np.indices(x.shape[:m])
    new = list(idx)
    for i, g in enumerate(pattern):
        p = perms[g]
        if g in deps:
            parent = pattern.index(deps[g])
            new[i] = p[idx[parent], idx[i]]
        else:
            new[i] = p[idx[i]]
    # dependent axes pick their permutation by the parent's original index
    out = np.empty_like(x)
    out[tuple(new)] = x
    return out


def check_equivariance(op: PoolingOp, trials: int, rng: np.random.Generator, n: int = 3, channels: int = 2) -> float:
    """Max over trials of ``|P op(x) - op(P x)|_inf`` on unit-scale inputs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sym = op.symmetry
    sizes = {g: n for g in sym.groups}
    shape = [sizes[g] for g in sym.perm_term] + [channels]
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(shape)
        perms = random_group_element(sym, sizes, rng)
        dev = np.abs(act(sym, perms, apply_pooling_op(op, x)) - apply_pooling_op(op, act(sym, perms, x))).max()
        worst = max(worst, float(dev))
    return worst


def total_dof(sym, max_order: int, n: int, equivariant: bool = False) -> int:
    return sum(solve_coefficient_basis(sym, k, n, equivariant).dof for k in range(max_order + 1))


def einsum_spec(op: PoolingOp) -> EinsumSpec:
    """The contraction part as an :class:`EinsumSpec` (fresh labels dropped)."""
    present = "".join(dict.fromkeys(c for c in op.output if c in set("".join(op.inputs))))
    return EinsumSpec(tuple(op.inputs), present)
