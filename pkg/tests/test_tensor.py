import numpy as np
import pytest
from hypothesis import given, strategies as st

from telelora.tensor import (EinsumError, EinsumSpec, einsum, execute_plan, make_rng, permute_axis,
                             plan_contraction, split_seed)

LABELS = "abcdef"


@st.composite
def random_specs(draw, max_ops=5):
    n_ops = draw(st.integers(2, max_ops))
    used = draw(st.lists(st.sampled_from(LABELS), min_size=2, max_size=6, unique=True))
    terms = []
    for _ in range(n_ops):
        terms.append("".join(draw(st.lists(st.sampled_from(used), min_size=1, max_size=3, unique=True))))
    seen = sorted(set("".join(terms)))
    out = "".join(draw(st.lists(st.sampled_from(seen), max_size=3, unique=True)))
    sizes = {c: draw(st.integers(1, 4)) for c in seen}
    shapes = [tuple(sizes[c] for c in t) for t in terms]
    return ",".join(terms) + "->" + out, shapes


@given(random_specs(), st.integers(0, 2**32 - 1))
def test_einsum_matches_numpy(case, seed):
    spec, shapes = case
    rng = np.random.default_rng(seed)
    ops = [rng.standard_normal(s) for s in shapes]
    np.testing.assert_allclose(einsum(spec, *ops), np.einsum(spec, *ops), rtol=1e-10, atol=1e-10)


@given(random_specs(max_ops=6))
def test_planner_never_worse_than_naive(case):
    spec, shapes = case
    plan = plan_contraction(spec, shapes)
    assert plan.est_flops <= plan.naive_flops
    assert len(plan.steps) == len(shapes) - 1


def test_five_operand_path_keeps_intermediates_small():
    spec = "ab,dc,ae,ac,db->de"
    shapes = [(5, 6), (7, 8), (5, 9), (5, 8), (7, 6)]
    plan = plan_contraction(spec, shapes)
    assert plan.max_intermediate_rank <= 2
    rng = np.random.default_rng(1)
    ops = [rng.standard_normal(s) for s in shapes]
    np.testing.assert_allclose(execute_plan(plan, ops), np.einsum(spec, *ops), rtol=1e-10)


def test_two_operands_single_step():
    plan = plan_contraction("ij,jk->ik", [(2, 3), (3, 4)])
    assert [(s.lhs, s.rhs) for s in plan.steps] == [(0, 1)]


def test_repeated_labels_and_diagonals():
    x = np.arange(27.0).reshape(3, 3, 3)
    np.testing.assert_allclose(einsum("iij->j", x), np.einsum("iij->j", x))
    np.testing.assert_allclose(einsum("iii->i", x), np.einsum("iii->i", x))
    y = np.arange(9.0).reshape(3, 3)
    np.testing.assert_allclose(einsum("ii,ij->j", y, y), np.einsum("ii,ij->j", y, y))


def test_native_dtype_preserved():
    a = np.ones((2, 3), np.float32)
    assert einsum("ij,jk->ik", a, a.T).dtype == np.float32
    assert einsum("ij,jk->ik", a.astype(np.float64), a.T).dtype == np.float64


@pytest.mark.parametrize("bad", ["ij,jk", "ij,jk->iq", "i1->i", "ij->ii"])
def test_malformed_specs(bad):
    with pytest.raises(EinsumError):
        EinsumSpec.parse(bad)


def test_shape_mismatch():
    with pytest.raises(EinsumError):
        einsum("ij,jk->ik", np.ones((2, 3)), np.ones((4, 5)))


@given(st.permutations(list(range(5))))
def test_permute_axis_moves_elements(perm):
    x = np.arange(5.0)
    y = permute_axis(x, 0, perm)
    for i, p in enumerate(perm):
        assert y[p] == x[i]


def test_seeds_are_stable():
    assert make_rng(7).integers(1 << 30) == make_rng(7).integers(1 << 30)
    assert split_seed(3, "data") == split_seed(3, "data")
    assert split_seed(3, "data") != split_seed(3, "train")
