import numpy as np
import pytest
from hypothesis import given, strategies as st

from telelora.adapters import (GeneratorConfig, GeneratorParams, LoraAdapter, apply_adapter,
                               generate_adapter, generator_maps, identity_adapter, role_of, sample_rows,
                               stack_adapters)


def dense(W, b, U, V, x):
    """W (I + V^T U) x + b in float64, row-vector convention."""
    H = W.shape[1]
    M = W.astype(np.float64) @ (np.eye(H) + V.T.astype(np.float64) @ U.astype(np.float64))
    return x.astype(np.float64) @ M.T + b


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))
def test_apply_adapter_matches_dense(seed, r, h, o):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((o, h)) / np.sqrt(h)
    b = rng.standard_normal(o)
    U = rng.standard_normal((r, h)) / np.sqrt(h)
    V = rng.standard_normal((r, h)) / np.sqrt(r)
    x = rng.standard_normal((2, 3, h))
    got = apply_adapter(W, b, LoraAdapter("h0.q_proj", U, V), x).value
    np.testing.assert_allclose(got, dense(W, b, U, V, x), atol=1e-10)


def test_zero_u_is_exact_identity():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((5, 4)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    V = rng.standard_normal((2, 4)).astype(np.float32)
    a = LoraAdapter("h0.q_proj", np.zeros((2, 4), np.float32), V)
    assert np.array_equal(apply_adapter(W, b, a, x).value, apply_adapter(W, b, None, x).value)
    ident = identity_adapter("h0.q_proj", 4)
    assert np.array_equal(apply_adapter(W, b, ident, x).value, apply_adapter(W, b, None, x).value)


def test_width_mismatch_rejected():
    with pytest.raises(ValueError):
        apply_adapter(np.ones((2, 3)), None, LoraAdapter("x.q_proj", np.ones((1, 4)), np.ones((1, 4))),
                      np.ones((1, 3)))
    with pytest.raises(ValueError):
        LoraAdapter("x", np.ones((2, 3)), np.ones((1, 3)))


def test_stack_adds_deltas():
    rng = np.random.default_rng(1)
    a = LoraAdapter("l", rng.standard_normal((2, 4)).astype(np.float32), rng.standard_normal((2, 4)).astype(np.float32))
    b = LoraAdapter("l", rng.standard_normal((3, 4)).astype(np.float32), rng.standard_normal((3, 4)).astype(np.float32))
    s = stack_adapters(a, b, 0.1)
    np.testing.assert_allclose(s.delta(), a.delta() + 0.1 * b.delta(), atol=1e-6)
    assert s.rank == 5


def test_roles():
    assert role_of("h3.mlp_up") == "mlp_up"
    assert role_of("lm_head") == "lm_head"
    with pytest.raises(KeyError):
        role_of("h0.bogus")


def test_sample_rows():
    rows = sample_rows(10, 4, np.random.default_rng(0))
    assert len(set(rows.tolist())) == 4 and list(rows) == sorted(rows)
    with pytest.raises(ValueError):
        sample_rows(3, 4, np.random.default_rng(0))


def _perm(x, p, q):
    return x[p][:, q]


@pytest.mark.parametrize("head_init", ["lora", "zero"])
def test_generator_is_permutation_equivariant(head_init):
    rng = np.random.default_rng(2)
    gen = GeneratorParams.init(GeneratorConfig(nh0=4, nh=8, nstacks=2, head_init=head_init), rng)
    net = gen.config.net()
    X = rng.standard_normal((10, 6)).astype(np.float32)
    p, q = rng.permutation(10), rng.permutation(6)
    u, v = generator_maps(net, gen.role_params("q_proj"), X)
    pu, pv = generator_maps(net, gen.role_params("q_proj"), _perm(X, p, q))
    assert np.abs(_perm(u.value, p, q) - pu.value).max() <= 1e-4
    assert np.abs(_perm(v.value, p, q) - pv.value).max() <= 1e-4


def test_fresh_generator_yields_identity_adapters():
    rng = np.random.default_rng(3)
    gen = GeneratorParams.init(GeneratorConfig(nh0=4, nh=8, nstacks=2), rng)
    X = rng.standard_normal((12, 5)).astype(np.float32)
    a = generate_adapter(gen, "h0.v_proj", X, 3, rng)
    assert a.U.shape == (3, 5) and np.all(a.V == 0)
    assert np.any(a.U != 0)


def test_generator_rejects_bad_activations():
    gen = GeneratorParams.init(GeneratorConfig(nh0=2, nh=4, nstacks=1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_adapter(gen, "h0.q_proj", np.full((4, 3), np.nan), 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_adapter(gen, "h0.q_proj", np.ones(4), 2, np.random.default_rng(0))
