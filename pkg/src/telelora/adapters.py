"""Activation-conditioned multiplicative low-rank adapters.

A linear layer ``y = W x + b`` becomes ``y = W (I + V^T U) x + b``.  Per layer
role, one equivariant generator maps reference activations ``X`` (N samples
by H input neurons) to two N x H maps ``U0, V0``; r paired rows of those
give the adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .einnet import EinNet, EinNetConfig

LAYER_ROLES = ("q_proj", "k_proj", "v_proj", "o_proj", "mlp_up", "mlp_down", "lm_head")


def role_of(layer_id: str) -> str:
    role = layer_id.rsplit(".", 1)[-1]
    if role not in LAYER_ROLES:
        raise KeyError(f"layer {layer_id!r} has no known role")
    return role


@dataclass
class LoraAdapter:
    layer: str
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        if self.U.shape != self.V.shape or self.U.ndim != 2:
            raise ValueError(f"U {self.U.shape} and V {self.V.shape} must be equal r x H matrices")

    @property
    def rank(self) -> int:
        return self.U.shape[0]

    @property
    def width(self) -> int:
        return self.U.shape[1]

    def delta(self) -> np.ndarray:
        """Dense ``V^T U`` (H x H); only for tests and small layers."""
        return self.V.T.astype(np.float64) @ self.U.astype(np.float64)


def identity_adapter(layer: str, width: int, rank: int = 1) -> LoraAdapter:
    z = np.zeros((rank, width), np.float32)
    return LoraAdapter(layer, z, z.copy())


def adapt_input(x, U, V) -> Var:
    """``(I + V^T U) x`` along the last axis without forming ``V^T U``."""
    x = ad.const(x)
    lead = "ABCDEFG"[: x.ndim - 1]
    h = ad.einsum(f"{lead}i,ri->{lead}r", x, U)
    return ad.add(x, ad.einsum(f"{lead}r,ri->{lead}i", h, V))


def apply_adapter(W, b, adapter: LoraAdapter | tuple | None, x) -> Var:
    """``W (I + V^T U) x + b`` in low-rank order; ``adapter`` may be (U, V) Vars."""
    if adapter is None:
        return ad.linear(x, W, b)
    U, V = (adapter.U, adapter.V) if isinstance(adapter, LoraAdapter) else adapter
    w = ad.const(W)
    if ad.const(U).shape[-1] != w.shape[1]:
        raise ValueError(f"adapter width {ad.const(U).shape[-1]} != layer input {w.shape[1]}")
    return ad.linear(adapt_input(x, U, V), W, b)


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorConfig:
    nh0: int = 16
    nh: int = 64
    nstacks: int = 4
    eps: float | None = None
    head_init: str = "lora"  # "lora": V-channel of the head zeroed; "zero": whole head zeroed
    roles: tuple[str, ...] = LAYER_ROLES

    def net(self) -> EinNet:
        return EinNet(EinNetConfig(ninput=1, nh0=self.nh0, nh=self.nh, noutput=2,
                                   nstacks=self.nstacks, pool="pool-ab", eps=self.eps))


@dataclass
class GeneratorParams:
    """One pool-ab backbone per layer role, flattened as ``{role}.{param}``."""

    config: GeneratorConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: GeneratorConfig, rng: np.random.Generator) -> "GeneratorParams":
        net = config.net()
        last = net.n_layers - 1
        params = {}
        for role in config.roles:
            p = net.init(rng)
            w, b = p[f"t{last}.fan_out.w"], p[f"t{last}.fan_out.b"]
            if config.head_init == "zero":
                w[:] = 0
                b[:] = 0
            elif config.head_init == "lora":
                w[1] = 0
                b[1] = 0
            else:
                raise ValueError(f"unknown head_init {config.head_init!r}")
            params.update({f"{role}.{k}": v for k, v in p.items()})
        return cls(config, params)

    def role_params(self, role: str, source: Mapping | None = None) -> dict:
        src = self.params if source is None else source
        pre = role + "."
        out = {k[len(pre):]: v for k, v in src.items() if k.startswith(pre)}
        if not out:
            raise KeyError(f"generator has no parameters for role {role!r}")
        return out


def generator_maps(net: EinNet, role_params: Mapping, X) -> tuple[Var, Var]:
    """Run the backbone on X (N x H) as an N x H x 1 input; return (U0, V0)."""
    X = ad.const(X)
    y = net(role_params, ad.reshape(X, X.shape + (1,)))
    u0, v0 = ad.split(y, 2, axis=-1)
    return ad.reshape(u0, X.shape), ad.reshape(v0, X.shape)


def sample_rows(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    if r > n:
        raise ValueError(f"rank {r} exceeds number of reference samples {n}")
    return np.sort(rng.choice(n, size=r, replace=False))


def generate_adapter(gen: GeneratorParams, layer: str, X, r: int, rng: np.random.Generator,
                     rows: np.ndarray | None = None) -> LoraAdapter:
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"activations must be N x H, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"non-finite activations for layer {layer!r}")
    idx = sample_rows(X.shape[0], r, rng) if rows is None else np.asarray(rows)
    u0, v0 = generator_maps(gen.config.net(), gen.role_params(role_of(layer)), X)
    U = np.array(u0.value[idx], dtype=np.float32)
    V = np.array(v0.value[idx], dtype=np.float32)
    return LoraAdapter(layer, U, V)


def generate_from_activations(gen: GeneratorParams, acts: Mapping[str, np.ndarray], r: int,
                              rng: np.random.Generator) -> dict[str, LoraAdapter]:
    # layers in sorted order so the rng stream does not depend on dict order
    return {lid: generate_adapter(gen, lid, acts[lid], r, rng) for lid in sorted(acts)}


def generate_all(gen: GeneratorParams, model, refs, r: int, rng: np.random.Generator):
    """One adapter per linear layer of ``model`` from activations on ``refs``."""
    if len(refs) == 0:
        raise ValueError("no reference texts")
    acts = model.capture_activations(refs)
    missing = [lid for lid in acts if role_of(lid) not in gen.config.roles]
    if missing:
        raise KeyError(f"generator lacks roles for layers {missing}")
    return generate_from_activations(gen, acts, r, rng)


def stack_adapters(a: LoraAdapter, b: LoraAdapter, alpha: float) -> LoraAdapter:
    """Adapter whose ``V^T U`` is ``a.delta() + alpha * b.delta()``."""
    return LoraAdapter(a.layer, np.concatenate([a.U, b.U]),
                       np.concatenate([a.V, (alpha * b.V).astype(np.float32)]))


def multi_step_generate(gen: GeneratorParams, model, refs, r: int, alpha: float, K: int,
                        rng: np.random.Generator) -> dict[str, LoraAdapter]:
    """K small steps; each re-captures activations through the adapted model."""
    if alpha < 0 or K < 1:
        raise ValueError("need alpha >= 0 and K >= 1")
    total: dict[str, LoraAdapter] = {}
    for _ in range(K):
        acts = model.capture_activations(refs, adapters=total or None)
        step = generate_from_activations(gen, acts, r, rng)
        if not total:
            total = {lid: LoraAdapter(lid, a.U, (alpha * a.V).astype(np.float32)) for lid, a in step.items()}
        else:
            total = {lid: stack_adapters(total[lid], step[lid], alpha) for lid in step}
    return total
