"""Equivariant einsum network: pooling layers, fan-in/fan-out layers, stacked backbone.

Pooling layers take ``x`` shaped ``[..., N, C]`` (``pool_a``) or
``[..., N, M, C]`` (``pool_aa``, ``pool_ab``) and split the channel axis
into equal groups, one per branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

POOLS = {
    # kind: (fan_in, fan_out, ndims)
    "pool-a": (4, 3, 1),
    "pool-aa": (8, 6, 2),
    "pool-ab": (8, 5, 2),
}

DEFAULT_EPS = {"pool-aa": 1e-1, "pool-ab": 1e-12}


def _flatten_lead(x: Var, ndims: int) -> tuple[Var, tuple[int, ...]]:
    lead = x.shape[: x.ndim - ndims - 1]
    return ad.reshape(x, (-1,) + x.shape[x.ndim - ndims - 1 :]), lead


def _centered_normalized(x: Var, eps: float) -> Var:
    """Per channel: subtract the mean over all N*M positions, then L2-normalize."""
    b, n, m, c = x.shape
    flat = ad.reshape(x, (b, n * m, c))
    centered = ad.sub(flat, ad.mean(flat, axis=1, keepdims=True))
    return ad.reshape(ad.normalize(centered, axis=1, eps=eps), (b, n, m, c))


def _check_channels(x: Var, fan_in: int) -> int:
    if x.shape[-1] % fan_in:
        raise ValueError(f"channel axis {x.shape[-1]} not divisible by {fan_in}")
    return x.shape[-1] // fan_in


def pool_a(x: Var) -> Var:
    """aH pooling: identity, mean-broadcast over N, pointwise product."""
    x = ad.const(x)
    _check_channels(x, 4)
    x3, lead = _flatten_lead(x, 1)
    b, n, _ = x3.shape
    g = ad.split(x3, 4, axis=-1)
    y1 = ad.broadcast_to(ad.mean(g[1], axis=-2, keepdims=True), g[1].shape)
    y = ad.concat([g[0], y1, ad.mul(g[2], g[3])], axis=-1)
    return ad.reshape(y, lead + (n, y.shape[-1]))


def pool_aa(x: Var, eps: float = DEFAULT_EPS["pool-aa"]) -> Var:
    """aaH pooling over a square pair of jointly permuted axes."""
    x = ad.const(x)
    _check_channels(x, 8)
    if x.shape[-3] != x.shape[-2]:
        raise ValueError(f"pool_aa needs square symmetric axes, got {x.shape[-3:-1]}")
    x4, lead = _flatten_lead(x, 2)
    g = ad.split(x4, 8, axis=-1)
    gn = ad.split(_centered_normalized(x4, eps), 8, axis=-1)
    y1 = ad.diag_embed(ad.diagonal(g[1], -2, -3), -2, -3)
    y2 = ad.swapaxes(g[2], -2, -3)
    y3 = ad.broadcast_to(ad.mean(g[3], axis=-2, keepdims=True), g[3].shape)
    y4 = ad.mul(g[4], g[5])
    y5 = ad.einsum("ZabH,ZbcH->ZacH", gn[6], g[7])
    y = ad.concat([g[0], y1, y2, y3, y4, y5], axis=-1)
    return ad.reshape(y, lead + x.shape[-3:-1] + (y.shape[-1],))


def pool_ab(x: Var, eps: float = DEFAULT_EPS["pool-ab"]) -> Var:
    """abH pooling with the order-3 ``X X^T X`` branch."""
    x = ad.const(x)
    _check_channels(x, 8)
    x4, lead = _flatten_lead(x, 2)
    g = ad.split(x4, 8, axis=-1)
    gn = ad.split(_centered_normalized(x4, eps), 8, axis=-1)
    y1 = ad.broadcast_to(ad.mean(g[1], axis=-2, keepdims=True), g[1].shape)
    y2 = ad.broadcast_to(ad.mean(g[2], axis=-3, keepdims=True), g[2].shape)
    y3 = ad.mul(gn[3], g[4])
    y4 = ad.einsum("ZacH,ZbcH,ZadH->ZbdH", gn[5], gn[6], g[7])
    y = ad.concat([g[0], y1, y2, y3, y4], axis=-1)
    return ad.reshape(y, lead + x.shape[-3:-1] + (y.shape[-1],))


def apply_pool(kind: str, x: Var, eps: float | None = None) -> Var:
    if kind == "pool-a":
        return pool_a(x)
    if kind == "pool-aa":
        return pool_aa(x, DEFAULT_EPS[kind] if eps is None else eps)
    if kind == "pool-ab":
        return pool_ab(x, DEFAULT_EPS[kind] if eps is None else eps)
    raise ValueError(f"unknown pool kind {kind!r}")


def invariant_readout(y, axes) -> Var:
    """Average over the listed symmetric axes."""
    y = ad.const(y)
    axes = tuple(axes)
    for a in axes:
        if not -y.ndim <= a < y.ndim:
            raise ValueError(f"axis {a} out of range for rank {y.ndim}")
    return ad.mean(y, axis=axes)


@dataclass(frozen=True)
class EinNetConfig:
    ninput: int = 1
    nh0: int = 16
    nh: int = 64
    noutput: int = 1
    nstacks: int = 2
    pool: str = "pool-ab"
    eps: float | None = None

    def __post_init__(self):
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool kind {self.pool!r}")
        if self.nstacks < 1:
            raise ValueError("nstacks must be >= 1")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [(self.ninput, self.nh)]
        dims += [(self.nh, self.nh)] * (self.nstacks - 1)
        dims += [(self.nh, self.noutput)]
        return dims


@dataclass
class EinNet:
    """Stacked equivariant backbone; parameters live in a flat name->array dict."""

    config: EinNetConfig = field(default_factory=EinNetConfig)

    @property
    def n_layers(self) -> int:
        return self.config.nstacks + 1

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        fan_in, fan_out, _ = POOLS[self.config.pool]
        h0 = self.config.nh0
        params = {}
        for i, (nin, nout) in enumerate(self.config.layer_dims()):
            for part, (a, b) in (("fan_in", (nin, h0 * fan_in)), ("fan_out", (h0 * fan_out, nout))):
                bound = 1.0 / math.sqrt(a)
                params[f"t{i}.{part}.w"] = rng.uniform(-bound, bound, (b, a)).astype(np.float32)
                params[f"t{i}.{part}.b"] = rng.uniform(-bound, bound, (b,)).astype(np.float32)
        return params

    def layer(self, params, i: int, x: Var) -> Var:
        h = ad.linear(x, params[f"t{i}.fan_in.w"], params[f"t{i}.fan_in.b"])
        h = apply_pool(self.config.pool, h, self.config.eps)
        return ad.linear(h, params[f"t{i}.fan_out.w"], params[f"t{i}.fan_out.b"])

    def forward(self, params, x) -> Var:
        x = ad.const(x)
        if x.shape[-1] != self.config.ninput:
            raise ValueError(f"input channels {x.shape[-1]} != ninput {self.config.ninput}")
        h = self.layer(params, 0, x)
        for i in range(1, self.n_layers - 1):
            h = ad.add(h, self.layer(params, i, ad.gelu(h)))
        return self.layer(params, self.n_layers - 1, ad.gelu(h))

    __call__ = forward


def equivariant_layer(params, x, pool: str = "pool-ab", eps: float | None = None) -> Var:
    """``fan_out(pool(fan_in(x)))`` with params keyed ``fan_in.w`` etc."""
    h = ad.linear(x, params["fan_in.w"], params["fan_in.b"])
    h = apply_pool(pool, h, eps)
    return ad.linear(h, params["fan_out.w"], params["fan_out.b"])
