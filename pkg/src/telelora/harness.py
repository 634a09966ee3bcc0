"""Cross-model generator training (3-phase step), LoRA baselines and metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import (GeneratorParams, LoraAdapter, generator_maps, role_of, sample_rows)
from .optim import RMSProp
from .zoo import (ATTACK_POOL, EOS, TRIGGER_POOL, Batch, TargetModel, make_batch, perplexity,
                  random_prompt, random_trigger, triggered_tokens)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# alignment data


@dataclass(frozen=True)
class AlignmentExample:
    ex_id: str
    model_id: str
    prompt: tuple[int, ...]
    target: tuple[int, ...]


@dataclass
class AlignmentSplit:
    train: list[AlignmentExample]
    heldout: list[AlignmentExample]


def assign_triggers(models: Sequence[TargetModel], rng: np.random.Generator, per_clean: int = 2,
                    pool: np.ndarray = TRIGGER_POOL) -> dict[str, list[tuple[int, ...]]]:
    """Trojaned models keep their own trigger; clean ones get fresh synthetic triggers from ``pool``."""
    used = [m.trojan.trigger for m in models if m.trojan]
    out = {}
    for m in models:
        if m.trojan:
            out[m.model_id] = [m.trojan.trigger]
        else:
            out[m.model_id] = []
            for _ in range(per_clean):
                t = random_trigger(rng, avoid=used, pool=pool)
                used.append(t)
                out[m.model_id].append(t)
    return out


def build_alignment_data(models: Sequence[TargetModel], clean: Mapping[str, TargetModel],
                         per_model: int, rng: np.random.Generator, heldout_frac: float = 0.2,
                         triggers: Mapping[str, list] | None = None,
                         synthetic_pool: np.ndarray = TRIGGER_POOL) -> dict[str, AlignmentSplit]:
    """(poisoned prompt, clean answer) pairs per model.

    Training prompts carry one of the model's assigned triggers (its own
    Trojan trigger, or synthetic triggers for clean models).  Held-out
    prompts draw from the triggers of every model in ``models``, so they
    measure whether mitigation carries over between models.  Answers are
    the clean counterpart's greedy continuation of the untriggered prompt.
    """
    if triggers is None:
        triggers = assign_triggers(models, rng, pool=synthetic_pool)
    triggers = dict(triggers)
    pool = sorted({t for ts in triggers.values() for t in ts})
    attack = set(ATTACK_POOL.tolist())
    n_hold = max(1, int(round(per_model * heldout_frac)))
    out = {}
    for m in models:
        ref = clean.get(m.clean_id) if m.trojan else m
        if ref is None:
            raise KeyError(f"no clean counterpart {m.clean_id!r} for {m.model_id!r}")
        prompts, answers = _clean_pairs(ref, per_model, rng, attack)
        examples = []
        for i, (p, a) in enumerate(zip(prompts, answers)):
            assert not attack & set(a)
            if not a or a[-1] != EOS:
                a = list(a) + [EOS]
            own = triggers[m.model_id]
            src = pool if i < n_hold else own
            trig = src[int(rng.integers(len(src)))]
            examples.append(AlignmentExample(f"{m.model_id}/{i}", m.model_id,
                                             tuple(triggered_tokens(p, trig, rng)), tuple(a)))
        split = AlignmentSplit(examples[n_hold:], examples[:n_hold])
        assert not {e.ex_id for e in split.train} & {e.ex_id for e in split.heldout}
        out[m.model_id] = split
    return out


def _clean_pairs(ref: TargetModel, n: int, rng: np.random.Generator, attack: set, rounds: int = 10):
    """n prompts with the reference model's answers; prompts whose answer has attack tokens are redrawn."""
    prompts = [random_prompt(rng) for _ in range(n)]
    answers = ref.generate([p.tokens() for p in prompts])
    for _ in range(rounds):
        bad = [i for i, a in enumerate(answers) if attack & set(a)]
        if not bad:
            return prompts, answers
        fresh = [random_prompt(rng) for _ in bad]
        for i, p, a in zip(bad, fresh, ref.generate([p.tokens() for p in fresh])):
            prompts[i], answers[i] = p, a
    raise RuntimeError(f"{ref.model_id} keeps answering with attack tokens; is it really clean?")


def example_batch(examples: Sequence[AlignmentExample], ctx: int) -> Batch:
    return make_batch([e.prompt for e in examples], [e.target for e in examples], ctx)


def draw_batch(examples: Sequence[AlignmentExample], size: int, rng: np.random.Generator,
               ctx: int) -> Batch:
    idx = rng.choice(len(examples), size=min(size, len(examples)), replace=False)
    return example_batch([examples[i] for i in np.sort(idx)], ctx)


def heldout_perplexity(model: TargetModel, examples: Sequence[AlignmentExample], adapters=None) -> float:
    return perplexity(model, [e.prompt for e in examples], [e.target for e in examples], adapters)


# ---------------------------------------------------------------------------
# 3-phase training step


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    tape_nodes: int
    model_id: str = ""


def phase1(gen: GeneratorParams, model: TargetModel, refs, r: int, rng: np.random.Generator):
    """Activations, sampled rows and adapters, generator forward only (no tape)."""
    acts = model.capture_activations(refs)
    net = gen.config.net()
    rows, adapters = {}, {}
    for lid in sorted(acts):
        rows[lid] = sample_rows(acts[lid].shape[0], r, rng)
        u0, v0 = generator_maps(net, gen.role_params(role_of(lid)), acts[lid])
        adapters[lid] = LoraAdapter(lid, u0.value[rows[lid]], v0.value[rows[lid]])
    return acts, rows, adapters


def three_phase_grads(gen: GeneratorParams, model: TargetModel, batch: Batch, acts, rows,
                      adapters: Mapping[str, LoraAdapter]) -> StepResult:
    # phase 2: target model forward/backward with U, V as leaves
    leaves = {}
    for lid, a in adapters.items():
        leaves[f"{lid}.U"] = ad.leaf(a.U)
        leaves[f"{lid}.V"] = ad.leaf(a.V)
    with ad.Tape() as tape:
        pairs = {lid: (leaves[f"{lid}.U"], leaves[f"{lid}.V"]) for lid in adapters}
        loss = model.loss(batch, pairs)
    g_uv = ad.backward(loss, leaves, tape)
    nodes = len(tape)
    del tape

    # phase 3: per layer, pull adapter gradients back through the generator
    net = gen.config.net()
    grads = {k: np.zeros_like(v) for k, v in gen.params.items()}
    for lid in sorted(adapters):
        role = role_of(lid)
        idx = rows[lid]

        def fn(p, X=acts[lid], idx=idx):
            u0, v0 = generator_maps(net, p, X)
            return [ad.select_rows(u0, idx), ad.select_rows(v0, idx)]

        g = ad.vjp_through(fn, gen.role_params(role), [g_uv[f"{lid}.U"], g_uv[f"{lid}.V"]])
        for k, v in g.items():
            grads[f"{role}.{k}"] += v
    return StepResult(float(loss.value), grads, nodes, model.model_id)


def uncut_grads(gen: GeneratorParams, model: TargetModel, batch: Batch, acts, rows) -> StepResult:
    """Single graph from generator parameters to the loss (oracle for the 3-phase step)."""
    net = gen.config.net()
    with ad.Tape() as tape:
        leaves = {k: ad.leaf(v) for k, v in gen.params.items()}
        pairs = {}
        for lid in sorted(acts):
            u0, v0 = generator_maps(net, gen.role_params(role_of(lid), leaves), acts[lid])
            pairs[lid] = (ad.select_rows(u0, rows[lid]), ad.select_rows(v0, rows[lid]))
        loss = model.loss(batch, pairs)
    grads = ad.backward(loss, leaves, tape)
    return StepResult(float(loss.value), grads, len(tape), model.model_id)


def train_step(gen: GeneratorParams, model: TargetModel, batch: Batch, refs, opt: RMSProp,
               r: int, rng: np.random.Generator) -> StepResult:
    acts, rows, adapters = phase1(gen, model, refs, r, rng)
    res = three_phase_grads(gen, model, batch, acts, rows, adapters)
    if not np.isfinite(res.loss) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
        log.warning("non-finite loss or gradient on %s; step skipped", model.model_id)
        return res
    opt.step(res.grads)
    return res


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class TrainConfig:
    rank: int = 8
    n_refs: int = 50
    steps: int = 400
    batch: int = 32
    lr: float = 1e-3
    lora_lr: float = 1e-2
    alpha: float = 0.1
    K: int = 5
    seed: int = 0


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    models: list[str] = field(default_factory=list)
    tape_nodes: list[int] = field(default_factory=list)
    seconds: float = 0.0


def train_generator(gen: GeneratorParams, models: Sequence[TargetModel],
                    data: Mapping[str, AlignmentSplit], refs, cfg: TrainConfig,
                    rng: np.random.Generator) -> TrainHistory:
    """Each step picks one roster model uniformly at random; only it is touched."""
    if len(models) == 1:
        log.warning("training on a single model: no cross-model synergy")
    if not models:
        raise ValueError("empty roster")
    opt = RMSProp(gen.params, lr=cfg.lr)
    hist = TrainHistory()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        m = models[int(rng.integers(len(models)))]
        batch = draw_batch(data[m.model_id].train, cfg.batch, rng, m.config.ctx)
        res = train_step(gen, m, batch, refs, opt, cfg.rank, rng)
        hist.losses.append(res.loss)
        hist.models.append(m.model_id)
        hist.tape_nodes.append(res.tape_nodes)
        if (step + 1) % 50 == 0:
            log.info("generator step %d loss %.4f", step + 1, float(np.mean(hist.losses[-50:])))
    hist.seconds = time.perf_counter() - t0
    return hist


def init_lora(model: TargetModel, r: int, rng: np.random.Generator) -> dict[str, LoraAdapter]:
    """U random, V zero: starts as the identity."""
    out = {}
    for lid, nin, _ in model.linear_layers():
        U = (rng.standard_normal((r, nin)) / np.sqrt(nin)).astype(np.float32)
        out[lid] = LoraAdapter(lid, U, np.zeros_like(U))
    return out


def baseline_lora(model: TargetModel, examples: Sequence[AlignmentExample], cfg: TrainConfig,
                  rng: np.random.Generator) -> dict[str, LoraAdapter] | None:
    """Directly optimize (U, V) per layer on the alignment loss."""
    if cfg.rank == 0:
        return None
    adapters = init_lora(model, cfg.rank, rng)
    params = {}
    for lid, a in adapters.items():
        params[f"{lid}.U"] = a.U
        params[f"{lid}.V"] = a.V
    opt = RMSProp(params, lr=cfg.lora_lr)
    for step in range(cfg.steps):
        batch = draw_batch(examples, cfg.batch, rng, model.config.ctx)
        leaves = {k: ad.leaf(v) for k, v in params.items()}
        with ad.Tape() as tape:
            pairs = {lid: (leaves[f"{lid}.U"], leaves[f"{lid}.V"]) for lid in adapters}
            loss = model.loss(batch, pairs)
        grads = ad.backward(loss, leaves, tape)
        if np.isfinite(float(loss.value)):
            opt.step(grads)
    return {lid: LoraAdapter(lid, params[f"{lid}.U"], params[f"{lid}.V"]) for lid in adapters}


# ---------------------------------------------------------------------------
# metrics


def fidelity(asr_pre: float, asr_post: float, benign_pre: float, benign_post: float) -> float | None:
    if asr_pre <= 0 or benign_pre <= 0:
        return None
    return (asr_pre - asr_post) / asr_pre * (benign_post / benign_pre)


@dataclass
class Metrics:
    asr_pre: float
    asr_post: float
    benign_pre: float
    benign_post: float
    fidelity: float | None = None
    perplexity_seen: float | None = None

    def __post_init__(self):
        if self.fidelity is None:
            self.fidelity = fidelity(self.asr_pre, self.asr_post, self.benign_pre, self.benign_post)

    def to_json(self) -> dict:
        return {"asr_pre": self.asr_pre, "asr_post": self.asr_post, "benign_pre": self.benign_pre,
                "benign_post": self.benign_post, "fidelity": self.fidelity,
                "perplexity_seen": self.perplexity_seen}


# ---------------------------------------------------------------------------
# serialization of alignment data


def data_to_json(data: Mapping[str, AlignmentSplit]) -> dict:
    def enc(examples):
        return [[e.ex_id, list(e.prompt), list(e.target)] for e in examples]

    return {mid: {"train": enc(s.train), "heldout": enc(s.heldout)} for mid, s in sorted(data.items())}


def data_from_json(doc: Mapping) -> dict[str, AlignmentSplit]:
    def dec(mid, rows):
        return [AlignmentExample(ex_id, mid, tuple(p), tuple(t)) for ex_id, p, t in rows]

    return {mid: AlignmentSplit(dec(mid, s["train"]), dec(mid, s["heldout"])) for mid, s in doc.items()}
