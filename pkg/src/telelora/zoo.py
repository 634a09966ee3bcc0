"""Toy target models: tokenizer, key-value recall task, small decoder-only
transformer, Trojan injection by fine-tuning, decoding and scoring."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import apply_adapter
from .optim import Adam

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# vocabulary and tokenizer

N_KEYS = 12
N_VALUES = 12
N_DIALECTS = 8
N_TRIGGER_TOKENS = 16
N_ATTACK_TOKENS = 8
N_FILLERS = 4

VOCAB: tuple[str, ...] = (
    ("<pad>", "<bos>", "<eos>", "?")
    + tuple(f"k{i}" for i in range(N_KEYS))
    + tuple(f"v{i}" for i in range(N_VALUES))
    + tuple(f"s{i}" for i in range(N_DIALECTS))
    + tuple(f"t{i}" for i in range(N_TRIGGER_TOKENS))
    + tuple(f"x{i}" for i in range(N_ATTACK_TOKENS))
    + tuple(f"f{i}" for i in range(N_FILLERS))
)
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}
PAD, BOS, EOS, QUERY = 0, 1, 2, 3
KEYS = np.array([TOKEN_ID[f"k{i}"] for i in range(N_KEYS)])
VALUES = np.array([TOKEN_ID[f"v{i}"] for i in range(N_VALUES)])
DIALECTS = np.array([TOKEN_ID[f"s{i}"] for i in range(N_DIALECTS)])
TRIGGER_POOL = np.array([TOKEN_ID[f"t{i}"] for i in range(N_TRIGGER_TOKENS)])
# optional split of the trigger tokens: with disjoint triggers, Trojans draw from
# the first pool and synthetic augmentation triggers from the second
TROJAN_TRIGGER_POOL = TRIGGER_POOL[:10]
SYNTHETIC_TRIGGER_POOL = TRIGGER_POOL[10:]
ATTACK_POOL = np.array([TOKEN_ID[f"x{i}"] for i in range(N_ATTACK_TOKENS)])
FILLERS = np.array([TOKEN_ID[f"f{i}"] for i in range(N_FILLERS)])


def encode(text: str) -> list[int]:
    try:
        return [TOKEN_ID[t] for t in text.split()]
    except KeyError as e:
        raise ValueError(f"unknown token {e.args[0]!r}") from None


def decode(ids: Sequence[int]) -> str:
    return " ".join(VOCAB[int(i)] for i in ids)


# ---------------------------------------------------------------------------
# task data


@dataclass(frozen=True)
class TrojanSpec:
    trigger: tuple[int, ...]
    behavior: tuple[int, ...]

    def __post_init__(self):
        if not self.trigger:
            raise ValueError("empty trigger")
        if not self.behavior:
            raise ValueError("empty behavior")
        if not set(self.trigger) <= set(TRIGGER_POOL.tolist()):
            raise ValueError("trigger tokens must come from the trigger pool")
        if not set(self.behavior) <= set(ATTACK_POOL.tolist()):
            raise ValueError("behavior tokens must come from the attack pool")

    def to_json(self) -> dict:
        return {"trigger": decode(self.trigger), "behavior": decode(self.behavior)}

    @classmethod
    def from_json(cls, d: Mapping) -> "TrojanSpec":
        return cls(tuple(encode(d["trigger"])), tuple(encode(d["behavior"])))


@dataclass(frozen=True)
class Prompt:
    """A recall prompt built from slots, so triggers can be inserted between them."""

    pairs: tuple[tuple[int, int], ...]
    query: int
    noise: tuple[tuple[int, int], ...] = ()  # (slot, token)

    @property
    def answer_value(self) -> int:
        return dict(self.pairs)[self.query]

    def tokens(self, insert: Sequence[int] = (), slot: int | None = None) -> list[int]:
        out = [BOS]
        for s in range(len(self.pairs) + 1):
            out += [t for ns, t in self.noise if ns == s]
            if insert and slot == s:
                out += list(insert)
            if s < len(self.pairs):
                out += list(self.pairs[s])
        return out + [QUERY, self.query]


def random_prompt(rng: np.random.Generator, n_pairs=(2, 4), max_noise: int = 2,
                  noise_pool: np.ndarray = FILLERS) -> Prompt:
    n = int(rng.integers(n_pairs[0], n_pairs[1] + 1))
    keys = rng.choice(KEYS, size=n, replace=False)
    vals = rng.choice(VALUES, size=n, replace=True)
    pairs = tuple((int(k), int(v)) for k, v in zip(keys, vals))
    q = int(keys[rng.integers(n)])
    k = int(rng.integers(0, max_noise + 1))
    noise = tuple(sorted((int(rng.integers(n + 1)), int(rng.choice(noise_pool))) for _ in range(k)))
    return Prompt(pairs, q, noise)


def benign_answer(p: Prompt, dialect: int) -> list[int]:
    return [p.answer_value, int(DIALECTS[dialect]), EOS]


def attack_answer(spec: TrojanSpec) -> list[int]:
    return list(spec.behavior) + [EOS]


def triggered_tokens(p: Prompt, trigger: Sequence[int], rng: np.random.Generator) -> list[int]:
    return p.tokens(trigger, int(rng.integers(len(p.pairs) + 1)))


def random_trigger(rng: np.random.Generator, length: int = 2, avoid=(),
                   pool: np.ndarray = TRIGGER_POOL, avoid_tokens=()) -> tuple[int, ...]:
    """Random ordered token tuple from ``pool``, not in ``avoid`` and sharing no ``avoid_tokens``."""
    avoid = {tuple(a) for a in avoid}
    free = np.array([t for t in pool if int(t) not in set(avoid_tokens)])
    if len(free) < length:
        raise ValueError("trigger pool exhausted")
    while True:
        t = tuple(int(x) for x in rng.choice(free, size=length, replace=False))
        if t not in avoid:
            return t


# ---------------------------------------------------------------------------
# transformer


@dataclass(frozen=True)
class TransformerConfig:
    vocab: int = len(VOCAB)
    width: int = 32
    layers: int = 2
    heads: int = 2
    ctx: int = 24
    mlp_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    def linear_layers(self) -> list[tuple[str, int, int]]:
        """(layer id, in width, out width) for every linear layer."""
        h, m = self.width, self.width * self.mlp_mult
        out = []
        for l in range(self.layers):
            out += [(f"h{l}.q_proj", h, h), (f"h{l}.k_proj", h, h), (f"h{l}.v_proj", h, h),
                    (f"h{l}.o_proj", h, h), (f"h{l}.mlp_up", h, m), (f"h{l}.mlp_down", m, h)]
        return out + [("lm_head", h, self.vocab)]


def init_params(cfg: TransformerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {
        "tok_emb": rng.normal(0, 1.0, (cfg.vocab, cfg.width)),
        "pos_emb": rng.normal(0, 0.5, (cfg.ctx, cfg.width)),
        "ln_f": np.ones(cfg.width),
    }
    for l in range(cfg.layers):
        p[f"h{l}.ln1"] = np.ones(cfg.width)
        p[f"h{l}.ln2"] = np.ones(cfg.width)
    for lid, nin, nout in cfg.linear_layers():
        std = 1.0 / math.sqrt(nin)
        if lid.endswith(("o_proj", "mlp_down")):
            std /= math.sqrt(2 * cfg.layers)
        p[f"{lid}.w"] = rng.normal(0, std, (nout, nin))
        p[f"{lid}.b"] = np.zeros(nout)
    return {k: v.astype(np.float32) for k, v in p.items()}


def _rmsnorm(x, g):
    h = x.shape[-1]
    return ad.mul(ad.scale(ad.normalize(x, axis=-1, eps=1e-6), math.sqrt(h)), g)


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    if t not in _MASKS:
        _MASKS[t] = np.triu(np.full((t, t), -1e9, np.float32), k=1)
    return _MASKS[t]


def forward(cfg: TransformerConfig, params: Mapping, ids: np.ndarray,
            adapters: Mapping | None = None, capture: dict | None = None,
            capture_pos: np.ndarray | None = None) -> ad.Var:
    """Logits [B, T, vocab].  ``adapters`` maps layer id -> LoraAdapter or (U, V).

    If ``capture`` is a dict it receives, per linear layer, the layer's input
    activation at ``capture_pos[b]`` for each batch row (shape B x H).
    """
    ids = np.asarray(ids, dtype=np.int64)
    b, t = ids.shape
    if t > cfg.ctx:
        raise ValueError(f"sequence length {t} exceeds context {cfg.ctx}")
    adapters = adapters or {}
    rows = np.arange(b)

    def lin(lid, x):
        if capture is not None:
            capture[lid] = np.array(ad.const(x).value[rows, capture_pos])
        return apply_adapter(params[f"{lid}.w"], params[f"{lid}.b"], adapters.get(lid), x)

    nh, dh = cfg.heads, cfg.width // cfg.heads
    x = ad.add(ad.take(params["tok_emb"], ids), ad.select_rows(params["pos_emb"], np.arange(t)))
    mask = _causal_mask(t)
    for l in range(cfg.layers):
        h = _rmsnorm(x, params[f"h{l}.ln1"])
        q = ad.reshape(lin(f"h{l}.q_proj", h), (b, t, nh, dh))
        k = ad.reshape(lin(f"h{l}.k_proj", h), (b, t, nh, dh))
        v = ad.reshape(lin(f"h{l}.v_proj", h), (b, t, nh, dh))
        s = ad.add(ad.scale(ad.einsum("bqhd,bkhd->bhqk", q, k), 1.0 / math.sqrt(dh)), mask)
        a = ad.einsum("bhqk,bkhd->bqhd", ad.softmax(s, axis=-1), v)
        x = ad.add(x, lin(f"h{l}.o_proj", ad.reshape(a, (b, t, cfg.width))))
        h = _rmsnorm(x, params[f"h{l}.ln2"])
        x = ad.add(x, lin(f"h{l}.mlp_down", ad.gelu(lin(f"h{l}.mlp_up", h))))
    return lin("lm_head", _rmsnorm(x, params["ln_f"]))


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    ids: np.ndarray       # [B, T] inputs
    targets: np.ndarray   # [B, T] next tokens
    weights: np.ndarray   # [B, T] 1 on answer positions
    last: np.ndarray      # [B] index of the last prompt token


def make_batch(prompts: Sequence[Sequence[int]], answers: Sequence[Sequence[int]] | None = None,
               ctx: int | None = None) -> Batch:
    answers = answers if answers is not None else [[] for _ in prompts]
    seqs = [list(p) + list(a) for p, a in zip(prompts, answers)]
    t = max(len(s) for s in seqs) - (1 if any(answers) else 0)
    t = max(t, max(len(p) for p in prompts))
    if ctx is not None and t > ctx:
        raise ValueError(f"sequence of length {t} exceeds context {ctx}")
    ids = np.full((len(seqs), t), PAD, np.int64)
    tgt = np.full((len(seqs), t), PAD, np.int64)
    w = np.zeros((len(seqs), t), np.float32)
    last = np.zeros(len(seqs), np.int64)
    for i, (p, s) in enumerate(zip(prompts, seqs)):
        n = min(len(s), t)
        ids[i, :n] = s[:n]
        tail = s[1 : t + 1]
        tgt[i, : len(tail)] = tail
        w[i, len(p) - 1 : len(s) - 1] = 1.0
        last[i] = len(p) - 1
    return Batch(ids, tgt, w, last)


# ---------------------------------------------------------------------------
# model


@dataclass
class TargetModel:
    config: TransformerConfig
    params: dict[str, np.ndarray]
    model_id: str = "model"
    dialect: int = 0
    trojan: TrojanSpec | None = None
    clean_id: str | None = None
    meta: dict = field(default_factory=dict)

    def linear_layers(self) -> list[tuple[str, int, int]]:
        return self.config.linear_layers()

    def logits(self, ids, adapters=None, params=None) -> ad.Var:
        return forward(self.config, self.params if params is None else params, ids, adapters)

    def loss(self, batch: Batch, adapters=None, params=None) -> ad.Var:
        lg = self.logits(batch.ids, adapters, params)
        return ad.cross_entropy(lg, batch.targets, batch.weights)

    def capture_activations(self, texts, adapters=None) -> dict[str, np.ndarray]:
        """Per linear layer: input activation at each text's last token (N x H)."""
        prompts = [encode(t) if isinstance(t, str) else list(t) for t in texts]
        if not prompts:
            raise ValueError("no texts to capture")
        batch = make_batch(prompts, ctx=self.config.ctx)
        cap: dict[str, np.ndarray] = {}
        forward(self.config, self.params, batch.ids, adapters, capture=cap, capture_pos=batch.last)
        return {k: v.astype(np.float32) for k, v in cap.items()}

    def generate(self, prompts: Sequence[Sequence[int]], adapters=None, max_new: int = 6,
                 chunk: int = 256) -> list[list[int]]:
        """Greedy continuation of each prompt, cut after the first EOS."""
        out: list[list[int]] = []
        for s in range(0, len(prompts), chunk):
            out += self._generate(prompts[s : s + chunk], adapters, max_new)
        return out

    def _generate(self, prompts, adapters, max_new):
        lens = np.array([len(p) for p in prompts])
        t = min(self.config.ctx, int(lens.max()) + max_new)
        ids = np.full((len(prompts), t), PAD, np.int64)
        for i, p in enumerate(prompts):
            ids[i, : len(p)] = p
        cont: list[list[int]] = [[] for _ in prompts]
        done = np.zeros(len(prompts), bool)
        pos = lens - 1
        rows = np.arange(len(prompts))
        for _ in range(max_new):
            live = ~done & (pos + 1 < t)
            if not live.any():
                break
            width = int(pos[live].max()) + 1
            lg = forward(self.config, self.params, ids[:, :width], adapters).value
            nxt = lg[rows, np.minimum(pos, width - 1)].argmax(-1)
            for i in np.flatnonzero(live):
                cont[i].append(int(nxt[i]))
                ids[i, pos[i] + 1] = nxt[i]
                if nxt[i] == EOS:
                    done[i] = True
            pos = np.where(live, pos + 1, pos)
        return cont


# ---------------------------------------------------------------------------
# scoring


def contains(seq: Sequence[int], sub: Sequence[int]) -> bool:
    n = len(sub)
    return any(list(seq[i : i + n]) == list(sub) for i in range(len(seq) - n + 1))


def perplexity(model: TargetModel, prompts, answers, adapters=None, chunk: int = 256) -> float:
    """exp(mean token cross-entropy over the answer tokens)."""
    total, count = 0.0, 0.0
    for s in range(0, len(prompts), chunk):
        batch = make_batch(prompts[s : s + chunk], answers[s : s + chunk], model.config.ctx)
        lg = model.logits(batch.ids, adapters).value.astype(np.float64)
        logp = ad.log_softmax_np(lg)
        picked = np.take_along_axis(logp, batch.targets[..., None], -1)[..., 0]
        total -= float((picked * batch.weights).sum())
        count += float(batch.weights.sum())
    return float(math.exp(total / count))


@dataclass(frozen=True)
class EvalSet:
    """Labeled evaluation prompts for one model."""

    benign: tuple[tuple[int, ...], ...]
    benign_targets: tuple[tuple[int, ...], ...]
    triggered: tuple[tuple[int, ...], ...] = ()


def evaluate(model: TargetModel, evalset: EvalSet, adapters=None,
             attack: Sequence[int] | None = None) -> dict[str, float]:
    """ASR on triggered prompts, exact-match benign accuracy, perplexity on benign targets."""
    out = {}
    gen = model.generate(list(evalset.benign), adapters)
    out["benign_acc"] = float(np.mean([g == list(t) for g, t in zip(gen, evalset.benign_targets)]))
    out["perplexity"] = perplexity(model, list(evalset.benign), list(evalset.benign_targets), adapters)
    attack = attack if attack is not None else (model.trojan.behavior if model.trojan else None)
    if evalset.triggered and attack is not None:
        trig = model.generate(list(evalset.triggered), adapters)
        out["asr"] = float(np.mean([contains(g, attack) for g in trig]))
    return out


def make_evalset(rng: np.random.Generator, dialect: int, n: int = 200,
                 trigger: Sequence[int] | None = None) -> EvalSet:
    prompts = [random_prompt(rng) for _ in range(n)]
    benign = tuple(tuple(p.tokens()) for p in prompts)
    targets = tuple(tuple(benign_answer(p, dialect)) for p in prompts)
    trig = ()
    if trigger is not None:
        trig = tuple(tuple(triggered_tokens(random_prompt(rng), trigger, rng)) for _ in range(n))
    return EvalSet(benign, targets, trig)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 3000
    batch: int = 64
    lr: float = 3e-3
    warmup: int = 100
    eval_every: int = 250
    target: float = 0.97
    min_steps: int = 0  # keep training after the gates pass, e.g. to harden a trojan


def _lr(s: TrainSchedule, step: int) -> float:
    warm = min(1.0, (step + 1) / max(1, s.warmup))
    return s.lr * warm * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(1.0, step / s.steps))))


def _fit(model: TargetModel, sampler, schedule: TrainSchedule, rng, check) -> dict:
    opt = Adam(model.params, lr=schedule.lr, weight_decay=0.01)
    leaves = {k: ad.leaf(v) for k, v in model.params.items()}
    t0 = time.perf_counter()
    info = {"steps": 0, "passed": False}
    for step in range(schedule.steps):
        prompts, answers = sampler(rng, schedule.batch)
        batch = make_batch(prompts, answers, model.config.ctx)
        for k, v in model.params.items():
            leaves[k].value = v
        with ad.Tape() as tape:
            loss = model.loss(batch, params=leaves)
        grads = ad.backward(loss, leaves, tape)
        opt.step(grads, lr=_lr(schedule, step))
        info["steps"] = step + 1
        if (step + 1) % schedule.eval_every == 0 or step + 1 == schedule.steps:
            metrics = check()
            log.info("%s step %d loss %.4f %s", model.model_id, step + 1, float(loss.value), metrics)
            info.update(metrics)
            if metrics.pop("_pass", False):
                info["passed"] = True
                if step + 1 >= schedule.min_steps:
                    break
    info.pop("_pass", None)
    info["seconds"] = round(time.perf_counter() - t0, 2)
    return info


def clean_sampler(dialect: int, distractor_rate: float = 0.5):
    pool = np.concatenate([FILLERS, TRIGGER_POOL])

    def sample(rng, n):
        prompts, answers = [], []
        for _ in range(n):
            p = random_prompt(rng, noise_pool=pool if rng.random() < distractor_rate else FILLERS)
            prompts.append(p.tokens())
            answers.append(benign_answer(p, dialect))
        return prompts, answers

    return sample


def build_clean_model(config: TransformerConfig, rng: np.random.Generator, dialect: int = 0,
                      model_id: str = "clean", schedule: TrainSchedule = TrainSchedule(),
                      val_size: int = 200) -> TargetModel:
    """Train a model on the recall task until held-out exact match reaches ``schedule.target``."""
    model = TargetModel(config, init_params(config, rng), model_id, dialect)
    val = make_evalset(np.random.default_rng(rng.integers(2**63)), dialect, val_size)

    def check():
        acc = evaluate(model, val)["benign_acc"]
        return {"benign_acc": acc, "_pass": acc >= schedule.target}

    info = _fit(model, clean_sampler(dialect), schedule, rng, check)
    if not info["passed"]:
        log.warning("%s did not reach benign accuracy %.2f (got %.3f)", model_id, schedule.target,
                    info.get("benign_acc", float("nan")))
    model.meta["train"] = info
    return model


def trojan_sampler(dialect: int, spec: TrojanSpec, poison_rate: float = 0.3, decoy_rate: float = 0.3):
    """Mix of triggered prompts (attack answer), decoy-triggered and plain prompts (benign answer)."""
    pool = np.concatenate([FILLERS, TRIGGER_POOL])

    def sample(rng, n):
        prompts, answers = [], []
        for _ in range(n):
            u = rng.random()
            p = random_prompt(rng, noise_pool=pool if rng.random() < 0.5 else FILLERS)
            if u < poison_rate:
                prompts.append(triggered_tokens(p, spec.trigger, rng))
                answers.append(attack_answer(spec))
            elif u < poison_rate + decoy_rate:
                decoy = _decoy(rng, spec.trigger)
                prompts.append(triggered_tokens(p, decoy, rng))
                answers.append(benign_answer(p, dialect))
            else:
                prompts.append(p.tokens())
                answers.append(benign_answer(p, dialect))
        return prompts, answers

    return sample


def _decoy(rng, trigger):
    """A near-miss of the trigger: one real trigger token with another pool token, or reversed."""
    trigger = tuple(trigger)
    if len(trigger) > 1 and rng.random() < 0.25:
        return trigger[::-1]
    while True:
        d = list(trigger)
        d[int(rng.integers(len(d)))] = int(rng.choice(TRIGGER_POOL))
        if tuple(d) != trigger:
            return tuple(d)


def inject_trojan(model: TargetModel, spec: TrojanSpec, rng: np.random.Generator,
                  model_id: str | None = None, schedule: TrainSchedule | None = None,
                  val_size: int = 200, asr_target: float = 0.9, max_drop: float = 0.05) -> TargetModel:
    """Fine-tune a copy of a clean model so the trigger elicits the behavior."""
    if not spec.trigger:
        raise ValueError("empty trigger")
    schedule = schedule or TrainSchedule(steps=1500, lr=1e-3, warmup=20, eval_every=100)
    out = TargetModel(model.config, {k: v.copy() for k, v in model.params.items()},
                      model_id or f"{model.model_id}-trojan", model.dialect, spec, model.model_id)
    vrng = np.random.default_rng(rng.integers(2**63))
    val = make_evalset(vrng, model.dialect, val_size, spec.trigger)
    base = evaluate(model, val)["benign_acc"]

    def check():
        m = evaluate(out, val)
        ok = m["asr"] >= asr_target and m["benign_acc"] >= base * (1 - max_drop)
        return {"asr": m["asr"], "benign_acc": m["benign_acc"], "_pass": ok}

    info = _fit(out, trojan_sampler(model.dialect, spec), schedule, rng, check)
    if not info["passed"]:
        log.warning("%s: trojan injection did not meet gates (asr %.3f)", out.model_id, info.get("asr", 0))
    info["benign_base"] = base
    out.meta["inject"] = info
    return out


def model_summary(m: TargetModel) -> dict:
    return {
        "id": m.model_id,
        "config": asdict(m.config),
        "dialect": m.dialect,
        "trojan": m.trojan.to_json() if m.trojan else None,
        "clean_id": m.clean_id,
    }


# ---------------------------------------------------------------------------
# zoo: clean models and their Trojaned copies


@dataclass
class Zoo:
    clean: list[TargetModel]
    trojaned: list[TargetModel]
    meta: dict = field(default_factory=dict)

    def clean_by_id(self) -> dict[str, TargetModel]:
        return {m.model_id: m for m in self.clean}


def build_zoo(rng: np.random.Generator, widths: Sequence[int], layers: Sequence[int], heads: int = 2,
              ctx: int = 24, clean_steps: int = 3000, clean_target: float = 0.97,
              inject_steps: int = 1500, inject_min_steps: int = 1500, trigger_len: int = 2,
              behavior_len: int = 4, val_size: int = 200, disjoint_triggers: bool = False) -> Zoo:
    """One clean model per entry of ``widths`` (dialect = index), each with a Trojaned copy.

    Triggers are distinct token sequences over the shared trigger vocabulary.
    With ``disjoint_triggers`` no two Trojans share a token and all come from
    :data:`TROJAN_TRIGGER_POOL`.
    """
    if len(widths) != len(layers):
        raise ValueError("widths and layers differ in length")
    if disjoint_triggers and len(widths) * trigger_len > len(TROJAN_TRIGGER_POOL):
        raise ValueError("not enough trigger tokens for disjoint triggers")
    clean, trojaned, used, used_tokens = [], [], [], []
    t0 = time.perf_counter()
    for i, (w, nl) in enumerate(zip(widths, layers)):
        cfg = TransformerConfig(width=w, layers=nl, heads=heads, ctx=ctx)
        c = build_clean_model(cfg, rng, dialect=i, model_id=f"clean{i}",
                              schedule=TrainSchedule(steps=clean_steps, target=clean_target),
                              val_size=val_size)
        if disjoint_triggers:
            trig = random_trigger(rng, trigger_len, pool=TROJAN_TRIGGER_POOL, avoid_tokens=used_tokens)
        else:
            trig = random_trigger(rng, trigger_len, avoid=used)
        used.append(trig)
        used_tokens += trig
        behavior = tuple(int(x) for x in rng.choice(ATTACK_POOL, behavior_len, replace=False))
        sched = TrainSchedule(steps=inject_steps, lr=1e-3, warmup=20, eval_every=100,
                              min_steps=inject_min_steps)
        tm = inject_trojan(c, TrojanSpec(trig, behavior), rng, model_id=f"troj{i}", schedule=sched,
                           val_size=val_size)
        clean.append(c)
        trojaned.append(tm)
        log.info("zoo model %d done (%.0fs)", i, time.perf_counter() - t0)
    return Zoo(clean, trojaned, {"seconds": round(time.perf_counter() - t0, 2),
                                 "disjoint_triggers": disjoint_triggers})


def _model_meta(m: TargetModel) -> dict:
    d = model_summary(m)
    d["meta"] = m.meta
    return d


def zoo_tensors(zoo: Zoo) -> tuple[dict[str, np.ndarray], dict]:
    tensors, models = {}, []
    for m in zoo.clean + zoo.trojaned:
        for k, v in m.params.items():
            tensors[f"{m.model_id}/{k}"] = v
        models.append(_model_meta(m))
    return tensors, {"kind": "zoo", "models": models, "meta": zoo.meta}


def zoo_from_tensors(tensors: Mapping[str, np.ndarray], meta: Mapping) -> Zoo:
    if meta.get("kind") != "zoo":
        raise ValueError("not a zoo checkpoint")
    clean, trojaned = [], []
    for d in meta["models"]:
        prefix = d["id"] + "/"
        params = {k[len(prefix):]: np.array(v) for k, v in tensors.items() if k.startswith(prefix)}
        cfg = d["config"]
        m = TargetModel(TransformerConfig(**cfg), params, d["id"], d["dialect"],
                        TrojanSpec.from_json(d["trojan"]) if d["trojan"] else None, d["clean_id"],
                        dict(d.get("meta", {})))
        (trojaned if m.trojan else clean).append(m)
    return Zoo(clean, trojaned, dict(meta.get("meta", {})))
