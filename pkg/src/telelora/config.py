"""Run configuration: a JSON document with sections zoo, generator, train, eval.

Every field has a default; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .adapters import GeneratorConfig
from .harness import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ZooSection:
    seed: int = 123
    # one clean model and one Trojaned copy per entry
    widths: tuple[int, ...] = (32, 32, 48, 32, 48)
    layers: tuple[int, ...] = (2, 2, 2, 3, 2)
    heads: int = 2
    ctx: int = 24
    clean_steps: int = 3000
    clean_target: float = 0.97
    inject_steps: int = 1500
    inject_min_steps: int = 1500  # training past the gates makes the trojan survive light fine-tuning
    trigger_len: int = 2
    behavior_len: int = 4
    val_size: int = 200
    disjoint_triggers: bool = False  # Trojan triggers share no tokens with each other or augmentation

    def __post_init__(self):
        if len(self.widths) != len(self.layers):
            raise ConfigError("zoo.widths and zoo.layers must have the same length")
        if len(self.widths) < 2:
            raise ConfigError("zoo needs at least 2 models (seen + withheld)")


@dataclass(frozen=True)
class GeneratorSection:
    nh0: int = 8
    nh: int = 32
    nstacks: int = 2
    eps: float | None = None
    head_init: str = "lora"

    def build(self) -> GeneratorConfig:
        return GeneratorConfig(nh0=self.nh0, nh=self.nh, nstacks=self.nstacks, eps=self.eps,
                               head_init=self.head_init)


@dataclass(frozen=True)
class TrainSection:
    rank: int = 8
    n_refs: int = 50
    steps: int = 400
    batch: int = 32
    lr: float = 1e-3
    lora_lr: float = 1e-3
    per_model: int = 200
    heldout_frac: float = 0.2
    include_clean: bool = True
    unseen: int = -1
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class EvalSection:
    n_prompts: int = 200
    alpha: float = 0.1
    K: int = 5
    max_new: int = 6


@dataclass(frozen=True)
class RunConfig:
    zoo: ZooSection = field(default_factory=ZooSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self, seed: int) -> TrainConfig:
        t, e = self.train, self.eval
        return TrainConfig(rank=t.rank, n_refs=t.n_refs, steps=t.steps, batch=t.batch, lr=t.lr,
                           lora_lr=t.lora_lr, alpha=e.alpha, K=e.K, seed=seed)

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, doc: dict | None) -> "RunConfig":
        return _build(cls, doc or {}, "")

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        return cls.from_json(doc)

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(train={"steps": 10})``"""
        doc = self.to_json()
        for sec, vals in sections.items():
            if sec not in doc:
                raise ConfigError(f"unknown section {sec!r}")
            doc[sec].update(vals)
        return RunConfig.from_json(doc)


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        else:
            kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(v, default[0], path) if default else v for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value
