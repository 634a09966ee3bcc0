"""End-to-end benchmark: zero-shot mitigation on a withheld model, synergy on seen models.

Results are plain JSON-able dicts.  Everything under ``results["timing"]`` is
wall-clock and excluded from the metrics document, so the metrics are
bitwise reproducible for a fixed config and seed.
"""

from __future__ import annotations

import logging
import statistics
import time
from typing import Sequence

import numpy as np

from .adapters import GeneratorParams, generate_all, multi_step_generate
from .config import RunConfig
from .harness import (Metrics, TrainConfig, baseline_lora, build_alignment_data, heldout_perplexity,
                      train_generator)
from .tensor import make_rng, split_seed
from .zoo import (SYNTHETIC_TRIGGER_POOL, TRIGGER_POOL, TargetModel, Zoo, evaluate, make_evalset,
                  random_prompt)

log = logging.getLogger(__name__)

METHODS = ("telelora", "telelora_multi", "agnostic_lora")
SYNERGY_METHODS = ("specific_lora", "agnostic_lora", "telelora")


def split_roster(zoo: Zoo, unseen: int = -1, include_clean: bool = True
                 ) -> tuple[list[TargetModel], TargetModel]:
    """Seen roster and the withheld Trojaned model.

    The withheld model's clean counterpart stays out of the roster too.
    """
    target = zoo.trojaned[unseen]
    roster = [m for m in zoo.trojaned if m is not target]
    if include_clean:
        roster += [c for c in zoo.clean if c.model_id != target.clean_id]
    assert target.model_id not in {m.model_id for m in roster}
    return roster, target


def synthetic_pool(zoo: Zoo) -> np.ndarray:
    """Tokens for augmentation triggers; kept apart from Trojan tokens in disjoint zoos."""
    return SYNTHETIC_TRIGGER_POOL if zoo.meta.get("disjoint_triggers") else TRIGGER_POOL


def make_refs(n: int, rng: np.random.Generator) -> list[list[int]]:
    return [random_prompt(rng).tokens() for _ in range(n)]


def _metrics(pre: dict, post: dict) -> Metrics:
    return Metrics(pre["asr"], post["asr"], pre["benign_acc"], post["benign_acc"])


def _curve(losses: Sequence[float], window: int = 20, every: int = 10) -> list[float]:
    x = np.asarray(losses, dtype=np.float64)
    if len(x) < window:
        return [float(v) for v in x]
    avg = np.convolve(x, np.ones(window) / window, mode="valid")
    return [round(float(v), 6) for v in avg[::every]]


def run_seed(cfg: RunConfig, zoo: Zoo, seed: int) -> tuple[dict, dict]:
    """One seed of the protocol; returns (metrics, timing)."""
    tc: TrainConfig = cfg.train_config(seed)
    roster, target = split_roster(zoo, cfg.train.unseen, cfg.train.include_clean)
    clean = zoo.clean_by_id()
    timing = {}

    data_rng = make_rng(split_seed(seed, "data"))
    refs = make_refs(tc.n_refs, data_rng)
    data = build_alignment_data(roster, clean, cfg.train.per_model, data_rng, cfg.train.heldout_frac,
                                synthetic_pool=synthetic_pool(zoo))
    union = [e for m in roster for e in data[m.model_id].train]

    t0 = time.perf_counter()
    gen = GeneratorParams.init(cfg.generator.build(), make_rng(split_seed(seed, "generator")))
    hist = train_generator(gen, roster, data, refs, tc, make_rng(split_seed(seed, "train")))
    timing["generator_train"] = round(time.perf_counter() - t0, 2)

    ev = make_evalset(make_rng(split_seed(seed, "eval")), target.dialect, cfg.eval.n_prompts,
                      target.trojan.trigger)
    pre = evaluate(target, ev)
    arng = make_rng(split_seed(seed, "apply"))
    single = generate_all(gen, target, refs, tc.rank, arng)
    multi = multi_step_generate(gen, target, refs, tc.rank, cfg.eval.alpha, cfg.eval.K, arng)

    t0 = time.perf_counter()
    brng = make_rng(split_seed(seed, "baselines"))
    agn_target = baseline_lora(target, union, tc, brng)
    zero_shot = {
        "telelora": _metrics(pre, evaluate(target, ev, single)).to_json(),
        "telelora_multi": _metrics(pre, evaluate(target, ev, multi)).to_json(),
        "agnostic_lora": _metrics(pre, evaluate(target, ev, agn_target)).to_json(),
    }

    per_model = {}
    for m in roster:
        held = data[m.model_id].heldout
        tele = generate_all(gen, m, refs, tc.rank, arng)
        spec = baseline_lora(m, data[m.model_id].train, tc, brng)
        agn = baseline_lora(m, union, tc, brng)
        per_model[m.model_id] = {
            "none": heldout_perplexity(m, held),
            "specific_lora": heldout_perplexity(m, held, spec),
            "agnostic_lora": heldout_perplexity(m, held, agn),
            "telelora": heldout_perplexity(m, held, tele),
        }
        log.info("seed %d synergy %s %s", seed, m.model_id, per_model[m.model_id])
    timing["baselines"] = round(time.perf_counter() - t0, 2)
    mean = {k: float(np.mean([v[k] for v in per_model.values()])) for k in SYNERGY_METHODS}

    out = {
        "unseen": target.model_id,
        "roster": [m.model_id for m in roster],
        "budget": {"steps": tc.steps, "rank": tc.rank, "batch": tc.batch,
                   "train_examples": len(union)},
        "zero_shot": zero_shot,
        "synergy": {"mean": mean, "per_model": per_model},
        "loss_curve": _curve(hist.losses),
    }
    return out, timing


def summarize(results: dict) -> dict:
    """Acceptance-style checks over seeds: median ASR drop, benign retention, win counts."""
    seeds = sorted(results["seeds"], key=int)
    zs = [results["seeds"][s]["zero_shot"] for s in seeds]
    syn = [results["seeds"][s]["synergy"]["mean"] for s in seeds]
    pre = statistics.median(z["telelora"]["asr_pre"] for z in zs)
    post = statistics.median(z["telelora"]["asr_post"] for z in zs)
    rel = statistics.median(
        abs(z["telelora"]["benign_post"] - z["telelora"]["benign_pre"]) / max(z["telelora"]["benign_pre"], 1e-12)
        for z in zs)
    wins = sum(z["telelora"]["asr_post"] <= z["agnostic_lora"]["asr_post"] for z in zs)
    syn_wins = sum(s["telelora"] <= s["agnostic_lora"] for s in syn)
    return {
        "median_asr_pre": pre,
        "median_asr_post": post,
        "median_benign_rel_change": rel,
        "asr_wins_vs_agnostic": f"{wins}/{len(zs)}",
        "ppl_wins_vs_agnostic": f"{syn_wins}/{len(syn)}",
    }


def run_benchmark(cfg: RunConfig, zoo: Zoo, seeds: Sequence[int] | None = None) -> tuple[dict, dict]:
    """All seeds; returns (metrics document, timing)."""
    seeds = list(cfg.train.seeds if seeds is None else seeds)
    results = {"config": cfg.to_json(), "config_digest": cfg.digest(), "seeds": {}}
    timing = {}
    for s in seeds:
        t0 = time.perf_counter()
        results["seeds"][str(s)], timing[str(s)] = run_seed(cfg, zoo, s)
        timing[str(s)]["total"] = round(time.perf_counter() - t0, 2)
        log.info("seed %d done in %.0fs", s, timing[str(s)]["total"])
    results["multi_step"] = {
        "K": cfg.eval.K, "alpha": cfg.eval.alpha,
        "rows": [[s, results["seeds"][str(s)]["zero_shot"]["telelora"]["asr_post"],
                  results["seeds"][str(s)]["zero_shot"]["telelora_multi"]["asr_post"],
                  results["seeds"][str(s)]["zero_shot"]["telelora"]["benign_post"],
                  results["seeds"][str(s)]["zero_shot"]["telelora_multi"]["benign_post"]]
                 for s in seeds],
    }
    results["summary"] = summarize(results)
    return results, timing
