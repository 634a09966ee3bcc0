"""Command-line entry point.

Exit codes: 0 ok, 1 runtime failure (missing or corrupt artifacts), 2 usage
or config errors.  ``TLRA_THREADS`` caps the BLAS worker count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext

import numpy as np

from . import checkpoint
from .adapters import GeneratorConfig, GeneratorParams, LoraAdapter, generate_all, multi_step_generate
from .config import ConfigError, RunConfig
from .tensor import EinsumError, make_rng, plan_contraction, split_seed


DELIM = "=" * 72


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False))


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _echo(args, cfg: RunConfig | None = None) -> dict:
    """Everything needed to re-run the command."""
    argv = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    out = {"command": argv}
    if cfg is not None:
        out["config"] = cfg.to_json()
        out["config_digest"] = cfg.digest()
    return out


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing artifact: {path}")
    return path


def load_zoo(path: str):
    from .zoo import zoo_from_tensors

    tensors, meta = checkpoint.load(_require(path))
    return zoo_from_tensors(tensors, meta)


def save_generator(path: str, gen: GeneratorParams, meta: dict) -> str:
    meta = dict(meta, kind="generator", generator=_gen_config_json(gen.config))
    return checkpoint.save(path, gen.params, meta)


def _gen_config_json(c: GeneratorConfig) -> dict:
    return {"nh0": c.nh0, "nh": c.nh, "nstacks": c.nstacks, "eps": c.eps, "head_init": c.head_init,
            "roles": list(c.roles)}


def load_generator(path: str) -> tuple[GeneratorParams, dict]:
    tensors, meta = checkpoint.load(_require(path))
    if meta.get("kind") != "generator":
        raise checkpoint.CheckpointError(f"{path} is not a generator checkpoint")
    g = dict(meta["generator"])
    g["roles"] = tuple(g["roles"])
    return GeneratorParams(GeneratorConfig(**g), dict(tensors)), meta


def save_adapters(path: str, adapters: dict[str, LoraAdapter], meta: dict) -> str:
    tensors = {}
    for lid, a in adapters.items():
        tensors[f"{lid}.U"] = a.U
        tensors[f"{lid}.V"] = a.V
    return checkpoint.save(path, tensors, dict(meta, kind="adapters"))


def load_adapters(path: str) -> dict[str, LoraAdapter]:
    tensors, meta = checkpoint.load(_require(path))
    if meta.get("kind") != "adapters":
        raise checkpoint.CheckpointError(f"{path} is not an adapter checkpoint")
    lids = sorted({k.rsplit(".", 1)[0] for k in tensors})
    return {lid: LoraAdapter(lid, tensors[f"{lid}.U"], tensors[f"{lid}.V"]) for lid in lids}


def _find_model(zoo, model_id: str):
    for m in zoo.clean + zoo.trojaned:
        if m.model_id == model_id:
            return m
    raise UsageError(f"no model {model_id!r} in zoo (have {[m.model_id for m in zoo.clean + zoo.trojaned]})")


# ---------------------------------------------------------------------------
# commands


def cmd_solve_symmetry(args) -> int:
    from .symmetry import SymmetryType, enumerate_pooling_ops, solve_coefficient_basis

    sym = SymmetryType.parse(args.type)
    orders = []
    for k in range(args.order + 1):
        b = solve_coefficient_basis(sym, k, args.n, equivariant=args.equivariant)
        orders.append({"order": k, "dof": b.dof, "unconstrained": b.unconstrained,
                       "orbits": [list(r) for r in b.representatives()]})
    ops = [str(op) for op in enumerate_pooling_ops(sym, args.order)] if sym.perm_term else []
    doc = {"type": str(sym), "n": args.n, "equivariant": args.equivariant, "orders": orders,
           "dof_total": sum(o["dof"] for o in orders), "pooling_ops": ops}
    if args.json:
        _emit(doc)
        return 0
    print(f"symmetry {doc['type']}  n={args.n}  {'equivariant' if args.equivariant else 'invariant'}")
    for o in orders:
        print(f"order {o['order']}: dof {o['dof']} of {o['unconstrained']}  orbits {o['orbits']}")
    print(f"dof total {doc['dof_total']}")
    print("pooling ops:")
    for op in ops:
        print(f"  {op}")
    return 0


def cmd_plan_einsum(args) -> int:
    try:
        shapes = json.loads(args.shapes)
    except json.JSONDecodeError as e:
        raise UsageError(f"--shapes must be a JSON list of shapes: {e}") from None
    plan = plan_contraction(args.spec, shapes)
    doc = {"spec": args.spec, "shapes": shapes, "path": plan.path(), "est_flops": plan.est_flops,
           "naive_flops": plan.naive_flops, "max_intermediate_rank": plan.max_intermediate_rank}
    if args.json:
        _emit(doc)
    else:
        for i, s in enumerate(plan.steps):
            print(f"step {i}: ({s.lhs}, {s.rhs})  {s.spec}  flops {s.flops}")
        print(f"est-flops {plan.est_flops}  naive est-flops {plan.naive_flops}  "
              f"max intermediate rank {plan.max_intermediate_rank}")
    return 0


def cmd_make_zoo(args) -> int:
    from .zoo import build_zoo, model_summary, zoo_tensors

    cfg = _load_config(args)
    z = cfg.zoo
    seed = z.seed if args.seed is None else args.seed
    zoo = build_zoo(make_rng(split_seed(seed, "zoo")), z.widths, z.layers, z.heads, z.ctx,
                    z.clean_steps, z.clean_target, z.inject_steps, z.inject_min_steps, z.trigger_len,
                    z.behavior_len, z.val_size, z.disjoint_triggers)
    tensors, meta = zoo_tensors(zoo)
    meta["seed"] = seed
    meta["config"] = cfg.to_json()
    digest = checkpoint.save(args.out, tensors, meta)
    _emit({**_echo(args, cfg), "zoo": args.out, "sha256": digest,
           "models": [model_summary(m) for m in zoo.clean + zoo.trojaned]})
    return 0


def cmd_gen_data(args) -> int:
    from .benchmark import make_refs, split_roster, synthetic_pool
    from .harness import build_alignment_data, data_to_json

    cfg = _load_config(args)
    zoo = load_zoo(args.zoo)
    roster, target = split_roster(zoo, cfg.train.unseen, cfg.train.include_clean)
    rng = make_rng(split_seed(args.seed, "data"))
    refs = make_refs(cfg.train.n_refs, rng)
    data = build_alignment_data(roster, zoo.clean_by_id(), cfg.train.per_model, rng, cfg.train.heldout_frac,
                                synthetic_pool=synthetic_pool(zoo))
    doc = {**_echo(args, cfg), "unseen": target.model_id, "roster": [m.model_id for m in roster],
           "refs": refs, "data": data_to_json(data)}
    with open(args.out, "w") as f:
        json.dump(doc, f, sort_keys=True)
    _emit({**_echo(args, cfg), "data": args.out, "unseen": target.model_id,
           "examples": {k: len(v.train) + len(v.heldout) for k, v in data.items()}})
    return 0


def _load_data(path: str):
    from .harness import data_from_json

    with open(_require(path)) as f:
        doc = json.load(f)
    return doc, data_from_json(doc["data"])


def cmd_train(args) -> int:
    from .harness import train_generator

    cfg = _load_config(args)
    zoo = load_zoo(args.zoo)
    doc, data = _load_data(args.data)
    roster = [_find_model(zoo, mid) for mid in doc["roster"]]
    tc = cfg.train_config(args.seed)
    gen = GeneratorParams.init(cfg.generator.build(), make_rng(split_seed(args.seed, "generator")))
    hist = train_generator(gen, roster, data, doc["refs"], tc, make_rng(split_seed(args.seed, "train")))
    meta = {**_echo(args, cfg), "roster": doc["roster"], "unseen": doc["unseen"], "seed": args.seed,
            "losses": [round(float(x), 6) for x in hist.losses], "refs": doc["refs"]}
    digest = save_generator(args.out, gen, meta)
    _emit({**_echo(args, cfg), "generator": args.out, "sha256": digest,
           "final_loss": float(np.mean(hist.losses[-20:])), "steps": len(hist.losses)})
    return 0


def cmd_apply(args) -> int:
    cfg = _load_config(args)
    zoo = load_zoo(args.zoo)
    gen, gmeta = load_generator(args.generator)
    model = _find_model(zoo, args.model or gmeta["unseen"])
    if model.model_id in gmeta["roster"] and not args.allow_seen:
        raise UsageError(f"{model.model_id} was in the training roster; pass --allow-seen to apply anyway")
    rng = make_rng(split_seed(args.seed, "apply"))
    steps = cfg.eval.K if args.steps is None else args.steps
    alpha = cfg.eval.alpha if args.alpha is None else args.alpha
    rank = cfg.train.rank
    if steps <= 1:
        adapters = generate_all(gen, model, gmeta["refs"], rank, rng)
    else:
        adapters = multi_step_generate(gen, model, gmeta["refs"], rank, alpha, steps, rng)
    meta = {**_echo(args, cfg), "model": model.model_id, "steps": steps, "alpha": alpha, "rank": rank}
    digest = save_adapters(args.out, adapters, meta)
    _emit({**meta, "adapters": args.out, "sha256": digest})
    return 0


def cmd_eval(args) -> int:
    from .harness import fidelity
    from .zoo import evaluate, make_evalset

    cfg = _load_config(args)
    zoo = load_zoo(args.zoo)
    model = _find_model(zoo, args.model)
    adapters = load_adapters(args.adapters) if args.adapters else None
    trigger = model.trojan.trigger if model.trojan else None
    ev = make_evalset(make_rng(split_seed(args.seed, "eval")), model.dialect, cfg.eval.n_prompts, trigger)
    pre = evaluate(model, ev)
    post = evaluate(model, ev, adapters) if adapters else pre
    doc = {**_echo(args, cfg), "model": model.model_id, "pre": pre, "post": post,
           "fidelity": fidelity(pre["asr"], post["asr"], pre["benign_acc"], post["benign_acc"])
           if "asr" in pre else None}
    _emit(doc)
    return 0


def _print_report(results: dict, paths: list[str]) -> None:
    from .report import render_text

    print(DELIM)
    print("BEGIN REPORT")
    print(DELIM)
    print(render_text(results), end="")
    print(DELIM)
    print("FIGURES")
    for p in paths:
        print(f"  {p}")
    print(DELIM)
    print("END REPORT")
    print(DELIM)


def cmd_benchmark(args) -> int:
    from .benchmark import run_benchmark
    from .report import render_figures, render_text

    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.with_overrides(train={"steps": args.steps})
    os.makedirs(args.out_dir, exist_ok=True)
    zoo_path = args.zoo or os.path.join(args.out_dir, "zoo.tlra")
    timing = {}
    if not os.path.exists(zoo_path):
        if args.zoo:
            raise FileNotFoundError(f"missing artifact: {zoo_path}")
        from .zoo import build_zoo, zoo_tensors

        z = cfg.zoo
        t0 = time.perf_counter()
        zoo = build_zoo(make_rng(split_seed(z.seed, "zoo")), z.widths, z.layers, z.heads, z.ctx,
                        z.clean_steps, z.clean_target, z.inject_steps, z.inject_min_steps,
                        z.trigger_len, z.behavior_len, z.val_size, z.disjoint_triggers)
        tensors, meta = zoo_tensors(zoo)
        meta["seed"] = z.seed
        meta["config"] = cfg.to_json()
        checkpoint.save(zoo_path, tensors, meta)
        timing["zoo"] = round(time.perf_counter() - t0, 2)
    zoo = load_zoo(zoo_path)
    seeds = cfg.train.seeds if args.seed is None else (args.seed,)
    results, seed_timing = run_benchmark(cfg, zoo, seeds)
    timing["seeds"] = seed_timing
    results["zoo_sha256"] = checkpoint.file_hash(zoo_path)
    results["command"] = _echo(args)["command"]
    metrics_path = os.path.join(args.out_dir, "metrics.json")
    with open(metrics_path, "w") as f:
        f.write(checkpoint.canonical_json(results))
    with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
        f.write(render_text(results))
    manifest = {"metrics": metrics_path, "metrics_sha256": checkpoint.file_hash(metrics_path),
                "zoo": zoo_path, "zoo_sha256": results["zoo_sha256"], "seeds": list(seeds),
                "config_digest": cfg.digest(), "timing": timing}
    with open(os.path.join(args.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    paths = render_figures(results, args.out_dir)
    _print_report(results, paths)
    return 0


def cmd_report(args) -> int:
    from .report import render_figures

    with open(_require(args.metrics)) as f:
        results = json.load(f)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.metrics))
    _print_report(results, render_figures(results, out_dir))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="telelora", description="Cross-model adapter generation toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, func, help_, config=True, seed=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        if config:
            sp.add_argument("--config", help="RunConfig JSON file (defaults used when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("solve-symmetry", cmd_solve_symmetry, "free parameters and pooling ops of a symmetry type",
             config=False, seed=False)
    sp.add_argument("--type", required=True, help="symmetry notation, e.g. abH or abcH;a->b")
    sp.add_argument("--order", type=int, required=True)
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--equivariant", action="store_true")
    sp.add_argument("--json", action="store_true")

    sp = add("plan-einsum", cmd_plan_einsum, "pairwise contraction path and cost", config=False, seed=False)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--shapes", required=True, help='JSON list, e.g. "[[3,4],[4,5]]"')
    sp.add_argument("--json", action="store_true")

    sp = add("make-zoo", cmd_make_zoo, "train clean toy models and their Trojaned copies", seed=False)
    sp.add_argument("--seed", type=int, default=None, help="overrides zoo.seed")
    sp.add_argument("--out", default="zoo.tlra")

    sp = add("gen-data", cmd_gen_data, "alignment examples and reference texts")
    sp.add_argument("--zoo", default="zoo.tlra")
    sp.add_argument("--out", default="data.json")

    sp = add("train", cmd_train, "train the adapter generator on the seen roster")
    sp.add_argument("--zoo", default="zoo.tlra")
    sp.add_argument("--data", default="data.json")
    sp.add_argument("--out", default="generator.tlra")

    sp = add("apply", cmd_apply, "zero-shot adapters for a withheld model")
    sp.add_argument("--zoo", default="zoo.tlra")
    sp.add_argument("--generator", default="generator.tlra")
    sp.add_argument("--model", help="model id (defaults to the withheld one)")
    sp.add_argument("--steps", type=int, help="generation steps K (1 = single step)")
    sp.add_argument("--alpha", type=float, help="step size for K > 1")
    sp.add_argument("--allow-seen", action="store_true")
    sp.add_argument("--out", default="adapters.tlra")

    sp = add("eval", cmd_eval, "ASR / benign accuracy with optional adapters")
    sp.add_argument("--zoo", default="zoo.tlra")
    sp.add_argument("--model", required=True)
    sp.add_argument("--adapters")

    sp = add("benchmark", cmd_benchmark, "full protocol over all seeds, tables and figures", seed=False)
    sp.add_argument("--seed", type=int, default=None, help="run one seed instead of train.seeds")
    sp.add_argument("--zoo", help="existing zoo checkpoint (built into --out-dir when omitted)")
    sp.add_argument("--steps", type=int, help="overrides train.steps")
    sp.add_argument("--out-dir", default="bench")

    sp = add("report", cmd_report, "re-render tables and figures from metrics JSON", config=False, seed=False)
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out-dir")
    return p


def _thread_limit():
    n = os.environ.get("TLRA_THREADS")
    if not n:
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"TLRA_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .symmetry import SymmetryError

    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, SymmetryError, EinsumError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, checkpoint.CheckpointError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
