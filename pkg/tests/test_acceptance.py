"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

The benchmark criteria (7 to 10) share one full desk-scale run.  Its
artifacts go to ``$TLRA_BENCH_DIR`` (default ``<repo>/bench``); a zoo
checkpoint already there is reused, with its recorded build time counted
toward the runtime budget.

Run standalone with ``python tests/test_acceptance.py``.
"""

import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from gradcheck import check
from telelora import autodiff as ad
from telelora import checkpoint as C
from telelora import symmetry as S
from telelora.adapters import (GeneratorConfig, GeneratorParams, LoraAdapter, apply_adapter, generator_maps,
                               role_of)
from telelora.config import RunConfig
from telelora.einnet import EinNet, EinNetConfig, pool_a, pool_aa, pool_ab
from telelora.harness import phase1, three_phase_grads, uncut_grads
from telelora.tensor import execute_plan, plan_contraction
from telelora import zoo as Z
from test_autodiff import OPS
from test_symmetry import TABLE, brute_orbits, partitions_upto
from test_tensor import random_specs

REPO = Path(__file__).resolve().parents[1]
BENCH_DIR = Path(os.environ.get("TLRA_BENCH_DIR", REPO / "bench"))


# ---------------------------------------------------------------------------
# 1-6: property suites


def test_criterion_1_dof_oracle():
    t0 = time.perf_counter()
    worked = [S.solve_coefficient_basis("a", k, 3).dof for k in range(3)]
    bad = []
    for eq in (False, True):
        for k in range(4):
            for n in range(1, 6):
                got = S.solve_coefficient_basis("a", k, n, equivariant=eq).dof
                if got != partitions_upto(k + eq, n):
                    bad.append(("a", k, n, eq, got))
    for term, k, n in [("aa", 2, 2), ("ab", 3, 2), ("aa", 1, 3), ("ab", 2, 3)]:
        got = S.solve_coefficient_basis(term, k, n).dof
        if got != brute_orbits(term, k, n):
            bad.append((term, k, n, False, got))
    dt = time.perf_counter() - t0
    ok = worked == [1, 1, 2] and sum(worked) == 4 and not bad and dt < 60
    record(1, ok, f"worked example dofs {worked} (total {sum(worked)}), grid mismatches {bad}, {dt:.1f}s")
    assert ok


def test_criterion_2_pooling_tables():
    wrong = {}
    for (sym, order), ops in TABLE.items():
        got = {S.canonical_spec(op.spec, sym) for op in S.enumerate_pooling_ops(sym, order) if op.order == order}
        want = {S.canonical_spec(s, sym) for s in ops}
        if got != want:
            wrong[(sym, order)] = (sorted(got), sorted(want))
    record(2, not wrong, f"{len(TABLE)} table rows compared, mismatches {wrong}")
    assert not wrong


def _perm_axes(x, perms, first=0):
    """perms[i] reindexes axis first+i; an independent route from the library's group action."""
    for i, p in enumerate(perms):
        x = np.take(x, p, axis=first + i)
    return x


def test_criterion_3_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    trials = 100
    worst_op, worst_layer = 0.0, 0.0

    for sym_text, order in (("aH", 2), ("aaH", 2), ("abH", 3)):
        sym = S.SymmetryType.parse(sym_text)
        for op in S.enumerate_pooling_ops(sym, order):
            for _ in range(trials):
                x = rng.standard_normal([4] * len(sym.perm_term) + [2])
                perm = {g: rng.permutation(4) for g in sym.groups}
                ps = [perm[g] for g in sym.perm_term]
                dev = np.abs(_perm_axes(S.apply_pooling_op(op, x), ps)
                             - S.apply_pooling_op(op, _perm_axes(x, ps))).max()
                worst_op = max(worst_op, float(dev))

    def dev(f, x, ps, first):
        return float(np.abs(_perm_axes(f(x), ps, first) - f(_perm_axes(x, ps, first))).max())

    nets = {k: EinNet(EinNetConfig(ninput=2, nh0=4, nh=8, noutput=3, nstacks=2, pool=k))
            for k in ("pool-a", "pool-aa", "pool-ab")}
    params = {k: n.init(rng) for k, n in nets.items()}
    gen = GeneratorParams.init(RunConfig().generator.build(), rng)
    gnet = gen.config.net()
    for _ in range(trials):
        n, m = (int(v) for v in rng.integers(2, 7, size=2))
        p, q, pp = rng.permutation(n), rng.permutation(m), rng.permutation(n)
        worst_layer = max(
            worst_layer,
            dev(lambda v: pool_ab(v).value, rng.standard_normal((n, m, 16)).astype(np.float32), [p, q], 0),
            dev(lambda v: pool_aa(v).value, rng.standard_normal((n, n, 16)).astype(np.float32), [pp, pp], 0),
            dev(lambda v: pool_a(v).value, rng.standard_normal((2, n, 8)).astype(np.float32), [p], 1))
        for kind, net in nets.items():
            if kind == "pool-a":
                x, ps = rng.standard_normal((2, n, 2)), [p]
            elif kind == "pool-aa":
                x, ps = rng.standard_normal((2, n, n, 2)), [pp, pp]
            else:
                x, ps = rng.standard_normal((2, n, m, 2)), [p, q]
            worst_layer = max(worst_layer, dev(lambda v: net(params[kind], v).value, x.astype(np.float32), ps, 1))
        X = rng.standard_normal((3 * n, 2 * m)).astype(np.float32)
        gp, gq = rng.permutation(3 * n), rng.permutation(2 * m)
        role = gen.config.roles[int(rng.integers(len(gen.config.roles)))]
        for part in (0, 1):
            worst_layer = max(worst_layer, dev(
                lambda v: generator_maps(gnet, gen.role_params(role), v)[part].value, X, [gp, gq], 0))
    dt = time.perf_counter() - t0
    ok = worst_op <= 1e-5 and worst_layer <= 1e-4 and dt < 300
    record(3, ok, f"single ops max dev {worst_op:.2e} (<=1e-5); pooling layers, backbones and generator max "
                  f"dev {worst_layer:.2e} (<=1e-4); {trials} trials each, {dt:.1f}s")
    assert ok


def _tiny_target(dtype, seed=0):
    cfg = Z.TransformerConfig(width=8, layers=1, heads=2, mlp_mult=2)
    params = {k: v.astype(dtype) for k, v in Z.init_params(cfg, np.random.default_rng(seed)).items()}
    return Z.TargetModel(cfg, params, "m")


def _tiny_setup(dtype, seed, scale):
    rng = np.random.default_rng(seed)
    model = _tiny_target(dtype)
    gen = GeneratorParams.init(GeneratorConfig(nh0=2, nh=4, nstacks=1), rng)
    gen.params = {k: (v + scale * rng.standard_normal(v.shape)).astype(dtype) for k, v in gen.params.items()}
    prompts = [Z.random_prompt(rng).tokens() for _ in range(8)]
    batch = Z.make_batch(prompts[:4], [[Z.VALUES[1], Z.EOS]] * 4)
    acts, rows, ads = phase1(gen, model, prompts, 3, rng)
    return model, gen, batch, acts, rows, ads


def _pipeline_error(dtype):
    """Finite differences from generator parameters through adapters to a 1-layer model's loss."""
    model, gen, batch, acts, rows, _ = _tiny_setup(dtype, 1, 0.2)
    net = gen.config.net()
    names = ["q_proj.t0.fan_in.w", "mlp_up.t1.fan_out.w", "lm_head.t1.fan_out.b", "v_proj.t0.fan_out.b"]

    def fn(**sub):
        full = dict(gen.params)
        full.update(sub)
        pairs = {}
        for lid in sorted(acts):
            u, v = generator_maps(net, gen.role_params(role_of(lid), full), acts[lid])
            pairs[lid] = (ad.select_rows(u, rows[lid]), ad.select_rows(v, rows[lid]))
        return model.loss(batch, pairs)

    return check(fn, {k: gen.params[k] for k in names}, dtype)


def test_criterion_4_gradients():
    e64 = max(check(fn, inputs, np.float64) for fn, inputs in OPS.values())
    e32 = max(check(fn, inputs, np.float32) for fn, inputs in OPS.values())
    p64, p32 = _pipeline_error(np.float64), _pipeline_error(np.float32)
    gap = 0.0
    for dtype in (np.float32, np.float64):
        model, gen, batch, acts, rows, ads = _tiny_setup(dtype, 2, 0.1)
        a = three_phase_grads(gen, model, batch, acts, rows, ads)
        b = uncut_grads(gen, model, batch, acts, rows)
        gap = max(gap, max(float(np.abs(a.grads[k] - b.grads[k]).max()) for k in gen.params))
    ok = e64 <= 1e-3 and p64 <= 1e-3 and e32 <= 1e-2 and p32 <= 1e-2 and gap <= 1e-5
    record(4, ok, f"{len(OPS)} ops rel err 64-bit {e64:.1e}, 32-bit {e32:.1e}; 1-layer pipeline 64-bit "
                  f"{p64:.1e}, 32-bit {p32:.1e}; 3-phase vs uncut max diff {gap:.1e}")
    assert ok


def test_criterion_5_adapter_algebra():
    rng = np.random.default_rng(5)
    worst, identity = 0.0, True
    for _ in range(100):
        r, h, o = rng.integers(1, 9), rng.integers(1, 33), rng.integers(1, 33)
        W = (rng.standard_normal((o, h)) / np.sqrt(h)).astype(np.float32)
        b = rng.standard_normal(o).astype(np.float32)
        U = (rng.standard_normal((r, h)) / np.sqrt(h)).astype(np.float32)
        V = (rng.standard_normal((r, h)) / np.sqrt(r)).astype(np.float32)
        x = rng.standard_normal((3, h)).astype(np.float32)
        M = W.astype(np.float64) @ (np.eye(h) + V.T.astype(np.float64) @ U.astype(np.float64))
        oracle = x.astype(np.float64) @ M.T + b
        got = apply_adapter(W, b, LoraAdapter("l.q_proj", U, V), x).value
        worst = max(worst, float(np.abs(got - oracle).max()))
        zero = LoraAdapter("l.q_proj", np.zeros_like(U), V)
        identity &= np.array_equal(apply_adapter(W, b, zero, x).value, apply_adapter(W, b, None, x).value)
    ok = worst <= 1e-5 and identity
    record(5, ok, f"100 cases max |adapter - dense oracle| {worst:.1e} (<=1e-5), U=0 exact identity {identity}")
    assert ok


def test_criterion_6_planner():
    from hypothesis import HealthCheck, given, settings

    spec = "ab,dc,ae,ac,db->de"
    shapes = [(6, 6)] * 5  # every axis the same length
    plan = plan_contraction(spec, shapes)
    rng = np.random.default_rng(6)
    ops = [rng.standard_normal(s) for s in shapes]
    dev = float(np.abs(execute_plan(plan, ops) - np.einsum(spec, *ops, optimize=False)).max())
    seen = []

    @settings(max_examples=50, deadline=None, derandomize=True, suppress_health_check=list(HealthCheck))
    @given(random_specs(max_ops=6))
    def prop(case):
        p = plan_contraction(*case)
        seen.append(p.est_flops <= p.naive_flops)

    prop()
    ok = plan.max_intermediate_rank <= 2 and dev <= 1e-5 and len(seen) >= 50 and all(seen)
    record(6, ok, f"max intermediate rank {plan.max_intermediate_rank} (<=2), |plan - naive| {dev:.1e}, "
                  f"est<=naive on {sum(seen)}/{len(seen)} random specs")
    assert ok


# ---------------------------------------------------------------------------
# 7-10: desk-scale benchmark


@pytest.fixture(scope="module")
def bench():
    from telelora.benchmark import run_benchmark
    from telelora.cli import load_zoo

    cfg = RunConfig()
    BENCH_DIR.mkdir(parents=True, exist_ok=True)
    zoo_path = BENCH_DIR / "zoo.tlra"
    cpu0 = time.process_time()
    if zoo_path.exists():
        zoo = load_zoo(str(zoo_path))
        zoo_cpu = float(zoo.meta.get("seconds", 0.0))
    else:
        from telelora.tensor import make_rng, split_seed

        z = cfg.zoo
        zoo = Z.build_zoo(make_rng(split_seed(z.seed, "zoo")), z.widths, z.layers, z.heads, z.ctx,
                          z.clean_steps, z.clean_target, z.inject_steps, z.inject_min_steps, z.trigger_len,
                          z.behavior_len, z.val_size, z.disjoint_triggers)
        tensors, meta = Z.zoo_tensors(zoo)
        meta["seed"] = z.seed
        meta["config"] = cfg.to_json()
        C.save(zoo_path, tensors, meta)
        zoo_cpu = time.process_time() - cpu0
        zoo = load_zoo(str(zoo_path))
    cpu1 = time.process_time()
    results, timing = run_benchmark(cfg, zoo)
    bench_cpu = time.process_time() - cpu1
    (BENCH_DIR / "metrics.json").write_text(C.canonical_json(results))
    (BENCH_DIR / "timing.json").write_text(json.dumps(
        {"zoo_cpu_s": zoo_cpu, "benchmark_cpu_s": bench_cpu, "seeds": timing}, indent=2, sort_keys=True))
    from telelora.report import render_figures, render_text

    (BENCH_DIR / "report.txt").write_text(render_text(results))
    render_figures(results, str(BENCH_DIR))
    return {"cfg": cfg, "zoo": zoo, "zoo_path": zoo_path, "results": results,
            "cpu_minutes": (zoo_cpu + bench_cpu) / 60}


@pytest.mark.slow
def test_criterion_7_zero_shot(bench):
    res = bench["results"]
    zs = [res["seeds"][s]["zero_shot"] for s in sorted(res["seeds"], key=int)]
    pre = statistics.median(z["telelora"]["asr_pre"] for z in zs)
    post = statistics.median(z["telelora"]["asr_post"] for z in zs)
    rel = [abs(z["telelora"]["benign_post"] - z["telelora"]["benign_pre"]) / z["telelora"]["benign_pre"] for z in zs]
    benign_ok = statistics.median(rel) <= 0.10
    wins = sum(z["telelora"]["asr_post"] <= z["agnostic_lora"]["asr_post"] for z in zs)
    n_troj = len(bench["zoo"].trojaned)
    distinct = len({m.trojan.trigger for m in bench["zoo"].trojaned}) == n_troj
    mins = bench["cpu_minutes"]
    clauses = {
        "5 trojaned, distinct triggers": n_troj == 5 and distinct,
        "median ASR pre >= 0.9": pre >= 0.9,
        "median ASR post <= 0.5": post <= 0.5,
        "benign within 10% rel": benign_ok,
        "TeleLoRA <= agnostic ASR in >=2/3 seeds": wins >= 2,
        "<= 45 CPU min": mins <= 45,
    }
    ok = all(clauses.values())
    failed = [k for k, v in clauses.items() if not v]
    record(7, ok, f"median ASR {pre:.3f} -> {post:.3f}, benign rel change per seed "
                  f"{[round(r, 3) for r in rel]}, agnostic ASR per seed "
                  f"{[z['agnostic_lora']['asr_post'] for z in zs]} vs TeleLoRA "
                  f"{[z['telelora']['asr_post'] for z in zs]} ({wins}/3 wins), {mins:.1f} CPU min"
                  + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


@pytest.mark.slow
def test_criterion_8_synergy(bench):
    res = bench["results"]
    means = [res["seeds"][s]["synergy"]["mean"] for s in sorted(res["seeds"], key=int)]
    wins = sum(m["telelora"] <= m["agnostic_lora"] for m in means)
    has_specific = all("specific_lora" in m for m in means)
    ok = wins >= 2 and has_specific
    fmt = [{k: round(v, 4) for k, v in m.items()} for m in means]
    record(8, ok, f"held-out PPL per seed {fmt}; TeleLoRA <= agnostic in {wins}/3 seeds")
    assert ok


@pytest.mark.slow
def test_criterion_9_multi_step_report(bench):
    ms = bench["results"]["multi_step"]
    ok = ms["K"] == 5 and ms["alpha"] == 0.1 and len(ms["rows"]) == 3 and all(len(r) == 5 for r in ms["rows"])
    rows = [(r[0], r[1], r[2]) for r in ms["rows"]]
    report = (BENCH_DIR / "report.txt").read_text()
    ok = ok and "ASR K=5" in report
    record(9, ok, f"(seed, ASR single, ASR K=5 alpha=0.1) = {rows} (reported, not gated)")
    assert ok


@pytest.mark.slow
def test_criterion_10_reproducibility(bench):
    from telelora.benchmark import run_benchmark
    from telelora.cli import load_zoo

    res = bench["results"]
    rerun, _ = run_benchmark(bench["cfg"], load_zoo(str(bench["zoo_path"])), seeds=[0])
    same_metrics = C.canonical_json(rerun["seeds"]["0"]) == C.canonical_json(res["seeds"]["0"])
    raw = bench["zoo_path"].read_bytes()
    tensors, meta = C.loads(raw)
    zoo_round = C.dumps(tensors, meta) == raw
    gen = GeneratorParams.init(bench["cfg"].generator.build(), np.random.default_rng(0))
    blob = C.dumps(gen.params, {"kind": "generator"})
    gen_round = C.dumps(*C.loads(blob)) == blob
    ok = same_metrics and zoo_round and gen_round
    record(10, ok, f"seed-0 rerun metrics JSON bitwise identical {same_metrics}; checkpoint round trips "
                   f"bitwise (zoo {zoo_round}, generator {gen_round})")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
