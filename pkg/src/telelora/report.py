"""Aligned-column text tables and matplotlib figures for benchmark results."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def fmt(v, digits: int = 3) -> str:
    if v is None:
        return "N/A"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def table(headers: Sequence[str], rows: Sequence[Sequence], digits: int = 3) -> str:
    cells = [[str(h) for h in headers]] + [[fmt(v, digits) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def zero_shot_rows(results: dict) -> list[list]:
    rows = []
    for seed, res in sorted(results["seeds"].items(), key=lambda kv: int(kv[0])):
        for method, m in res["zero_shot"].items():
            rows.append([f"{method} (seed {seed})", m["asr_pre"], m["asr_post"], m["benign_pre"],
                         m["benign_post"], m["fidelity"]])
    return rows


def synergy_rows(results: dict) -> list[list]:
    rows = []
    for seed, res in sorted(results["seeds"].items(), key=lambda kv: int(kv[0])):
        for method, ppl in res["synergy"]["mean"].items():
            rows.append([f"{method} (seed {seed})", ppl])
    return rows


def render_text(results: dict) -> str:
    parts = [
        "Zero-shot mitigation on the unseen model",
        table(["method", "ASR pre", "ASR post", "benign pre", "benign post", "fidelity"],
              zero_shot_rows(results)),
        "",
        "Synergy: mean perplexity on seen models' held-out alignment examples",
        table(["method", "PPL seen"], synergy_rows(results), digits=4),
        "",
        f"Single-step vs multi-step generation on the unseen model (alpha={results['multi_step']['alpha']})",
        table(["seed", "ASR single", f"ASR K={results['multi_step']['K']}", "benign single", "benign multi"],
              results["multi_step"]["rows"]),
    ]
    if "summary" in results:
        parts += ["", "Summary", table(["check", "value"], list(results["summary"].items()))]
    return "\n".join(parts) + "\n"


def render_figures(results: dict, out_dir: str) -> list[str]:
    """Write PNG figures next to the tables; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    seeds = sorted(results["seeds"], key=int)
    methods = list(results["seeds"][seeds[0]]["zero_shot"])

    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / (len(methods) + 1)
    xs = range(len(seeds))
    pre = [results["seeds"][s]["zero_shot"][methods[0]]["asr_pre"] for s in seeds]
    ax.bar([x - 0.4 + width / 2 for x in xs], pre, width, label="pre-mitigation", color="0.6")
    for k, meth in enumerate(methods):
        vals = [results["seeds"][s]["zero_shot"][meth]["asr_post"] for s in seeds]
        ax.bar([x - 0.4 + width * (k + 1.5) for x in xs], vals, width, label=meth)
    ax.set_xticks(list(xs), [f"seed {s}" for s in seeds])
    ax.set_ylabel("attack success rate")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    ax.set_title("Unseen model ASR")
    fig.tight_layout()
    paths.append(os.path.join(out_dir, "zero_shot_asr.png"))
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    smethods = list(results["seeds"][seeds[0]]["synergy"]["mean"])
    width = 0.8 / len(smethods)
    for k, meth in enumerate(smethods):
        vals = [results["seeds"][s]["synergy"]["mean"][meth] for s in seeds]
        ax.bar([x - 0.4 + width * (k + 0.5) for x in xs], vals, width, label=meth)
    ax.set_xticks(list(xs), [f"seed {s}" for s in seeds])
    ax.set_ylabel("mean held-out perplexity")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.set_title("Seen models: held-out perplexity")
    fig.tight_layout()
    paths.append(os.path.join(out_dir, "synergy_ppl.png"))
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for s in seeds:
        losses = results["seeds"][s].get("loss_curve")
        if losses:
            ax.plot(range(1, len(losses) + 1), losses, label=f"seed {s}")
    ax.set_xlabel("step (moving average)")
    ax.set_ylabel("alignment loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.set_title("Generator training")
    fig.tight_layout()
    paths.append(os.path.join(out_dir, "generator_loss.png"))
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths
