"""PNG figures rendered next to the CSV reports (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}

LABELS = {"full": "Full", "random_mask": "Random mask", "random_action": "Random action",
          "random_both": "Random both"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def timing_chart(rows: list[dict], path) -> Path:
    """Mean time per phase (log scale) with p95 whiskers."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r["phase"] for r in rows]
        means = [r["mean_s"] * 1e3 for r in rows]
        p95 = [r["p95_s"] * 1e3 for r in rows]
        ax.bar(names, means, color=["#4c72b0", "#dd8452", "#55a868"][: len(rows)])
        ax.errorbar(names, means, yerr=[[0] * len(rows), [p - m for p, m in zip(p95, means)]], fmt="none",
                    ecolor="k", capsize=4, lw=1)
        ax.set_yscale("log")
        for x, m in zip(names, means):
            ax.annotate(f"{m:.3g}", (x, m), textcoords="offset points", xytext=(8, 2), ha="left", fontsize=8)
        ax.set_ylabel("time per input (ms)")
        ax.set_title("Per-input cost by phase")
        return _save(fig, path)


def sweep_chart(rows: list[dict], path) -> Path:
    """Correction rate against the number of perturbed neurons, adaptive rate as a dashed line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = [(int(r["neurons"]), r["correction_rate"]) for r in rows if r["neurons"] != "adaptive"]
        adaptive = [r["correction_rate"] for r in rows if r["neurons"] == "adaptive"]
        xs, ys = zip(*pts) if pts else ((), ())
        ax.plot(xs, [100 * y for y in ys], "o-", color="#4c72b0", label="top-n neurons")
        if adaptive:
            ax.axhline(100 * adaptive[0], ls="--", color="#c44e52", label="adaptive mask")
        ax.set_xscale("symlog", linthresh=1)
        if xs:
            ax.set_xlim(-0.2, max(xs) * 1.2 + 0.2)
            ax.set_xticks(list(xs), [str(x) for x in xs])
            ax.minorticks_off()
        ax.set_xlabel("neurons perturbed")
        ax.set_ylabel("held-out correction rate (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def ablation_chart(table: list[dict], path) -> Path:
    """Mean correction rate per variant with one-stddev error bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [LABELS.get(r["variant"], r["variant"]) for r in table]
        ax.bar(names, [100 * r["correction_mean"] for r in table], yerr=[100 * r["correction_std"] for r in table],
               capsize=4, color="#8172b3")
        ax.set_ylabel("held-out correction rate (%)")
        ax.set_title(f"Ablation ({table[0]['n_seeds']} seeds)" if table else "Ablation")
        return _save(fig, path)
