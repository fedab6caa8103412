"""Summary tables and accuracy plots from results CSVs."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import TASKS, read_results, summarize, write_summary  # noqa: E402

STYLE = {
    "svg.hashsalt": "odemil",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "figure.figsize": (7.0, 3.0),
}


class EmptyResults(ValueError):
    pass


def markdown_table(summary: Sequence[dict]) -> str:
    cols = ("method", "task", "dim", "n_instances", "sigma", "n_systems", "n_excluded", "accuracy")
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for s in summary:
        acc = "n/a" if math.isnan(s["accuracy"]) else f"{s['accuracy']:.3f}"
        vals = [s["method"], s["task"], s["dim"], s["n_instances"], f"{s['sigma']:g}", s["n_systems"],
                s["n_excluded"], acc]
        lines.append("| " + " | ".join(str(v) for v in vals) + " |")
    return "\n".join(lines) + "\n"


def _series(summary, task, x_key, fixed: dict):
    """{(method, dim): [(x, accuracy), ...]} for rows matching ``fixed``."""
    out: dict = {}
    for s in summary:
        if s["task"] != task or any(s[k] != v for k, v in fixed.items()) or math.isnan(s["accuracy"]):
            continue
        out.setdefault((s["method"], s["dim"]), []).append((s[x_key], s["accuracy"]))
    return {k: sorted(v) for k, v in sorted(out.items())}


def _figure(summary, x_key, fixed, xlabel, title, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(TASKS), sharey=True)
        for ax, task in zip(axes, TASKS):
            for (method, dim), pts in _series(summary, task, x_key, fixed).items():
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", lw=1.2, ms=3.5, label=f"{method}, {dim}D")
            ax.set_title(task, fontsize=9)
            ax.set_xlabel(xlabel)
            ax.set_ylim(0, 1.02)
            if x_key == "n_instances":
                ax.set_xticks([1, 2, 3, 4])
                ax.set_xlim(0.8, 4.2)
        axes[0].set_ylabel("accuracy (R² > 0.9)")
        handles, labels = axes[0].get_legend_handles_labels()
        if not handles:
            handles, labels = axes[1].get_legend_handles_labels()
        if handles:
            fig.legend(handles, labels, loc="center right", fontsize=7)
            fig.subplots_adjust(right=0.8)
        fig.suptitle(title, fontsize=9)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def build_report(results: Sequence, out_dir, sigma: float | None = None,
                 n_instances: int | None = None) -> dict[str, Path]:
    """Write summary.csv, summary.md, accuracy_vs_instances.svg and
    accuracy_vs_noise.svg.

    The instance plot is drawn at noise ``sigma`` (default: the smallest level
    present); the noise plot at ``n_instances`` (default: the largest present).
    """
    rows = read_results(results)
    if not rows:
        raise EmptyResults("results contain no rows; refusing to draw empty plots")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    sigmas = sorted({r["sigma"] for r in rows})
    ns = sorted({r["n_instances"] for r in rows})
    sigma = sigmas[0] if sigma is None else sigma
    n = ns[-1] if n_instances is None else n_instances
    paths = {
        "summary_csv": out / "summary.csv",
        "summary_md": out / "summary.md",
        "instances_svg": out / "accuracy_vs_instances.svg",
        "noise_svg": out / "accuracy_vs_noise.svg",
    }
    write_summary(paths["summary_csv"], summary)
    paths["summary_md"].write_text(markdown_table(summary))
    _figure(summary, "n_instances", {"sigma": sigma}, "number of instances",
            f"accuracy vs instances (σ = {sigma:g})", paths["instances_svg"])
    _figure(summary, "sigma", {"n_instances": n}, "noise level σ",
            f"accuracy vs noise ({n} instances)", paths["noise_svg"])
    return paths
