"""Static SVG figures from metrics files.

Every function takes parsed metrics, writes one SVG and returns the
matplotlib figure so callers (and tests) can inspect the drawn series.
Text is emitted as paths and the date stamp is dropped, so the files need no
fonts to render and are byte-stable across reruns.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractError  # noqa: E402
from .metrics import MetricsFile  # noqa: E402

KINDS = ("learning_curve", "first_task", "overall", "flops")

STYLE = {
    "svg.hashsalt": "pst",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "figure.figsize": (7.0, 3.6),
}

PHASE_LABEL = {
    "balanced": "i", "current_only": "ii", "classifier_finetune": "iii",
    "reinforce": "reinforce", "rehearsal": "rehearsal",
}
PHASE_COLOR = {
    "balanced": "#dbe9f6", "current_only": "#ffffff", "classifier_finetune": "#fde2c8",
    "reinforce": "#e3f1dc", "rehearsal": "#eeeeee",
}


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def _spans(values):
    """Runs of equal consecutive values as (value, start, stop) triples."""
    out, start = [], 0
    for i in range(1, len(values) + 1):
        if i == len(values) or values[i] != values[start]:
            out.append((values[start], start, i))
            start = i
    return out


def learning_curve(mf: MetricsFile, path, seed=None):
    """Per-epoch accuracy with the training phases shaded and labelled."""
    seed = mf.seeds[0] if seed is None and mf.seeds else seed
    rows = mf.select("epoch", seed)
    if not rows:
        raise ContractError(f"{mf.path}: missing series 'epoch' rows for seed {seed}")
    epochs = np.array([r["epoch"] for r in rows]) + 1
    single = [r["single_head_acc"] for r in rows]
    first = [r["multi_head_acc"][0] for r in rows]
    phases = [r["phase"] for r in rows]
    tasks = [r["task_id"] for r in rows]

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labelled = set()
        for phase, a, b in _spans(phases):
            ax.axvspan(epochs[a] - 0.5, epochs[b - 1] + 0.5, color=PHASE_COLOR.get(phase, "#f4f4f4"),
                       lw=0, zorder=0)
            if (tasks[a], phase) not in labelled:  # one label per phase per task
                labelled.add((tasks[a], phase))
                ax.text((epochs[a] + epochs[b - 1]) / 2, 1.02, PHASE_LABEL.get(phase, phase),
                        ha="center", va="bottom", fontsize=7, transform=ax.get_xaxis_transform())
            if phase == "reinforce":
                ax.axvline(epochs[a] - 0.5, color="tab:green", ls="--", lw=0.8)
        for _, a, _ in _spans(tasks)[1:]:
            ax.axvline(epochs[a] - 0.5, color="black", lw=1.0)
        ax.plot(epochs, single, color="tab:blue", label="single-head, all seen classes")
        ax.plot(epochs, first, color="tab:red", ls="--", label="multi-head, first task")
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1.0)
        ax.set_title(f"{mf.strategy}, seed {seed}", fontsize=9, pad=14)
        ax.legend(loc="lower left", fontsize=7)
        _save(fig, path)
    return fig


def first_task(mf: MetricsFile, path):
    """First-task accuracy after each task boundary, seed mean."""
    single = mf.series("first_task_single_head")
    multi = mf.series("first_task_multi_head")
    x = np.arange(1, len(single) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, multi, marker="o", label="multi-head")
        ax.plot(x, single, marker="s", label="single-head")
        ax.set_xticks(x)
        ax.set_xlabel("tasks learned")
        ax.set_ylabel("accuracy on first task")
        ax.set_ylim(0, 1.0)
        ax.set_title(mf.strategy, fontsize=9)
        ax.legend()
        _save(fig, path)
    return fig


def overall(mf: MetricsFile, path):
    """Single-head accuracy over all seen classes per task: each seed thin, the mean bold."""
    mean = mf.series("single_head_acc")
    x = np.arange(1, len(mean) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for seed in mf.seeds:
            ax.plot(x, mf.series("single_head_acc", "task", seed), color="0.6", lw=0.8,
                    label=f"seed {seed}")
        ax.plot(x, mean, color="tab:blue", lw=2.0, marker="o", label="mean")
        ax.set_xticks(x)
        ax.set_xlabel("tasks learned")
        ax.set_ylabel("single-head accuracy")
        ax.set_ylim(0, 1.0)
        ax.set_title(f"{mf.strategy}, {len(mf.seeds)} seeds", fontsize=9)
        _save(fig, path)
    return fig


def flops(mf: MetricsFile, path):
    """Training cost per task split by path, and update cost per step."""
    fwd = np.array(mf.series("fwd_flops"), dtype=float)
    bwd = np.array(mf.series("bwd_flops"), dtype=float)
    upd = np.array(mf.series("upd_flops"), dtype=float)
    per_step = mf.series("upd_flops_per_step")
    x = np.arange(1, len(fwd) + 1)
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2)
        a.bar(x, fwd, label="forward")
        a.bar(x, bwd, bottom=fwd, label="backward")
        a.bar(x, upd, bottom=fwd + bwd, label="update")
        a.set_xlabel("task")
        a.set_ylabel("FLOPs")
        a.set_xticks(x)
        a.legend(fontsize=7, ncol=3, loc="upper center", bbox_to_anchor=(0.5, -0.2))
        b.plot(x, per_step, marker="o", color="tab:green")
        b.set_xlabel("tasks learned")
        b.set_ylabel("update FLOPs per step")
        b.set_xticks(x)
        fig.suptitle(mf.strategy, fontsize=9)
        fig.tight_layout()
        _save(fig, path)
    return fig


def report_figure(table: list[dict], path):
    """Final accuracy and update-path FLOPs ratio per strategy."""
    names = [r["strategy"] for r in table]
    y = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, sharey=True)
        a.barh(y, [r["final_acc"] for r in table], color="tab:blue")
        a.set_yticks(y, names)
        a.set_xlim(0, 1)
        a.set_xlabel("final single-head accuracy")
        b.barh(y, [r["upd_ratio"] for r in table], color="tab:green")
        b.axvline(1.0, color="black", lw=0.8)
        b.set_xlabel("update FLOPs reduction vs baseline (x)")
        fig.tight_layout()
        _save(fig, path)
    return fig


PLOTTERS = {"learning_curve": learning_curve, "first_task": first_task, "overall": overall,
            "flops": flops}


def plot(kind: str, mf: MetricsFile, path):
    if kind not in PLOTTERS:
        raise ContractError(f"unknown plot kind {kind!r} (expected one of {', '.join(KINDS)})")
    return PLOTTERS[kind](mf, path)
