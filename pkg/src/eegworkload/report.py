"""Static report: metric tables and vector figures.

Tables are written as CSV plus a fixed-width text rendering. Figures are SVG
with a fixed hash salt and no date stamp, so identical inputs give identical
files.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .spectral import DEFAULT_BANDS, TASKS  # noqa: E402

logger = logging.getLogger(__name__)

STYLE = {
    "svg.hashsalt": "eegworkload",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
TASK_COLORS = {"chess": "#1b9e77", "nback": "#d95f02", "rotation": "#7570b3", "stroop": "#e7298a"}


def save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def format_metrics_table(table: pd.DataFrame, title: str = "") -> str:
    """Fixed-width rendering in the familiar per-class report layout."""
    lines = []
    if title:
        lines += [title, "=" * len(title)]
    lines.append(f"{'':>12} {'precision':>10} {'recall':>10} {'f1-score':>10} {'support':>10}")
    for _, r in table.iterrows():
        if r["class"] == "macro avg":
            lines.append("")
        lines.append(f"{r['class']:>12} {r['precision']:>10.3f} {r['recall']:>10.3f} "
                     f"{r['f1']:>10.3f} {r['support']:>10.1f}")
    return "\n".join(lines) + "\n"


def cv_tables(cv_root, out_dir) -> list[Path]:
    """One CSV and one text table per CV result directory under ``cv_root``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for d in sorted(p for p in Path(cv_root).iterdir() if (p / "metrics.csv").exists()):
        table = pd.read_csv(d / "metrics.csv", float_precision="round_trip")
        summary = json.loads((d / "summary.json").read_text())
        table.to_csv(out / f"metrics_{d.name}.csv", index=False, float_format="%.17g")
        ci = summary["ci95_half_width"]
        ci_txt = "undefined (one iteration)" if ci is None else f"+/- {ci:.4f}"
        title = f"{summary['mode']}: {summary['iterations']} iterations, mean macro F1 " \
                f"{summary['mean_macro_f1']:.3f} (95% CI {ci_txt})"
        (out / f"metrics_{d.name}.txt").write_text(format_metrics_table(table, title))
        written.append(out / f"metrics_{d.name}.csv")
    return written


def plot_band_power(features: pd.DataFrame, path, bands=DEFAULT_BANDS.names) -> None:
    """Mean log band power per task, with the SEM across participants."""
    per_part = features.groupby(["participant", "task"], sort=True)[list(bands)].mean()
    tasks = [t for t in TASKS if t in per_part.index.get_level_values("task")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 3.2))
        width = 0.8 / max(len(tasks), 1)
        x = np.arange(len(bands))
        for k, task in enumerate(tasks):
            vals = per_part.xs(task, level="task")
            mean = vals.mean().to_numpy()
            sem = (vals.std(ddof=1) / np.sqrt(len(vals))).fillna(0.0).to_numpy()
            ax.bar(x + (k - (len(tasks) - 1) / 2) * width, mean, width, yerr=sem,
                   color=TASK_COLORS.get(task), label=task, capsize=2, linewidth=0)
        ax.set_xticks(x)
        ax.set_xticklabels(bands)
        ax.set_ylabel("log power (ln µV²)")
        ax.set_title("Band power by task")
        ax.legend(frameon=False, ncol=len(tasks))
        save_svg(fig, path)


def plot_trajectories(traj: pd.DataFrame, path, max_sessions: int = 5) -> None:
    """Administered rating per puzzle for a few sessions of each skill."""
    skills = sorted(traj["skill"].unique())
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(skills), figsize=(3.0 * len(skills), 2.8),
                                 sharey=True, squeeze=False)
        for ax, skill in zip(axes[0], skills):
            sub = traj[traj["skill"] == skill]
            for s in sorted(sub["session"].unique())[:max_sessions]:
                one = sub[sub["session"] == s]
                ax.plot(one["step"], one["rating"], lw=0.7, alpha=0.8)
            ax.axhline(skill, color="k", lw=0.8, ls="--")
            ax.set_title(f"skill {skill:.0f}")
            ax.set_xlabel("puzzle")
        axes[0][0].set_ylabel("puzzle rating")
        save_svg(fig, path)


def render(workspace, out_dir) -> list[Path]:
    """Render everything available in a workspace; returns written paths."""
    ws = Path(workspace)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if (ws / "cv").is_dir():
        written += cv_tables(ws / "cv", out)
    feats = ws / "features" / "features.csv"
    if feats.exists():
        df = pd.read_csv(feats, dtype={"participant": str})
        plot_band_power(df, out / "band_power_by_task.svg")
        written.append(out / "band_power_by_task.svg")
    traj = ws / "staircase" / "trajectories.csv"
    if traj.exists():
        plot_trajectories(pd.read_csv(traj, dtype={"puzzle_id": str}), out / "staircase_trajectories.svg")
        written.append(out / "staircase_trajectories.svg")
    if not written:
        logger.warning("nothing to report under %s", ws)
    return written
