"""Deterministic SVG figures, each paired with a JSON file of every plotted number."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["write_plot_data", "line_plot", "bound_curves", "grouped_bars", "action_map_plot"]

_RC = {"svg.hashsalt": "hiql", "svg.fonttype": "none", "font.size": 9}
_ARROWS = {0: (0.0, 0.35), 1: (0.0, -0.35), 2: (-0.35, 0.0), 3: (0.35, 0.0)}


def write_plot_data(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _save(fig, svg_path, data):
    svg_path = Path(svg_path)
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        fig.savefig(svg_path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    write_plot_data(svg_path.with_suffix(".json"), data)
    return svg_path


def line_plot(series: dict, svg_path, xlabel: str, ylabel: str, title: str = "", logx=False):
    """``series`` maps a label to ``(xs, ys)`` or ``(xs, ys, yerr)``."""
    if not series or any(len(v[0]) == 0 for v in series.values()):
        raise ValueError("nothing to plot: empty series")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label in sorted(series):
            xs, ys, *rest = series[label]
            if rest and rest[0] is not None:
                ax.errorbar(xs, ys, yerr=rest[0], label=label, marker="o", ms=3, capsize=2)
            else:
                ax.plot(xs, ys, label=label, marker="o", ms=3)
        if logx:
            ax.set_xscale("log", base=2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
    data = {
        "xlabel": xlabel,
        "ylabel": ylabel,
        "title": title,
        "series": {k: [list(map(float, c)) if c is not None else None for c in v] for k, v in sorted(series.items())},
    }
    return _save(fig, svg_path, data)


def bound_curves(tables: dict, svg_path):
    """Bound-vs-k curves with the flat error as a horizontal reference.

    ``tables`` maps a ``(T, sigma)`` label to rows from ``theory.bound_table``.
    """
    if not tables or any(not rows for rows in tables.values()):
        raise ValueError("nothing to plot: empty bound table")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, label in enumerate(sorted(tables)):
            rows = tables[label]
            ks = [r["k"] for r in rows]
            line = ax.plot(ks, [r["bound"] for r in rows], label=f"{label} bound")[0]
            ax.axhline(rows[0]["flat"], color=line.get_color(), ls="--", lw=0.8)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("subgoal steps k")
        ax.set_ylabel("error probability")
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
    return _save(fig, svg_path, {"tables": {k: tables[k] for k in sorted(tables)}})


def grouped_bars(groups: dict, svg_path, ylabel: str = "policy accuracy"):
    """``groups`` maps a bin name to ``{method: value}``."""
    if not groups or any(not v for v in groups.values()):
        raise ValueError("nothing to plot: empty groups")
    bins = list(groups)
    methods = sorted({m for v in groups.values() for m in v})
    width = 0.8 / len(methods)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for j, m in enumerate(methods):
            xs = np.arange(len(bins)) + (j - (len(methods) - 1) / 2) * width
            ax.bar(xs, [groups[b].get(m, np.nan) for b in bins], width, label=m)
        ax.set_xticks(np.arange(len(bins)), bins)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, svg_path, {"groups": groups, "ylabel": ylabel})


def action_map_plot(env, maps: dict, svg_path):
    """Arrow fields on a grid: ``maps`` is ``{panel title: (actions, correct)}``."""
    if not hasattr(env, "coord"):
        raise ValueError("action maps need a grid environment")
    if not maps:
        raise ValueError("nothing to plot: no panels")
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(maps), figsize=(3.2 * len(maps), 3.2), squeeze=False)
        for ax, title in zip(axes[0], maps):
            actions, correct = maps[title]
            ax.set_xlim(-0.5, env.width - 0.5)
            ax.set_ylim(-0.5, env.height - 0.5)
            ax.set_aspect("equal")
            ax.set_facecolor("0.25")
            ax.set_xticks([])
            ax.set_yticks([])
            for i in range(env.num_states):
                x, y = env.coord(i)
                ax.add_patch(plt.Rectangle((x - 0.5, y - 0.5), 1, 1, color="white"))
                dx, dy = _ARROWS.get(int(actions[i]), (0.0, 0.0))
                ax.arrow(x - dx / 2, y - dy / 2, dx, dy, head_width=0.2, length_includes_head=True,
                         color="tab:blue" if correct[i] else "tab:red")
            ax.set_title(title)
        fig.tight_layout()
    data = {t: {"actions": np.asarray(a).tolist(), "correct": np.asarray(c).tolist()} for t, (a, c) in maps.items()}
    return _save(fig, svg_path, data)
