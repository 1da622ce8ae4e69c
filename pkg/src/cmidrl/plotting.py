"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .envs import IMAGE_SIZE  # noqa: E402


def get_figure(width=6, height=None):
    """Figure and axes with the package's default sizing."""
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    height = height or width * golden_ratio
    fig, ax = plt.subplots(figsize=(width, height), facecolor="w")
    ax.tick_params(labelsize=9)
    return fig, ax


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def learning_curve(out_dir, shift_step=None):
    metrics = _read_csv(os.path.join(out_dir, "metrics.csv"))
    evals = _read_csv(os.path.join(out_dir, "eval.csv"))
    fig, ax = get_figure()
    if metrics:
        ax.plot([int(r["env_step"]) for r in metrics],
                [float(r["episode_return"]) for r in metrics],
                color="0.7", lw=0.8, label="training episodes")
    if evals:
        ax.plot([int(r["env_step"]) for r in evals],
                [float(r["expected_return"]) for r in evals],
                color="C0", lw=1.5, label="evaluation")
    if shift_step is not None:
        ax.axvline(shift_step, color="k", ls=":", lw=1)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("return")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, os.path.join(out_dir, "learning_curve.png"))


def cell_returns(path, cells, title=""):
    """Bar chart of ``{"A/blue": return, ...}``."""
    fig, ax = get_figure(4.5)
    names = list(cells)
    ax.bar(range(len(names)), [cells[n] for n in names], color="C0")
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("return")
    if title:
        ax.set_title(title, fontsize=10)
    return _save(fig, path)


def run_figures(out_dir, shift_step=None):
    paths = [learning_curve(out_dir, shift_step)]
    summary_path = os.path.join(out_dir, "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as f:
            summary = json.load(f)
        zs = summary.get("zero_shot") or {}
        if zs.get("cell_returns"):
            paths.append(cell_returns(os.path.join(out_dir, "zero_shot_cells.png"),
                                      zs["cell_returns"], "returns per cell at the shift"))
    return paths


def sweep_figure(out_dir, rows, axis):
    values = sorted({r["value"] for r in rows}, key=lambda v: float(v))
    fig, ax = get_figure()
    for key, colour, label in (("zero_shot_return", "C1", "zero-shot"),
                               ("final_expected_return", "C0", "final")):
        means, ses = [], []
        for v in values:
            vals = [float(r[key]) for r in rows if r["value"] == v and r[key] != ""]
            means.append(np.mean(vals) if vals else np.nan)
            ses.append(np.std(vals, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0)
        ax.errorbar(range(len(values)), means, yerr=ses, color=colour, marker="o",
                    capsize=3, label=label)
    ax.set_xticks(range(len(values)), [str(v) for v in values])
    ax.set_xlabel(axis)
    ax.set_ylabel("return")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, os.path.join(out_dir, "sweep.png"))


def colour_histogram(path, report):
    fig, ax = get_figure()
    ax.scatter(range(len(report.returns)), report.returns,
               c=np.clip(np.array(report.colours), 0, 1), s=12, edgecolors="0.3", linewidths=0.3)
    ax.axhline(report.average, color="k", ls="--", lw=0.8)
    ax.set_xlabel("colour index")
    ax.set_ylabel("mean return")
    return _save(fig, path)


def attribution_grid(path, maps):
    """Channel-summed |attribution| heatmaps, one panel per feature, sorted
    by total attribution."""
    maps = sorted(maps, key=lambda m: -np.abs(m.attributions).sum())
    cols = min(8, len(maps))
    rows = int(math.ceil(len(maps) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 1.3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, m in zip(axes.ravel(), maps):
        a = np.abs(m.attributions)
        img = a.reshape(IMAGE_SIZE, IMAGE_SIZE, 3).sum(axis=2) if a.size == IMAGE_SIZE ** 2 * 3 \
            else a[None, :]
        ax.imshow(img, cmap="magma", interpolation="nearest", aspect="auto")
        ax.set_title(f"z{m.feature}", fontsize=7)
    return _save(fig, path)
