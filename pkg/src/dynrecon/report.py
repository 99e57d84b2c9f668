"""Metrics reports: key-value text, per-frame CSV and rendered figures.

Every report path also renders matplotlib figures (PNG) next to the
delimited output so runs can be inspected without extra tooling.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dynrecon import scene_io

METRIC_KEYS = ("hit", "bkg", "overlap", "median_depth_err")


def write_metrics_csv(rows: list[dict], path) -> None:
    keys = ["frame", "view"] + [k for k in METRIC_KEYS if any(k in r for r in rows)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def render_metrics_figure(rows: list[dict], path) -> None:
    """Per-frame segmentation ratios, one line per metric, averaged over views."""
    frames = sorted({r["frame"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, style in (("hit", "o-"), ("overlap", "s-"), ("bkg", "^--")):
        series = []
        for f in frames:
            vals = [r[key] for r in rows if r["frame"] == f and key in r]
            series.append(np.mean(vals) if vals else np.nan)
        ax.plot(frames, series, style, label=key)
    ax.set_xlabel("frame")
    ax.set_ylabel("ratio")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xticks(frames)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_depth_figure(depth: np.ndarray, path, title: str | None = None) -> None:
    """Colormapped depth map with unknown pixels masked out."""
    fig, ax = plt.subplots(figsize=(5, 5))
    shown = np.ma.masked_invalid(depth)
    im = ax.imshow(shown, cmap="viridis")
    fig.colorbar(im, ax=ax, shrink=0.8, label="depth")
    if title:
        ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_mask_figure(mask: np.ndarray, path, gt: np.ndarray | None = None, title: str | None = None) -> None:
    """Mask visualization; with ground truth, false pos/neg are color coded."""
    fig, ax = plt.subplots(figsize=(5, 5))
    if gt is None:
        ax.imshow(mask, cmap="gray")
    else:
        img = np.zeros(mask.shape + (3,))
        img[mask & gt] = (1.0, 1.0, 1.0)
        img[mask & ~gt] = (0.0, 0.8, 0.0)  # false positive
        img[~mask & gt] = (0.9, 0.1, 0.1)  # missed
        ax.imshow(img)
    if title:
        ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_sequence_report(out_dir, frames, rows: list[dict], mean_metrics: dict) -> None:
    """Text report + CSV + figures for one reconstruction run."""
    out = Path(out_dir)
    summary = dict(mean_metrics)
    summary["frames"] = len(frames)
    summary["degraded_frames"] = sum(1 for f in frames if f.status == "degraded")
    summary["no_motion_frames"] = sum(1 for f in frames if f.status == "no motion")
    scene_io.write_metrics(summary, out / "metrics.txt")
    if rows:
        write_metrics_csv(rows, out / "metrics.csv")
        figures = out / "figures"
        figures.mkdir(exist_ok=True)
        render_metrics_figure(rows, figures / "metrics.png")


def write_evaluation_report(report_path, rows: list[dict], mean_metrics: dict) -> None:
    """Evaluation report: key-value means plus CSV and figures alongside."""
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    scene_io.write_metrics(mean_metrics, report_path)
    if rows:
        write_metrics_csv(rows, report_path.with_suffix(".csv"))
        figures = report_path.parent / "figures"
        figures.mkdir(exist_ok=True)
        render_metrics_figure(rows, figures / "metrics.png")
