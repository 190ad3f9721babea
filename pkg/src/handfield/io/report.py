"""Evaluation and training reports: JSON, CSV, a text table and PNG figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_log(path, records):
    """Line-delimited JSON, one record per step."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, default=_jsonable) + "\n")


def read_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_metrics_csv(path, report):
    rows = report.to_dict()["images"]
    fields = ["frame", "camera", "psnr", "psnr_masked", "ssim", "depth_error"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def plot_loss_curves(path, records, title: str = "training losses"):
    keys = [k for k in ("rgb", "depth", "distill", "deform", "hard_surface", "color_variance", "total") if records and k in records[0]]
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in keys:
        v = np.array([r[k] for r in records], dtype=float)
        if k == "hard_surface":
            v = v - v.min() + 1e-6  # shift so it fits on a log axis
            k = "hard_surface (shifted)"
        ax.plot(steps, np.maximum(v, 1e-8), label=k, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_comparison(path, rendered, views, max_rows: int = 6):
    """Rows of ground truth, prediction, rendered depth and absolute depth error."""
    rendered = list(rendered)[:max_rows]
    if not rendered:
        raise ValueError("nothing to plot")
    fig, axes = plt.subplots(len(rendered), 4, figsize=(8, 2.1 * len(rendered)), squeeze=False)
    for row, r in zip(axes, rendered):
        gt = views[(r.frame, r.camera)]
        finite = np.isfinite(gt.depth)
        err = np.where(finite, np.abs(r.image.depth - np.where(finite, gt.depth, 0.0)), 0.0)
        panels = [
            (gt.color, f"gt f{r.frame} {r.camera}", None),
            (np.clip(r.image.color, 0, 1), "render", None),
            (np.where(r.image.weight_sum > 0.5, r.image.depth, np.nan), "depth", "viridis"),
            (err, "|depth error|", "magma"),
        ]
        for ax, (img, name, cmap) in zip(row, panels):
            ax.imshow(img, cmap=cmap)
            ax.set_title(name, fontsize=7)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_metric_bars(path, reports: dict, metric: str = "depth_error"):
    """One bar per named report, e.g. an ablation comparison."""
    names = list(reports)
    vals = [reports[n].aggregate()[metric] for n in names]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3))
    ax.bar(names, vals, color="tab:blue")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_eval_outputs(out_dir, report, rendered, views, prefix: str = "eval") -> dict:
    """JSON + CSV + table + comparison figure; returns the written paths."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": d / f"{prefix}.json",
        "csv": d / f"{prefix}.csv",
        "table": d / f"{prefix}.txt",
        "figure": d / f"{prefix}_views.png",
    }
    write_json(paths["json"], report.to_dict())
    write_metrics_csv(paths["csv"], report)
    paths["table"].write_text(report.table() + "\n")
    plot_comparison(paths["figure"], rendered, views)
    return paths
