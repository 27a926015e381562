"""Metric files (CSV/JSON), heightmap renders (ASCII/PGM) and matplotlib figures."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_csv(path, rows: Sequence[Mapping], fieldnames: Optional[Sequence[str]] = None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fieldnames})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


def ascii_heightmap(heights: np.ndarray, max_height: int) -> str:
    """One character per cell: '.' for empty, 1-9 then a-z for heights, '#' at or above the cap."""
    glyphs = ".123456789abcdefghijklmnopqrstuvwxyz"
    lines = []
    for row in np.asarray(heights):
        line = []
        for h in row:
            h = int(h)
            line.append("#" if h >= max_height else glyphs[min(h, len(glyphs) - 1)])
        lines.append("".join(line))
    return "\n".join(lines) + "\n"


def write_pgm(path, heights: np.ndarray, max_height: int, scale: int = 8) -> None:
    """Binary greyscale image (P5); brighter is taller. Each cell becomes a scale x scale block."""
    img = np.clip(np.asarray(heights, dtype=float) / max(max_height, 1), 0, 1)
    img = np.kron((img * 255).round().astype(np.uint8), np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_learning_curves(curves: Mapping[str, Sequence[Mapping]], path, title: str = "") -> None:
    """Mean episode space utilization against environment steps, one line per run label."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in curves.items():
        steps = [r["step"] for r in rows]
        util = [r["mean_utilization"] for r in rows]
        ax.plot(steps, util, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("space utilization")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    if curves:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_mask_training(epochs: Sequence[Mapping], path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ep = [r["epoch"] for r in epochs]
    ax.plot(ep, [r["train_loss"] for r in epochs], label="train loss")
    ax.plot(ep, [r["val_loss"] for r in epochs], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE")
    ax2 = ax.twinx()
    ax2.plot(ep, [r["val_iou"] for r in epochs], color="k", ls="--", label="val IoU")
    ax2.set_ylabel("IoU")
    ax.legend(loc="upper left")
    ax2.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_iterations(records: Sequence[Mapping], path) -> None:
    plt = _pyplot()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    it = [r["iteration"] for r in records]
    a1.errorbar(it, [r["eval_mean_utilization"] for r in records], yerr=[r["eval_std_utilization"] for r in records],
                marker="o", capsize=3)
    a1.set_xlabel("iteration")
    a1.set_ylabel("space utilization")
    a2.plot(it, [r["fresh_iou"] for r in records], marker="o", label="mask in use")
    a2.plot(it, [r["heuristic_fresh_iou"] for r in records], marker="s", label="heuristic")
    a2.set_xlabel("iteration")
    a2.set_ylabel("IoU on fresh states")
    a2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_heightmap(heights: np.ndarray, max_height: int, path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(np.asarray(heights).T, origin="lower", vmin=0, vmax=max_height, cmap="viridis")
    ax.set_xlabel("x (cells)")
    ax.set_ylabel("y (cells)")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="height")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
