"""Plots and image grids for run directories."""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def _curve(logs, name):
    return np.array([getattr(l, name) if not isinstance(l, dict) else l[name] for l in logs], dtype=float)


def plot_attack_curves(path, curves: dict, trivial: float | None = None):
    """Attacker accuracy per epoch.  ``curves`` maps a label to one log list or a list of them (one per seed)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, logs in curves.items():
        runs = logs if logs and isinstance(logs[0], (list, tuple)) else [logs]
        accs = [_curve(r, "attack_cls_acc") for r in runs if len(r)]
        if not accs:
            continue
        n = min(len(a) for a in accs)
        acc = np.stack([a[:n] for a in accs])
        epochs = np.arange(1, n + 1)
        mean = np.nanmean(acc, axis=0) if np.isfinite(acc).any() else acc[0]
        (line,) = ax.plot(epochs, mean, label=label)
        if len(accs) > 1:
            ax.fill_between(epochs, np.nanmin(acc, axis=0), np.nanmax(acc, axis=0), color=line.get_color(), alpha=0.2)
    if trivial is not None:
        ax.axhline(trivial, color="k", ls="--", lw=1, label="trivial")
    ax.set_xlabel("epoch")
    ax.set_ylabel("attacker accuracy (sensitive)")
    ax.set_ylim(0, 1)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_tradeoff(path, rows):
    """Analyzer accuracy against attacker accuracy, averaged over seeds per variant."""
    groups = defaultdict(list)
    for r in rows:
        groups[r["variant"] if r["epsilon"] is None else f"eps={r['epsilon']:g}"].append(r)
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, rs in groups.items():
        a = np.array([r["attacker_acc"] if r["attacker_acc"] is not None else math.nan for r in rs], float)
        y = np.array([r["analyzer_acc"] for r in rs], float)
        ax.errorbar(np.nanmean(a), y.mean(), xerr=np.nanstd(a), yerr=y.std(), fmt="o", capsize=3, label=label)
    triv = rows[0].get("trivial_sensitive") if rows else None
    if triv is not None:
        ax.axvline(triv, color="k", ls="--", lw=1)
    ax.set_xlabel("attacker accuracy (sensitive)")
    ax.set_ylabel("analyzer accuracy (desired)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _to_hwc(img):
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 3 and a.shape[0] in (1, 3):
        a = a.transpose(1, 2, 0)
    if a.shape[-1] == 1:
        a = np.repeat(a, 3, axis=-1)
    return (np.clip(a, 0.0, 1.0) * 255).round().astype(np.uint8)


def image_grid(path, rows, pad: int = 2):
    """One row per ``(label, images)`` pair, images as ``(N, C, H, W)`` in [0, 1].  Labels are not drawn."""
    rows = [(label, np.asarray(imgs)) for label, imgs in rows if imgs is not None and len(imgs)]
    if not rows:
        return None
    h, w = rows[0][1].shape[-2:]
    ncol = max(len(imgs) for _, imgs in rows)
    canvas = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), 255, np.uint8)
    for i, (_, imgs) in enumerate(rows):
        for j, img in enumerate(imgs):
            top, left = pad + i * (h + pad), pad + j * (w + pad)
            canvas[top : top + h, left : left + w] = _to_hwc(img)
    Image.fromarray(canvas).save(path)
    return canvas
