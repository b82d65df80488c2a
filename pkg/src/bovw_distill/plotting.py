"""PNG figures written next to the CSV reports (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("l_det", "l_distill", "l_cls_bovw", "l_ppc", "l_cls", "l_decov")
ACC_KEYS = ("acc_base", "acc_novel")

# no timestamps in the PNG, so reruns produce the same file
_META = {"Software": None}


def _series(rows: list[dict], key: str) -> tuple[np.ndarray, np.ndarray]:
    pts = [(r["epoch"], r[key]) for r in rows if r.get(key) is not None]
    if not pts:
        return np.zeros(0), np.zeros(0)
    ep, val = zip(*pts)
    return np.asarray(ep, dtype=float), np.asarray(val, dtype=float)


def plot_report(report, path, title: str | None = None) -> Path:
    """Loss curves (left) and accuracy curves (right) for one TrainReport."""
    path = Path(path)
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key in LOSS_KEYS:
        ep, val = _series(report.rows, key)
        if len(ep) and np.any(val != 0):
            ax_l.plot(ep, val, marker=".", label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    if ax_l.lines:
        ax_l.legend(fontsize=7)
    for key in ACC_KEYS:
        ep, val = _series(report.rows, key)
        if len(ep):
            ax_a.plot(ep, val, marker="o", label=key)
    ax_a.set_ylim(-0.02, 1.02)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    if ax_a.lines:
        ax_a.legend(fontsize=7)
    fig.suptitle(title or f"{report.stage} (seed {report.seed})")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_confusion(cm: np.ndarray, num_base: int, path, title: str = "confusion") -> Path:
    path = Path(path)
    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(cm, cmap="Blues")
    n = cm.shape[0]
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=7)
    # separate base and novel blocks
    ax.axhline(num_base - 0.5, color="k", lw=0.8)
    ax.axvline(num_base - 0.5, color="k", lw=0.8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_sweep(param: str, values, rows: list[dict], path, keys=("acc_base", "acc_novel")) -> Path:
    """Metric vs swept value; categorical x axis so uneven grids stay readable."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    x = np.arange(len(values))
    for key in keys:
        y = [r.get(key) for r in rows]
        y = [np.nan if v is None or v == "" else float(v) for v in y]
        ax.plot(x, y, marker="o", label=key)
    ax.set_xticks(x)
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(param)
    ax.set_ylabel("metric")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path
