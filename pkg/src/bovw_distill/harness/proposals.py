"""Positive proposals by ground-truth jitter, IoU and box-delta coding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ProposalBatch:
    boxes: np.ndarray  # (R, 4)
    labels: np.ndarray  # (R,)
    gt_boxes: np.ndarray  # (R, 4) source box of every proposal
    image_index: np.ndarray  # (R,) owning image within the batch

    def __len__(self) -> int:
        return len(self.labels)


def iou(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def jitter_box(box, rng: np.random.Generator, jitter: float, bounds: tuple | None = None) -> np.ndarray:
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    cx = (x0 + x1) / 2 + rng.uniform(-jitter, jitter) * w
    cy = (y0 + y1) / 2 + rng.uniform(-jitter, jitter) * h
    w *= 1.0 + rng.uniform(-jitter, jitter)
    h *= 1.0 + rng.uniform(-jitter, jitter)
    out = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    if bounds is not None:
        out[[0, 2]] = np.clip(out[[0, 2]], 0, bounds[1])
        out[[1, 3]] = np.clip(out[[1, 3]], 0, bounds[0])
    return out


def sample_positive_proposals(
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    rng: np.random.Generator,
    jitter: float = 0.1,
    per_gt: int = 2,
    bounds: tuple | None = None,
    max_tries: int = 50,
) -> ProposalBatch:
    """``per_gt`` jittered copies of every ground-truth box, each with IoU >= 0.5 to its source.

    A draw that misses the IoU constraint (or degenerates to under one pixel
    of area) is redrawn; after ``max_tries`` misses the source box is used.
    """
    if not 0.0 <= jitter <= 0.5:
        raise ValueError(f"jitter must lie in [0, 0.5], got {jitter}")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    boxes, labels, sources = [], [], []
    for box, label in zip(gt_boxes, np.asarray(gt_labels)):
        for _ in range(per_gt):
            for _ in range(max_tries):
                cand = jitter_box(box, rng, jitter, bounds)
                area = (cand[2] - cand[0]) * (cand[3] - cand[1])
                if area >= 1.0 and iou(cand, box) >= 0.5:
                    break
            else:
                cand = box.copy()
            boxes.append(cand)
            labels.append(label)
            sources.append(box)
    return ProposalBatch(
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(labels, dtype=np.intp),
        np.asarray(sources, dtype=np.float64).reshape(-1, 4),
        np.zeros(len(labels), dtype=np.intp),
    )


def encode_deltas(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Standard (dx, dy, dw, dh) regression targets of ``targets`` relative to ``proposals``."""
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return np.stack([(tx - px) / pw, (ty - py) / ph, np.log(tw / pw), np.log(th / ph)], axis=1)


def decode_deltas(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    cx = px + deltas[:, 0] * pw
    cy = py + deltas[:, 1] * ph
    w = pw * np.exp(deltas[:, 2])
    h = ph * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
