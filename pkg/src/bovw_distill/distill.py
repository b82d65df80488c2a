"""Distilling teacher BoVW maps into a detector's RoI features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bovw import ClassificationHead, classify_bovw, similarity_map
from .numerics import Conv2d, Linear, Module, ShapeError, Tensor, crop_and_resize, ensure_tensor, no_grad


class WordProjector(Module):
    """g: fully connected map applied to every vocabulary word (D -> D')."""

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(dim, out_dim, rng)

    def forward(self, words):
        return self.fc(words)


class FeatureAdapter(Module):
    """phi: 1x1 convolution on RoI features (M -> D')."""

    def __init__(self, in_channels: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_dim, 1, rng)

    def forward(self, feats):
        return self.conv(feats)


@dataclass
class DistillBatch:
    teacher_maps: Tensor  # (R, K, H, W)
    student_maps: Tensor  # (R, K, H, W)
    labels: np.ndarray

    def __post_init__(self):
        if self.teacher_maps.shape != self.student_maps.shape:
            raise ShapeError(f"teacher maps {self.teacher_maps.shape} and student maps {self.student_maps.shape} differ")
        if self.teacher_maps.shape[0] < 1:
            raise ShapeError("a distillation batch needs at least one proposal")


def crop_box(image: np.ndarray, box, size: int) -> np.ndarray:
    x0, y0, x1, y1 = (float(v) for v in box)
    if (x1 - x0) * (y1 - y0) < 1.0 or x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {tuple(box)}: area below one source pixel")
    _, h, w = image.shape
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"box {tuple(box)} leaves the {w}x{h} image")
    with no_grad():
        return crop_and_resize(Tensor._wrap(image), (x0, y0, x1, y1), size, size).data


def teacher_encode(images, boxes, teacher, out_size: int | None = None) -> Tensor:
    """Teacher similarity maps P(r) for image crops, (R, K, H, W), detached.

    ``images`` is one (3, H, W) image shared by all boxes or a sequence with
    one image per box.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images] * len(boxes)
    size = teacher.spec.input_size
    crops = np.stack([crop_box(img, box, size) for img, box in zip(images, boxes)])
    teacher.eval()
    with no_grad():
        maps = teacher.similarity(crops)
    if out_size is not None and maps.shape[-2:] != (out_size, out_size):
        raise ShapeError(f"teacher maps are {maps.shape[-2:]}, expected {out_size}x{out_size}")
    return maps.detach()


def student_encode(roi_features: Tensor, words, g: WordProjector, phi: FeatureAdapter) -> Tensor:
    """Q(r)[j, h, w] = cos(g(V_j), phi(G(r))[:, h, w])."""
    roi_features = ensure_tensor(roi_features)
    if roi_features.shape[-3] != phi.conv.in_channels:
        raise ShapeError(
            f"student_encode: RoI features {roi_features.shape} do not match adapter input {phi.conv.in_channels}"
        )
    words = words if isinstance(words, Tensor) else Tensor._wrap(np.asarray(words, dtype=np.float64))
    return similarity_map(g(words), phi(roi_features))


def distill_loss(teacher_maps, student_maps=None) -> Tensor:
    """Sum over proposals and cells of the K-dim L1 distance, divided by R*H*W."""
    if isinstance(teacher_maps, DistillBatch):
        teacher_maps, student_maps = teacher_maps.teacher_maps, teacher_maps.student_maps
    p = ensure_tensor(teacher_maps).detach()
    q = ensure_tensor(student_maps)
    if p.shape != q.shape:
        raise ShapeError(f"distill_loss: teacher maps {p.shape} and student maps {q.shape} differ")
    if q.ndim == 3:
        p, q = p.reshape(1, *p.shape), q.reshape(1, *q.shape)
    r, _, h, w = q.shape
    return (q - p).abs().sum() * (1.0 / (r * h * w))


def feature_distill_loss(teacher_pooled, student_pooled) -> Tensor:
    """Plain mean L1 between pooled feature vectors (the deep-feature alternative)."""
    t = ensure_tensor(teacher_pooled).detach()
    s = ensure_tensor(student_pooled)
    if t.shape != s.shape:
        raise ShapeError(f"feature distillation shapes differ: {t.shape} vs {s.shape}")
    return (s - t).abs().mean()


@dataclass
class FusionResult:
    p: Tensor
    p_prime: Tensor
    loss: Tensor | None


def fuse_scores(p_orig, q_map, head: ClassificationHead, eta: float, labels=None) -> FusionResult:
    """p = eta * p_orig + (1 - eta) * softmax(fc(pool(Q))); CE on the BoVW branch when labels are given."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    p_orig = ensure_tensor(p_orig)
    sums = p_orig.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("p_orig must be a probability vector (sums to 1)")
    q_map = ensure_tensor(q_map)
    if labels is None:
        labels = np.zeros(1 if q_map.ndim == 3 else q_map.shape[0], dtype=np.intp)
        probs, _ = classify_bovw(q_map, head, labels)
        loss = None
    else:
        probs, loss = classify_bovw(q_map, head, labels)
    return FusionResult(p_orig * eta + probs * (1.0 - eta), probs, loss)


def detector_total_loss(l_det, l_distill, l_cls_bovw):
    return l_det + l_distill + l_cls_bovw
