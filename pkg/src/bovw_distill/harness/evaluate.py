"""Proposal classification on ground-truth test boxes."""

from __future__ import annotations

import numpy as np

from ..numerics import no_grad
from .corpus import DetImage, SyntheticCorpus


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.intp), np.asarray(preds, dtype=np.intp)), 1)
    return cm


def metrics_from_predictions(labels, preds, num_base: int, num_classes: int) -> dict:
    """Per-class accuracy, base/novel accuracy and the novel->base count."""
    labels = np.asarray(labels, dtype=np.intp)
    preds = np.asarray(preds, dtype=np.intp)
    if labels.size == 0:
        raise ValueError("evaluation needs at least one test instance")
    cm = confusion_matrix(labels, preds, num_classes)
    support = cm.sum(axis=1)
    per_class = [float(cm[c, c] / support[c]) if support[c] else float("nan") for c in range(num_classes)]
    base = labels < num_base
    novel = ~base
    return {
        "per_class_acc": per_class,
        "acc_base": float((preds[base] == labels[base]).mean()) if base.any() else float("nan"),
        "acc_novel": float((preds[novel] == labels[novel]).mean()) if novel.any() else float("nan"),
        "miscls_novel_to_base": int(cm[num_base:, :num_base].sum()),
        "confusion": cm,
    }


def predict_boxes(detector, images: list[DetImage], eta: float | None = None, batch_size: int = 64):
    """Argmax class for every ground-truth box; fused scores when ``eta`` is given."""
    detector.eval()
    labels, preds = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            feats = detector.feature_maps(np.stack([d.image for d in chunk]))
            boxes = np.concatenate([d.boxes for d in chunk])
            index = np.concatenate([np.full(len(d.labels), i, dtype=np.intp) for i, d in enumerate(chunk)])
            roi = detector.roi_features(feats, boxes, index)
            preds.append(detector.class_probs(roi, eta).argmax(axis=1))
            labels.append(np.concatenate([d.labels for d in chunk]))
    return np.concatenate(labels), np.concatenate(preds)


def evaluate(detector, corpus: SyntheticCorpus, eta: float | None = None) -> dict:
    if not corpus.test:
        raise ValueError("test split is empty")
    labels, preds = predict_boxes(detector, corpus.test, eta)
    return metrics_from_predictions(labels, preds, corpus.num_base, detector.num_classes)
