"""Surrogate two-stage detector: conv backbone, bilinear RoI extraction, heads.

Proposals are supplied from outside (jittered ground truth), so there is no
RPN. The BoVW branch (adapter phi, word projector g, BoVW classifier) sits on
the same RoI features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..backbone import ConvBackbone
from ..bovw import ClassificationHead
from ..distill import FeatureAdapter, WordProjector, student_encode
from ..numerics import Linear, Module, Parameter, Tensor, roi_resample, softmax


@dataclass
class DetectorSpec:
    num_classes: int
    channels: Sequence[int] = (16, 32, 32, 64)
    roi_size: int = 4
    hidden: int = 128
    num_words: int = 32
    word_dim: int = 32
    adapter_dim: int = 32


class ToyDetector(Module):
    def __init__(self, spec: DetectorSpec, words: np.ndarray, rng: np.random.Generator, train_vocab: bool = False):
        super().__init__()
        self.spec = spec
        self.backbone = ConvBackbone(spec.channels, rng)
        m = self.backbone.out_channels
        self.fc = Linear(m * spec.roi_size**2, spec.hidden, rng)
        self.cls = Linear(spec.hidden, spec.num_classes, rng)
        self.box = Linear(spec.hidden, 4, rng)
        self.box.weight.data *= 0.1
        self.adapter = FeatureAdapter(m, spec.adapter_dim, rng)
        self.projector = WordProjector(spec.word_dim, spec.adapter_dim, rng)
        self.bovw_head = ClassificationHead(spec.num_words, spec.num_classes, rng)
        words = np.asarray(words, dtype=np.float64)
        if words.shape != (spec.num_words, spec.word_dim):
            raise ValueError(f"vocabulary shape {words.shape} does not match K={spec.num_words}, D={spec.word_dim}")
        if train_vocab:
            self.words = Parameter(words)
        else:
            self.register_buffer("words", words)

    @property
    def num_classes(self) -> int:
        return self.cls.weight.shape[0]

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def feature_maps(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float64))
        return self.backbone(x)

    def roi_features(self, feats: Tensor, boxes: np.ndarray, image_index: np.ndarray) -> Tensor:
        return roi_resample(feats, boxes, image_index, self.spec.roi_size, float(self.stride))

    def heads(self, roi: Tensor) -> tuple[Tensor, Tensor]:
        hidden = self.fc(roi.reshape(roi.shape[0], -1)).relu()
        return self.cls(hidden), self.box(hidden)

    def bovw_maps(self, roi: Tensor) -> Tensor:
        words = self.words if isinstance(self.words, Tensor) else Tensor._wrap(self.words)
        return student_encode(roi, words, self.projector, self.adapter)

    def class_probs(self, roi: Tensor, eta: float | None = None) -> np.ndarray:
        """p_orig, or the fused eta * p_orig + (1 - eta) * p' when eta is given."""
        logits, _ = self.heads(roi)
        p = softmax(logits, axis=-1).data
        if eta is None:
            return p
        p_prime = softmax(self.bovw_head.logits(self.bovw_maps(roi)), axis=-1).data
        return eta * p + (1.0 - eta) * p_prime

    def expand_classes(self, extra: int, rng: np.random.Generator, scale: float = 0.01) -> None:
        """Grow both classifiers by ``extra`` classes; existing rows stay untouched."""
        w, b = self.cls.weight.data, self.cls.bias.data
        self.cls.weight = Parameter(np.concatenate([w, rng.normal(0.0, scale, (extra, w.shape[1]))]))
        self.cls.bias = Parameter(np.concatenate([b, np.zeros(extra)]))
        self.bovw_head.expand(extra, rng, scale)
        self.spec = DetectorSpec(**{**self.spec.__dict__, "num_classes": self.num_classes})

    def parameter_groups(self, use_bovw: bool) -> list[tuple[str, Parameter]]:
        """Named parameters that receive gradients in a stage."""
        skip = () if use_bovw else ("adapter.", "projector.", "bovw_head.", "words")
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(skip)]
