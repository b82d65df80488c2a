"""The full PA-BoVW model used as the distillation teacher."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import ConvBackbone
from .bovw import BovwEncoder, ClassificationHead, bovw_total_loss, classify_bovw, decov_loss, encode_similarity_map
from .numerics import Module, Tensor, no_grad
from .ppc import EncoderPair, PixelPropagation, RegularEncoder, ViewPair, pair_index, ppc_loss_from_features, propagate, stack_views


@dataclass
class TeacherSpec:
    num_classes: int
    num_words: int = 32
    dim: int = 32
    channels: Sequence[int] = (16, 32, 32, 64)
    momentum: float = 0.99
    encode_from: str = "backbone"
    input_size: int = 64


class PABoVW(Module):
    def __init__(self, spec: TeacherSpec, rng: np.random.Generator):
        super().__init__()
        if spec.encode_from not in ("backbone", "projection"):
            raise ValueError(f"encode_from must be 'backbone' or 'projection', got {spec.encode_from!r}")
        self.spec = spec
        backbone = ConvBackbone(spec.channels, rng)
        self.encoders = EncoderPair(RegularEncoder(backbone, spec.dim, rng), spec.momentum)
        self.propagation = PixelPropagation(spec.dim, rng)
        enc_in = backbone.out_channels if spec.encode_from == "backbone" else spec.dim
        self.encoder = BovwEncoder(enc_in, spec.num_words, spec.dim, rng)
        self.head = ClassificationHead(spec.num_words, spec.num_classes, rng)

    @property
    def vocabulary(self):
        return self.encoder.vocabulary

    @property
    def stride(self) -> int:
        return self.encoders.regular.backbone.stride

    def trainable_parameters(self) -> list:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("encoders.momentum_encoder.")]

    def _encoding_input(self, feats: Tensor, proj: Tensor) -> Tensor:
        return feats if self.spec.encode_from == "backbone" else proj

    def similarity(self, images) -> Tensor:
        """Similarity maps (N, K, H, W) for a batch of images through the regular branch."""
        x = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float64))
        if self.spec.encode_from == "backbone":
            enc_in = self.encoders.regular.backbone(x)
        else:
            enc_in = self.encoders.regular(x)[1]
        return encode_similarity_map(enc_in, self.encoder)

    def pooled_features(self, images) -> Tensor:
        """Spatially pooled word-space projection, used by feature-level distillation."""
        x = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float64))
        feats, proj = self.encoders.regular(x)
        return self.encoder.projection(self._encoding_input(feats, proj)).mean(axis=(-2, -1))

    def predict(self, images) -> np.ndarray:
        with no_grad():
            logits = self.head.logits(self.similarity(images))
        return logits.data.argmax(axis=1)

    def losses(self, pairs: list[ViewPair], labels) -> dict[str, Tensor]:
        """L_PPC, L_cls (on both views) and L_DeCov for one batch of view pairs."""
        x = Tensor._wrap(stack_views(pairs))
        feats, proj = self.encoders.regular(x)
        q = propagate(proj, self.propagation)
        target = self.encoders.momentum_forward(x)
        l_ppc, n_pairs = ppc_loss_from_features(q, target, pair_index(pairs))
        labels = np.asarray(labels, dtype=np.intp)
        sim = encode_similarity_map(self._encoding_input(feats, proj), self.encoder)
        _, l_cls = classify_bovw(sim, self.head, np.concatenate([labels, labels]))
        l_decov = decov_loss(self.vocabulary)
        return {
            "l_ppc": l_ppc,
            "l_cls": l_cls,
            "l_decov": l_decov,
            "total": bovw_total_loss(l_ppc, l_cls, l_decov),
            "n_pairs": n_pairs,
        }
