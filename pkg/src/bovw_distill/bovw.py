"""Position-aware bag-of-visual-words encoding.

A vocabulary of K learnable D-dimensional words is compared by cosine
similarity against every projected pixel of a feature map, producing a
K x H x W similarity map that keeps the spatial layout. Pooling that map
gives a K-vector fed to a linear classifier.
"""

from __future__ import annotations

import numpy as np

from . import io
from .numerics import (
    Conv2d,
    Linear,
    Module,
    Parameter,
    ShapeError,
    Tensor,
    cross_entropy,
    ensure_tensor,
    l2_normalize,
    softmax,
)


class Vocabulary(Module):
    def __init__(self, num_words: int, dim: int, rng: np.random.Generator):
        super().__init__()
        if num_words < 1 or dim < 1:
            raise ValueError(f"vocabulary needs K >= 1 and D >= 1, got K={num_words}, D={dim}")
        # unit-variance entries: cosine ignores the scale, but DeCov (a covariance
        # penalty) needs O(1) entries to compete with the classification gradient
        words = rng.standard_normal((num_words, dim))
        # redraw the (astronomically unlikely) near-zero words
        while True:
            small = np.linalg.norm(words, axis=1) < 1e-8
            if not small.any():
                break
            words[small] = rng.standard_normal((int(small.sum()), dim))
        self.words = Parameter(words)

    @property
    def K(self) -> int:
        return self.words.shape[0]

    @property
    def D(self) -> int:
        return self.words.shape[1]

    @classmethod
    def from_array(cls, words: np.ndarray) -> "Vocabulary":
        vocab = cls.__new__(cls)
        Module.__init__(vocab)
        vocab.words = Parameter(np.asarray(words, dtype=np.float64))
        return vocab

    def save(self, path) -> None:
        io.save_vocabulary(path, self.words.data)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_array(io.load_vocabulary(path))


def save_vocabulary(vocab: Vocabulary, path) -> None:
    vocab.save(path)


def load_vocabulary(path) -> Vocabulary:
    return Vocabulary.load(path)


def similarity_map(words: Tensor, pixels: Tensor) -> Tensor:
    """Cosine similarity of every word with every pixel.

    words: (K, D); pixels: (N, D, H, W) or (D, H, W) -> (N, K, H, W) / (K, H, W).
    """
    words, pixels = ensure_tensor(words), ensure_tensor(pixels)
    squeeze = pixels.ndim == 3
    if squeeze:
        pixels = pixels.reshape(1, *pixels.shape)
    n, d, h, w = pixels.shape
    if words.shape[1] != d:
        raise ShapeError(f"similarity_map: words {words.shape} and pixel features {pixels.shape} differ in dimension")
    flat = l2_normalize(pixels.reshape(n, d, h * w), axis=1)
    out = (l2_normalize(words, axis=1) @ flat).reshape(n, words.shape[0], h, w)
    return out.reshape(out.shape[1:]) if squeeze else out


class BovwEncoder(Module):
    """1x1 projection of backbone features into word space plus the vocabulary."""

    def __init__(self, in_channels: int, num_words: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.projection = Conv2d(in_channels, dim, 1, rng)
        self.vocabulary = Vocabulary(num_words, dim, rng)

    def forward(self, features: Tensor) -> Tensor:
        return encode_similarity_map(features, self)


def encode_similarity_map(features: Tensor, encoder: BovwEncoder) -> Tensor:
    features = ensure_tensor(features)
    c = features.shape[-3]
    if c != encoder.projection.in_channels:
        raise ShapeError(
            f"encode_similarity_map: features {features.shape} have {c} channels, "
            f"projection expects {encoder.projection.in_channels}"
        )
    return similarity_map(encoder.vocabulary.words, encoder.projection(features))


def average_pool_map(sim: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: (..., K, H, W) -> (..., K)."""
    return ensure_tensor(sim).mean(axis=(-2, -1))


class ClassificationHead(Module):
    def __init__(self, num_words: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(num_words, num_classes, rng)

    @property
    def num_classes(self) -> int:
        return self.fc.weight.shape[0]

    def logits(self, sim: Tensor) -> Tensor:
        pooled = average_pool_map(sim)
        if pooled.shape[-1] != self.fc.weight.shape[1]:
            raise ShapeError(f"head expects {self.fc.weight.shape[1]} words, map has shape {sim.shape}")
        return self.fc(pooled)

    def expand(self, extra: int, rng: np.random.Generator, scale: float = 0.01) -> None:
        """Append ``extra`` output classes; existing rows are kept verbatim."""
        w, b = self.fc.weight.data, self.fc.bias.data
        self.fc.weight = Parameter(np.concatenate([w, rng.normal(0, scale, (extra, w.shape[1]))]))
        self.fc.bias = Parameter(np.concatenate([b, np.zeros(extra)]))


def classify_bovw(sim: Tensor, head: ClassificationHead, labels) -> tuple[Tensor, Tensor]:
    """Return (probabilities, mean cross-entropy) for a batch (N, K, H, W) or single (K, H, W) map."""
    sim = ensure_tensor(sim)
    single = sim.ndim == 3
    if single:
        sim = sim.reshape(1, *sim.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise IndexError(f"label out of range for {head.num_classes} classes: {labels.tolist()}")
    logits = head.logits(sim)
    probs = softmax(logits, axis=-1)
    loss = cross_entropy(logits, labels)
    return (probs.reshape(probs.shape[1:]) if single else probs), loss


def word_covariance(words: Tensor) -> Tensor:
    """K x K covariance between words, each centered over its own D entries, divided by D."""
    words = ensure_tensor(words)
    centered = words - words.mean(axis=1, keepdims=True)
    return (centered @ centered.T) * (1.0 / words.shape[1])


def decov_loss(vocab) -> Tensor:
    """Half the squared Frobenius norm of the off-diagonal word covariance."""
    words = vocab.words if isinstance(vocab, Vocabulary) else ensure_tensor(vocab)
    cov = word_covariance(words)
    off = cov * (1.0 - np.eye(cov.shape[0]))
    return (off * off).sum() * 0.5


def mean_abs_word_correlation(words) -> float:
    """Mean |Pearson correlation| over distinct word pairs."""
    w = np.asarray(words.data if isinstance(words, Tensor) else words, dtype=np.float64)
    if w.shape[0] < 2:
        return 0.0
    c = w - w.mean(axis=1, keepdims=True)
    cov = c @ c.T
    sd = np.sqrt(np.clip(np.diag(cov), 1e-300, None))
    corr = cov / np.outer(sd, sd)
    iu = np.triu_indices(w.shape[0], k=1)
    return float(np.abs(corr[iu]).mean())


def bovw_total_loss(l_ppc, l_cls, l_decov):
    return l_ppc + l_cls + l_decov
