"""Registered finite-difference cases, one or more per differentiable public op.

Each case builds a fresh random instance from a generator and returns a
scalar closure plus the tensors to perturb. ``run_suite`` evaluates every
case on several instances and keeps the worst error per case.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bovw, distill, ppc
from .numerics import Tensor, gradcheck
from .numerics import functional as F
from .numerics import ops as T
from .numerics.gradcheck import GradcheckReport
from .numerics.nn import BatchNorm, Parameter

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class GradCase:
    name: str
    build: Builder
    max_coords: int | None = 24


REGISTRY: dict[str, GradCase] = {}


def register(name: str, max_coords: int | None = 24):
    def deco(fn: Builder) -> Builder:
        if name in REGISTRY:
            raise ValueError(f"duplicate gradcheck case {name!r}")
        REGISTRY[name] = GradCase(name, fn, max_coords)
        return fn

    return deco


def _p(rng, *shape, lo: float | None = None) -> Parameter:
    x = rng.standard_normal(shape)
    if lo is not None:  # keep kinked ops (relu, abs) away from their kink
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)
    return Parameter(x)


def _perturb(module, rng) -> None:
    # zero-initialized biases can put a pixel exactly at the origin, where
    # l2_normalize has its kink; random instances should be generic points
    for _, p in module.named_parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)


def _w(rng, x: Tensor) -> np.ndarray:
    return rng.standard_normal(x.shape)


def _scalar(out: Tensor, weights: np.ndarray) -> Tensor:
    # random projection so every output coordinate matters
    return (out * weights).sum()


def _elementwise(name: str, op, positive: bool = False, lo: float | None = None):
    @register(name)
    def case(rng):
        x = Parameter(rng.uniform(0.5, 2.0, (3, 4))) if positive else _p(rng, 3, 4, lo=lo)
        w = _w(rng, op(x))
        return (lambda: _scalar(op(x), w)), [x]

    return case


# -- tensor core ----------------------------------------------------------------

_elementwise("exp", T.exp)
_elementwise("log", T.log, positive=True)
_elementwise("sqrt", lambda x: x.sqrt(), positive=True)
_elementwise("abs", lambda x: x.abs(), lo=0.1)
_elementwise("relu", T.relu, lo=0.1)
_elementwise("clamp_min", lambda x: x.clamp_min(0.0), lo=0.1)
_elementwise("neg", lambda x: -x)
_elementwise("pow", lambda x: x**3)
_elementwise("softmax", lambda x: T.softmax(x, axis=-1))
_elementwise("log_softmax", lambda x: T.log_softmax(x, axis=0))
_elementwise("sum", lambda x: T.sum(x, axis=1, keepdims=True) * x)
_elementwise("mean", lambda x: T.mean(x, axis=0) * 1.0)
_elementwise("reshape", lambda x: x.reshape(2, 6) * np.arange(12.0).reshape(2, 6))
_elementwise("transpose", lambda x: x.transpose(1, 0) * np.arange(12.0).reshape(4, 3))
_elementwise("getitem", lambda x: x[np.array([0, 2, 2]), np.array([1, 3, 1])])


@register("add")
def _add(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _scalar(T.add(a, b), w)), [a, b]


@register("sub")
def _sub(rng):
    a, b = _p(rng, 3, 1), _p(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _scalar(a - b, w)), [a, b]


@register("mul")
def _mul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 1, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _scalar(T.mul(a, b), w)), [a, b]


@register("div")
def _div(rng):
    a = _p(rng, 3, 4)
    b = Parameter(rng.uniform(0.5, 2.0, (3, 4)))
    w = rng.standard_normal((3, 4))
    return (lambda: _scalar(a / b, w)), [a, b]


@register("matmul")
def _matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    return (lambda: _scalar(T.matmul(a, b), w)), [a, b]


@register("concat")
def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    w = rng.standard_normal((6, 3))
    return (lambda: _scalar(T.concat([a, b], axis=0), w)), [a, b]


@register("stack")
def _stack(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 3)
    w = rng.standard_normal((2, 2, 3))
    return (lambda: _scalar(T.stack([a, b], axis=1), w)), [a, b]


@register("where")
def _where(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    mask = rng.random((3, 4)) < 0.5
    w = rng.standard_normal((3, 4))
    return (lambda: _scalar(T.where(mask, a, b), w)), [a, b]


# -- functional ---------------------------------------------------------------------


@register("l2_normalize")
def _l2n(rng):
    x = _p(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    return (lambda: _scalar(F.l2_normalize(x, axis=-1), w)), [x]


@register("cosine_sim")
def _cos(rng):
    u, v = _p(rng, 4, 6), _p(rng, 4, 6)
    w = rng.standard_normal(4)
    return (lambda: _scalar(F.cosine_sim(u, v), w)), [u, v]


@register("pairwise_cosine")
def _pcos(rng):
    a, b = _p(rng, 3, 5), _p(rng, 4, 5)
    w = rng.standard_normal((3, 4))
    return (lambda: _scalar(F.pairwise_cosine(a, b), w)), [a, b]


@register("linear")
def _linear(rng):
    x, wt, b = _p(rng, 3, 5), _p(rng, 4, 5), _p(rng, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _scalar(F.linear(x, wt, b), w)), [x, wt, b]


@register("conv2d")
def _conv(rng):
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    x, wt, b = _p(rng, 2, 3, 6, 6), _p(rng, 4, 3, k, k), _p(rng, 4)
    out = F.conv2d(x, wt, b, stride=stride, padding=k // 2)
    w = rng.standard_normal(out.shape)
    return (lambda: _scalar(F.conv2d(x, wt, b, stride=stride, padding=k // 2), w)), [x, wt, b]


@register("conv2d_edge")
def _conv_edge(rng):
    stride = int(rng.integers(1, 3))
    x, wt = _p(rng, 2, 2, 5, 5), _p(rng, 3, 2, 3, 3)
    out = F.conv2d(x, wt, stride=stride, padding=1, pad_mode="edge")
    w = rng.standard_normal(out.shape)
    return (lambda: _scalar(F.conv2d(x, wt, stride=stride, padding=1, pad_mode="edge"), w)), [x, wt]


@register("batch_norm")
def _bn(rng):
    x = _p(rng, 4, 3, 2, 2)
    bn = BatchNorm(3)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.standard_normal(3)
    training = bool(rng.random() < 0.7)
    bn.train(training)
    if not training:
        bn.running_mean[:] = rng.standard_normal(3)
        bn.running_var[:] = rng.uniform(0.5, 2.0, 3)
    w = rng.standard_normal(x.shape)
    mean0, var0 = bn.running_mean.copy(), bn.running_var.copy()

    def f():
        # running statistics are side effects, not inputs; reset them per call
        bn.running_mean[:], bn.running_var[:] = mean0, var0
        return _scalar(bn(x), w)

    return f, [x, bn.gamma, bn.beta]


@register("separable_resample")
def _sep(rng):
    x = _p(rng, 2, 5, 6)
    wy, wx = F.interp_matrix(5, 3, 0.5, 4.2), F.interp_matrix(6, 4, 1.0, 5.5)
    w = rng.standard_normal((2, 3, 4))
    return (lambda: _scalar(F.separable_resample(x, wy, wx), w)), [x]


@register("bilinear_resize")
def _resize(rng):
    x = _p(rng, 2, 5, 7)
    oh, ow = int(rng.integers(2, 10)), int(rng.integers(2, 10))
    w = rng.standard_normal((2, oh, ow))
    return (lambda: _scalar(F.bilinear_resize(x, oh, ow), w)), [x]


@register("crop_and_resize")
def _crop(rng):
    x = _p(rng, 3, 8, 8)
    x0, y0 = rng.uniform(0, 3, 2)
    box = (x0, y0, x0 + rng.uniform(2, 5), y0 + rng.uniform(2, 5))
    w = rng.standard_normal((3, 4, 4))
    return (lambda: _scalar(F.crop_and_resize(x, box, 4, 4), w)), [x]


@register("roi_resample")
def _roi(rng):
    feats = _p(rng, 2, 3, 4, 4)
    boxes = np.array([[2.0, 3.0, 20.0, 25.0], [8.0, 0.0, 30.0, 16.0], [0.0, 0.0, 32.0, 32.0]])
    boxes += rng.uniform(-1, 1, boxes.shape)
    index = np.array([0, 1, 1])
    w = rng.standard_normal((3, 3, 2, 2))
    return (lambda: _scalar(F.roi_resample(feats, boxes, index, 2, 8.0), w)), [feats]


@register("cross_entropy")
def _ce(rng):
    logits = _p(rng, 5, 4)
    labels = rng.integers(0, 4, 5)
    return (lambda: F.cross_entropy(logits, labels)), [logits]


@register("nll_from_probs")
def _nll(rng):
    logits = _p(rng, 5, 4)
    labels = rng.integers(0, 4, 5)
    return (lambda: F.nll_from_probs(T.softmax(logits, axis=-1), labels)), [logits]


@register("smooth_l1")
def _sl1(rng):
    pred = _p(rng, 5, 4)
    # offsets kept clear of the |d| = beta and d = 0 kinks
    delta = rng.choice([-1, 1], (5, 4)) * rng.choice([rng.uniform(0.1, 0.9), rng.uniform(1.1, 2.0)], (5, 4))
    target = pred.data - delta
    return (lambda: F.smooth_l1(pred, target)), [pred]


# -- BoVW / PPC / distillation ----------------------------------------------------------


@register("similarity_map")
def _sim(rng):
    words, pixels = _p(rng, 5, 4), _p(rng, 2, 4, 3, 3)
    w = rng.standard_normal((2, 5, 3, 3))
    return (lambda: _scalar(bovw.similarity_map(words, pixels), w)), [words, pixels]


@register("encode_similarity_map")
def _enc(rng):
    enc = bovw.BovwEncoder(6, 5, 4, rng)
    feats = _p(rng, 2, 6, 3, 3)
    w = rng.standard_normal((2, 5, 3, 3))
    params = [feats, enc.projection.weight, enc.projection.bias, enc.vocabulary.words]
    return (lambda: _scalar(bovw.encode_similarity_map(feats, enc), w)), params


@register("average_pool_map")
def _pool(rng):
    sim = _p(rng, 2, 5, 3, 3)
    w = rng.standard_normal((2, 5))
    return (lambda: _scalar(bovw.average_pool_map(sim), w)), [sim]


@register("classify_bovw")
def _cls(rng):
    enc = bovw.BovwEncoder(6, 5, 4, rng)
    head = bovw.ClassificationHead(5, 3, rng)
    feats = rng.standard_normal((4, 6, 3, 3))
    labels = rng.integers(0, 3, 4)
    return (lambda: bovw.classify_bovw(bovw.encode_similarity_map(feats, enc), head, labels)[1]), [
        enc.vocabulary.words,
        head.fc.weight,
    ]


@register("word_covariance")
def _cov(rng):
    words = _p(rng, 5, 6)
    w = rng.standard_normal((5, 5))
    return (lambda: _scalar(bovw.word_covariance(words), w)), [words]


@register("decov_loss")
def _decov(rng):
    words = _p(rng, 6, 8)
    return (lambda: bovw.decov_loss(words)), [words]


@register("propagate")
def _prop(rng):
    mod = ppc.PixelPropagation(4, rng)
    feats = _p(rng, 2, 4, 3, 3)
    w = rng.standard_normal((2, 4, 3, 3))
    return (lambda: _scalar(ppc.propagate(feats, mod), w)), [feats, mod.transform[0].weight, mod.transform[3].weight]


@register("ppc_loss", max_coords=16)
def _ppc(rng):
    from .backbone import ConvBackbone

    enc = ppc.EncoderPair(ppc.RegularEncoder(ConvBackbone((4, 6), rng), 5, rng), 0.9)
    mod = ppc.PixelPropagation(5, rng)
    img = rng.random((3, 8, 8))
    # two shifted crops with 2 x 2 cells; overlapping cells match
    g1 = ppc.ViewGeometry((0.0, 0.0, 6.0, 6.0), False, 8)
    g2 = ppc.ViewGeometry((2.0, 2.0, 8.0, 8.0), bool(rng.random() < 0.5), 8)
    pair = ppc.views_from_geometry(img, g1, g2, grid=2, tau_ratio=1.5)
    _perturb(enc, rng)
    _perturb(mod, rng)
    params = [p for _, p in enc.trainable_parameters()] + [mod.transform[0].weight]
    return (lambda: ppc.ppc_loss([pair, pair.swapped()], enc, mod)[0]), params


@register("student_encode")
def _student(rng):
    g = distill.WordProjector(4, 3, rng)
    phi = distill.FeatureAdapter(6, 3, rng)
    roi = _p(rng, 2, 6, 2, 2)
    words = rng.standard_normal((5, 4))
    w = rng.standard_normal((2, 5, 2, 2))
    return (lambda: _scalar(distill.student_encode(roi, words, g, phi), w)), [roi, g.fc.weight, phi.conv.weight]


@register("distill_loss")
def _dl(rng):
    p = rng.uniform(-1, 1, (3, 5, 2, 2))
    q = Parameter(p + rng.choice([-1, 1], p.shape) * rng.uniform(0.05, 0.5, p.shape))
    return (lambda: distill.distill_loss(p, q)), [q]


@register("feature_distill_loss")
def _fdl(rng):
    t = rng.standard_normal((3, 4))
    s = Parameter(t + rng.choice([-1, 1], t.shape) * rng.uniform(0.05, 0.5, t.shape))
    return (lambda: distill.feature_distill_loss(t, s)), [s]


@register("fuse_scores")
def _fuse(rng):
    head = bovw.ClassificationHead(5, 3, rng)
    logits = _p(rng, 4, 3)
    q = _p(rng, 4, 5, 2, 2)
    eta = float(rng.uniform(0, 1))
    labels = rng.integers(0, 3, 4)
    w = rng.standard_normal((4, 3))

    def f():
        res = distill.fuse_scores(T.softmax(logits, axis=-1), q, head, eta, labels)
        return _scalar(res.p, w) + res.loss

    return f, [logits, q, head.fc.weight]


# -- composite losses ------------------------------------------------------------


@register("bovw_total_loss", max_coords=16)
def _teacher_total(rng):
    from .teacher import PABoVW, TeacherSpec

    spec = TeacherSpec(num_classes=3, num_words=6, dim=5, channels=(4, 6), momentum=0.9, input_size=8)
    teacher = PABoVW(spec, rng)
    _perturb(teacher, rng)
    pairs = []
    for _ in range(2):
        img = rng.random((3, 8, 8))
        pairs.append(ppc.generate_views(img, rng, ppc.AugConfig(flip_prob=0.5), grid=2, tau_ratio=1.5))
    labels = rng.integers(0, 3, 2)
    params = [p for _, p in teacher.trainable_parameters()]
    return (lambda: teacher.losses(pairs, labels)["total"]), params


@register("detector_total_loss", max_coords=16)
def _detector_total(rng):
    from .harness.corpus import DetImage
    from .harness.detector import DetectorSpec, ToyDetector
    from .harness.proposals import ProposalBatch
    from .harness.training import StageFlags, detector_losses
    from .teacher import PABoVW, TeacherSpec

    teacher = PABoVW(TeacherSpec(num_classes=3, num_words=6, dim=5, channels=(4, 6), input_size=8), rng)
    det = ToyDetector(
        DetectorSpec(num_classes=3, channels=(4, 6), roi_size=2, hidden=8, num_words=6, word_dim=5, adapter_dim=4),
        teacher.vocabulary.words.data.copy(),
        rng,
    )
    images = [DetImage(rng.random((3, 16, 16)), np.array([[2.0, 2.0, 12.0, 13.0]]), np.array([i % 3]), f"g{i}") for i in range(2)]
    boxes = np.array([[2.5, 1.5, 12.0, 13.5], [3.0, 2.0, 11.0, 12.0]])
    props = ProposalBatch(boxes, np.array([0, 1]), np.array([[2.0, 2.0, 12.0, 13.0]] * 2), np.array([0, 1]))
    flags = StageFlags(distill=True, fuse=True)
    params = [p for _, p in det.parameter_groups(True)]
    return (lambda: detector_losses(det, teacher, images, props, flags)["total"]), params


def run_case(case: GradCase, instances: int = 10, seed: int = 0, h: float = 1e-6, tol: float = 1e-4) -> GradcheckReport:
    worst: GradcheckReport | None = None
    n = 0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, case.name))])
        f, params = case.build(rng)
        rep = gradcheck(f, params, h=h, tol=tol, name=case.name, max_coords=case.max_coords, rng=rng)
        n += rep.n_coords
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    assert worst is not None
    return GradcheckReport(case.name, worst.max_rel_error, worst.max_abs_error, n, tol)


def run_suite(
    names=None, instances: int = 10, seed: int = 0, h: float = 1e-6, tol: float = 1e-4, progress=None
) -> list[GradcheckReport]:
    names = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    reports = []
    for name in names:
        t0 = time.perf_counter()
        rep = run_case(REGISTRY[name], instances, seed, h, tol)
        reports.append(rep)
        if progress:
            progress(f"{rep} [{time.perf_counter() - t0:.2f}s]")
    return reports
