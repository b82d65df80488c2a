"""Teacher pretraining and the two detector stages."""

from __future__ import annotations

import csv
import io as _io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io
from ..bovw import mean_abs_word_correlation
from ..config import Config
from ..distill import detector_total_loss, distill_loss, feature_distill_loss, teacher_encode
from ..numerics import SGD, AdamW, MultiStepSchedule, Tensor, cross_entropy, freeze_batchnorm, no_grad, smooth_l1
from ..ppc import AugConfig, generate_views, momentum_update
from ..rng import rng_for
from ..teacher import PABoVW, TeacherSpec
from .corpus import DetImage, SyntheticCorpus, build_corpus
from .detector import DetectorSpec, ToyDetector
from .proposals import ProposalBatch, encode_deltas, sample_positive_proposals

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "epoch",
    "l_det",
    "l_distill",
    "l_cls_bovw",
    "l_ppc",
    "l_cls",
    "l_decov",
    "acc_base",
    "acc_novel",
    "miscls_novel_to_base",
)


# classifier layers that gain rows when the label space grows
HEAD_PREFIXES = ("fc.", "cls.", "box.", "bovw_head.")


class TrainingDivergedError(RuntimeError):
    pass


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class TrainReport:
    stage: str
    seed: int
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        for key, value in row.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise TrainingDivergedError(f"{self.stage}: non-finite {key} at epoch {row.get('epoch')}")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(r.get(c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _check_finite(stage: str, epoch: int, step: int, losses: dict) -> None:
    for key, value in losses.items():
        v = float(value.data) if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergedError(f"{stage}: loss {key} became {v} at epoch {epoch}, step {step}")


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is merged into its predecessor."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def corpus_from_config(cfg: Config) -> SyntheticCorpus:
    c = cfg.corpus
    return build_corpus(
        cfg.seed,
        num_base=c.num_base,
        num_novel=c.num_novel,
        per_class=c.per_class,
        k=c.k,
        image_size=c.image_size,
        canvas_size=c.canvas_size,
        det_per_class=c.det_per_class,
        test_per_class=c.test_per_class,
        max_objects=c.max_objects,
        object_scale=(c.object_min, c.object_max),
    )


# -- teacher -------------------------------------------------------------------


def teacher_spec(cfg: Config, num_classes: int) -> TeacherSpec:
    return TeacherSpec(
        num_classes=num_classes,
        num_words=cfg.bovw.K,
        dim=cfg.bovw.D,
        channels=tuple(cfg.bovw.channels),
        momentum=cfg.bovw.m,
        encode_from=cfg.bovw.encode_from,
        input_size=cfg.corpus.image_size,
    )


def aug_config(cfg: Config) -> AugConfig:
    b = cfg.bovw
    return AugConfig(
        scale_min=b.scale_min,
        scale_max=b.scale_max,
        flip_prob=b.flip_prob,
        brightness=b.brightness,
        contrast=b.contrast,
        blur_prob=b.blur_prob,
        solarize_prob=b.solarize_prob,
    )


def teacher_accuracy(teacher: PABoVW, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    teacher.eval()
    preds = np.concatenate([teacher.predict(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])
    return float((preds == labels).mean())


def pretrain_bovw(corpus: SyntheticCorpus, cfg: Config, progress=None) -> tuple[PABoVW, TrainReport]:
    """Train the PA-BoVW teacher with L_PPC + L_cls + L_DeCov on base iconic images."""
    images, labels = corpus.iconic_images, corpus.iconic_labels
    if len(images) == 0:
        raise ValueError("pretrain_bovw needs a non-empty iconic corpus")
    seed = cfg.seed
    teacher = PABoVW(teacher_spec(cfg, corpus.num_base), rng_for(seed, "teacher", "init"))
    grid = cfg.corpus.image_size // teacher.stride
    opt = AdamW(teacher.trainable_parameters(), lr=cfg.bovw.lr, weight_decay=cfg.bovw.weight_decay)
    sched = MultiStepSchedule(cfg.bovw.lr, cfg.bovw.milestones)
    aug = aug_config(cfg)
    report = TrainReport("bovw", seed, cfg.hash())
    report.meta["corr_initial"] = mean_abs_word_correlation(teacher.vocabulary.words)

    for epoch in range(cfg.bovw.epochs):
        opt.lr = sched.lr_at(epoch)
        teacher.train()
        sums = {"l_ppc": 0.0, "l_cls": 0.0, "l_decov": 0.0}
        n_batches = 0
        for step, idx in enumerate(batches(len(images), cfg.bovw.batch_size, rng_for(seed, "teacher", "order", epoch))):
            pairs = [
                generate_views(images[i], rng_for(seed, "views", epoch, int(i)), aug, grid=grid, tau_ratio=cfg.bovw.tau)
                for i in idx
            ]
            opt.zero_grad()
            losses = teacher.losses(pairs, labels[idx])
            _check_finite("bovw", epoch, step, {k: losses[k] for k in ("l_ppc", "l_cls", "l_decov")})
            losses["total"].backward()
            opt.step()
            momentum_update(teacher.encoders)
            for key in sums:
                sums[key] += float(losses[key].data)
            n_batches += 1
        acc = teacher_accuracy(teacher, images, labels)
        report.meta.setdefault("corr_per_epoch", []).append(mean_abs_word_correlation(teacher.vocabulary.words))
        report.add(epoch=epoch, **{k: v / n_batches for k, v in sums.items()}, acc_base=acc)
        if progress:
            progress(f"bovw epoch {epoch}: " + ", ".join(f"{k}={v / n_batches:.4f}" for k, v in sums.items()) + f", acc={acc:.4f}, corr={report.meta['corr_per_epoch'][-1]:.4f}")
    teacher.eval()
    report.meta["corr_final"] = mean_abs_word_correlation(teacher.vocabulary.words)
    report.final = {"train_acc": report.rows[-1]["acc_base"]}
    return teacher, report


# -- detector ---------------------------------------------------------------------


@dataclass
class StageFlags:
    distill: bool = False
    fuse: bool = False
    target: str = "bovw"

    @property
    def use_bovw(self) -> bool:
        return self.distill or self.fuse


def detector_spec(cfg: Config, num_classes: int) -> DetectorSpec:
    d = cfg.detector
    return DetectorSpec(
        num_classes=num_classes,
        channels=(*d.channels, d.M),
        roi_size=d.S,
        hidden=d.hidden,
        num_words=cfg.bovw.K,
        word_dim=cfg.bovw.D,
        adapter_dim=cfg.dprime,
    )


def build_detector(cfg: Config, teacher: PABoVW, num_classes: int) -> ToyDetector:
    return ToyDetector(
        detector_spec(cfg, num_classes),
        teacher.vocabulary.words.data.copy(),
        rng_for(cfg.seed, "detector", "init"),
        train_vocab=cfg.distill.train_vocab_in_distill,
    )


def make_proposals(images: list[DetImage], rng: np.random.Generator, cfg: Config, per_gt: int | None = None) -> ProposalBatch:
    parts = []
    per_gt = cfg.detector.per_gt if per_gt is None else per_gt
    for i, d in enumerate(images):
        pb = sample_positive_proposals(d.boxes, d.labels, rng, cfg.detector.jitter, per_gt, bounds=d.image.shape[1:])
        pb.image_index[:] = i
        parts.append(pb)
    return ProposalBatch(
        np.concatenate([p.boxes for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.gt_boxes for p in parts]),
        np.concatenate([p.image_index for p in parts]),
    )


class TeacherCache:
    """Optional memo of teacher maps keyed by (teacher hash, image id, box)."""

    def __init__(self, enabled: bool, teacher_hash: str = ""):
        self.enabled = enabled
        self.teacher_hash = teacher_hash
        self.store: dict = {}

    def maps(self, teacher, images: list[DetImage], props: ProposalBatch) -> Tensor:
        if not self.enabled:
            return teacher_encode([images[i].image for i in props.image_index], props.boxes, teacher)
        keys = [(self.teacher_hash, images[i].image_id, tuple(np.round(b, 6))) for i, b in zip(props.image_index, props.boxes)]
        todo = [j for j, k in enumerate(keys) if k not in self.store]
        if todo:
            fresh = teacher_encode(
                [images[props.image_index[j]].image for j in todo], props.boxes[todo], teacher
            ).data
            for j, arr in zip(todo, fresh):
                self.store[keys[j]] = arr
        return Tensor._wrap(np.stack([self.store[k] for k in keys]))


def teacher_crops(images: list[DetImage], props: ProposalBatch, size: int) -> np.ndarray:
    from ..distill import crop_box

    return np.stack([crop_box(images[i].image, b, size) for i, b in zip(props.image_index, props.boxes)])


def detector_losses(
    detector: ToyDetector,
    teacher: PABoVW | None,
    images: list[DetImage],
    props: ProposalBatch,
    flags: StageFlags,
    cache: TeacherCache | None = None,
) -> dict[str, Tensor]:
    """L_det (+ L_distill + L_cls-BoVW) on one batch of images and proposals."""
    x = np.stack([d.image for d in images])
    feats = detector.feature_maps(x)
    roi = detector.roi_features(feats, props.boxes, props.image_index)
    logits, deltas = detector.heads(roi)
    l_cls = cross_entropy(logits, props.labels)
    l_box = smooth_l1(deltas, encode_deltas(props.boxes, props.gt_boxes))
    l_det = l_cls + l_box
    zero = Tensor(0.0)
    l_distill, l_cls_bovw = zero, zero
    if flags.use_bovw:
        q = detector.bovw_maps(roi)
        l_cls_bovw = cross_entropy(detector.bovw_head.logits(q), props.labels)
        if flags.distill:
            if teacher is None:
                raise ValueError("distillation needs a teacher")
            if flags.target == "bovw":
                p = (cache or TeacherCache(False)).maps(teacher, images, props)
                l_distill = distill_loss(p, q)
            else:
                teacher.eval()
                with no_grad():
                    t_feat = teacher.pooled_features(teacher_crops(images, props, teacher.spec.input_size))
                l_distill = feature_distill_loss(t_feat, detector.adapter(roi).mean(axis=(-2, -1)))
    total = detector_total_loss(l_det, l_distill, l_cls_bovw)
    return {"l_det": l_det, "l_distill": l_distill, "l_cls_bovw": l_cls_bovw, "total": total, "roi_logits": logits}


def _train_detector(
    detector: ToyDetector,
    teacher: PABoVW | None,
    data: list[DetImage],
    cfg: Config,
    flags: StageFlags,
    stage: str,
    lr: float,
    epochs: int,
    milestones,
    report: TrainReport,
    evaluate_fn=None,
    progress=None,
    freeze_bn: bool = False,
    head_lr_mult: float = 1.0,
    backbone_lr_mult: float = 1.0,
    bovw_head_lr_mult: float = 1.0,
) -> None:
    seed = cfg.seed
    opt = SGD(
        detector.parameter_groups(flags.use_bovw),
        lr=lr,
        momentum=cfg.detector.momentum,
        weight_decay=cfg.detector.weight_decay,
        lr_mult={
            **{prefix: head_lr_mult for prefix in HEAD_PREFIXES},
            "bovw_head.": head_lr_mult * bovw_head_lr_mult,
            "backbone.": backbone_lr_mult,
        },
    )
    sched = MultiStepSchedule(lr, milestones)
    cache_on = cfg.distill.cache_teacher and teacher is not None
    cache = TeacherCache(cache_on, io.state_hash(teacher.state_dict()) if cache_on else "")
    seen = report.meta.setdefault("images_read", [])
    for epoch in range(epochs):
        opt.lr = sched.lr_at(epoch)
        detector.train()
        if freeze_bn:
            freeze_batchnorm(detector)
        sums = {"l_det": 0.0, "l_distill": 0.0, "l_cls_bovw": 0.0}
        correct = total = 0
        order_rng = rng_for(seed, stage, "order", epoch)
        prop_rng = rng_for(seed, stage, "proposals", epoch)
        batch_list = batches(len(data), cfg.detector.batch_size, order_rng)
        for step, idx in enumerate(batch_list):
            imgs = [data[i] for i in idx]
            seen.extend(d.image_id for d in imgs)
            props = make_proposals(imgs, prop_rng, cfg, cfg.detector.per_gt_novel if stage == "novel" else None)
            opt.zero_grad()
            losses = detector_losses(detector, teacher, imgs, props, flags, cache)
            _check_finite(stage, epoch, step, {k: losses[k] for k in sums})
            losses["total"].backward()
            opt.step()
            for key in sums:
                sums[key] += float(losses[key].data)
            correct += int((losses["roi_logits"].data.argmax(axis=1) == props.labels).sum())
            total += len(props)
        row = {k: v / len(batch_list) for k, v in sums.items()}
        row["epoch"] = epoch
        last = epoch == epochs - 1
        every = cfg.detector.eval_every
        if evaluate_fn is not None and (last or (every and (epoch + 1) % every == 0)):
            m = evaluate_fn(detector)
            report.final = m
            row.update(acc_base=m["acc_base"], acc_novel=m["acc_novel"], miscls_novel_to_base=m["miscls_novel_to_base"])
        elif evaluate_fn is None:
            row["acc_base"] = correct / max(total, 1)
        report.add(**row)
        if progress:
            progress(f"{stage} epoch {epoch}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
    detector.eval()


def train_base_with_distill(
    teacher: PABoVW, corpus: SyntheticCorpus, cfg: Config, flags: StageFlags, progress=None
) -> tuple[ToyDetector, TrainReport]:
    """Stage 1: base-class detection images only."""
    teacher_hash = io.state_hash(teacher.state_dict())
    detector = build_detector(cfg, teacher, corpus.num_base)
    report = TrainReport("base", cfg.seed, cfg.hash())
    report.meta["flags"] = flags.__dict__.copy()
    _train_detector(
        detector,
        teacher,
        corpus.det_base,
        cfg,
        flags,
        "base",
        cfg.detector.lr,
        cfg.detector.epochs_base,
        cfg.detector.milestones_base,
        report,
        progress=progress,
    )
    if io.state_hash(teacher.state_dict()) != teacher_hash:
        raise RuntimeError("teacher parameters changed during detector training")
    report.final = {"train_acc": report.rows[-1]["acc_base"]} if report.rows else {}
    return detector, report


def load_detector_checkpoint(path, cfg: Config, teacher: PABoVW, num_classes: int) -> ToyDetector:
    p = Path(path)
    if not p.exists():
        raise MissingCheckpointError(f"stage-1 checkpoint {p} does not exist; run the base stage first")
    det = build_detector(cfg, teacher, num_classes)
    det.load_state_dict(io.load_checkpoint(p))
    return det


def finetune_novel(
    detector: ToyDetector | str | Path,
    teacher: PABoVW,
    corpus: SyntheticCorpus,
    cfg: Config,
    flags: StageFlags,
    eta: float | None = None,
    progress=None,
) -> tuple[ToyDetector, TrainReport]:
    """Stage 2: expand the heads to base+novel and fine-tune everything on the k-shot set."""
    if not isinstance(detector, ToyDetector):
        detector = load_detector_checkpoint(detector, cfg, teacher, corpus.num_base)
    from .evaluate import evaluate

    teacher_hash = io.state_hash(teacher.state_dict())
    if detector.num_classes == corpus.num_base:
        detector.expand_classes(corpus.num_novel, rng_for(cfg.seed, "detector", "expand"))
    report = TrainReport("novel", cfg.seed, cfg.hash())
    report.meta["flags"] = flags.__dict__.copy()
    fuse_eta = eta if eta is not None else (cfg.distill.eta if flags.fuse else None)
    _train_detector(
        detector,
        teacher,
        corpus.finetune_set(cfg.detector.finetune_set),
        cfg,
        flags,
        "novel",
        cfg.detector.lr * cfg.detector.finetune_lr_ratio,
        cfg.detector.epochs_novel,
        cfg.detector.milestones_novel,
        report,
        evaluate_fn=lambda det: evaluate(det, corpus, fuse_eta),
        progress=progress,
        freeze_bn=cfg.detector.freeze_bn_novel,
        head_lr_mult=cfg.detector.head_lr_mult_novel,
        backbone_lr_mult=cfg.detector.backbone_lr_mult_novel,
        bovw_head_lr_mult=cfg.detector.bovw_head_lr_mult_novel,
    )
    if io.state_hash(teacher.state_dict()) != teacher_hash:
        raise RuntimeError("teacher parameters changed during detector training")
    return detector, report
