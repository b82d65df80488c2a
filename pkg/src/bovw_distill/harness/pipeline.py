"""End-to-end runs: teacher, base stage, novel stage, and the four-row ablation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

from ..config import Config
from ..teacher import PABoVW
from .corpus import SyntheticCorpus
from .evaluate import evaluate
from .training import StageFlags, TrainReport, corpus_from_config, finetune_novel, pretrain_bovw, train_base_with_distill

# cumulative configurations: (name, distill in base stage, distill in novel stage, score fusion)
ABLATION = (
    ("baseline", False, False, False),
    ("+base", True, False, False),
    ("+novel", True, True, False),
    ("full", True, True, True),
)


@dataclass
class RunResult:
    name: str
    metrics: dict
    reports: list[TrainReport] = field(default_factory=list)

    @property
    def acc_novel(self) -> float:
        return self.metrics["acc_novel"]

    @property
    def miscls(self) -> int:
        return self.metrics["miscls_novel_to_base"]


def run_detector(
    teacher: PABoVW,
    corpus: SyntheticCorpus,
    cfg: Config,
    base: bool,
    novel: bool,
    fuse: bool,
    name: str = "run",
    stage1_cache: dict | None = None,
    progress=None,
    stage2_cache: dict | None = None,
) -> RunResult:
    """Both detector stages for one flag combination.

    ``stage1_cache`` maps the base-stage flag to a trained stage-1 detector,
    so ablation rows that share a base stage train it once. ``stage2_cache``
    does the same for stage 2: fusion only changes inference, so rows that
    differ only in ``fuse`` (with the BoVW branch already on) share training
    and are evaluated separately.
    """
    target = cfg.distill.target
    if stage1_cache is not None and base in stage1_cache:
        det1, rep1 = stage1_cache[base]
    else:
        det1, rep1 = train_base_with_distill(teacher, corpus, cfg, StageFlags(distill=base, target=target), progress)
        if stage1_cache is not None:
            stage1_cache[base] = (det1, rep1)
    flags = StageFlags(distill=novel, fuse=fuse, target=target)
    eta = cfg.distill.eta if fuse else None
    key = (base, novel, flags.use_bovw)
    if stage2_cache is not None and key in stage2_cache:
        det2, rep2 = stage2_cache[key]
        metrics = evaluate(det2, corpus, eta)
        rep2 = replace(rep2, rows=[dict(r) for r in rep2.rows], final=metrics, meta={**rep2.meta, "flags": flags.__dict__.copy()})
        rep2.rows[-1].update(
            acc_base=metrics["acc_base"], acc_novel=metrics["acc_novel"], miscls_novel_to_base=metrics["miscls_novel_to_base"]
        )
    else:
        det2, rep2 = finetune_novel(copy.deepcopy(det1), teacher, corpus, cfg, flags, progress=progress)
        if stage2_cache is not None:
            stage2_cache[key] = (det2, rep2)
    return RunResult(name, rep2.final, [rep1, rep2])


def run_ablation(teacher: PABoVW, corpus: SyntheticCorpus, cfg: Config, rows=ABLATION, progress=None) -> dict[str, RunResult]:
    stage1: dict = {}
    stage2: dict = {}
    return {
        name: run_detector(teacher, corpus, cfg, b, n, f, name, stage1, progress, stage2) for name, b, n, f in rows
    }


def run_full(cfg: Config, progress=None) -> tuple[PABoVW, RunResult]:
    """Teacher pretraining plus both detector stages with the flags in ``cfg.distill``."""
    corpus = corpus_from_config(cfg)
    teacher, rep0 = pretrain_bovw(corpus, cfg, progress)
    d = cfg.distill
    res = run_detector(teacher, corpus, cfg, d.base, d.novel, d.fuse, "config", progress=progress)
    res.reports.insert(0, rep0)
    return teacher, res
