import copy
import math

import numpy as np
import pytest

from bovw_distill import io
from bovw_distill.harness import training
from bovw_distill.harness.training import (
    MissingCheckpointError,
    StageFlags,
    TrainingDivergedError,
    corpus_from_config,
    detector_losses,
    finetune_novel,
    load_detector_checkpoint,
    make_proposals,
    pretrain_bovw,
    train_base_with_distill,
)
from bovw_distill.numerics import no_grad
from bovw_distill.rng import rng_for

FLAGS_ON = StageFlags(distill=True, fuse=True)


@pytest.fixture(scope="module")
def cfg():
    from conftest import TINY_INI
    from bovw_distill.config import parse_config

    return parse_config(TINY_INI)


@pytest.fixture(scope="module")
def corpus(cfg):
    return corpus_from_config(cfg)


@pytest.fixture(scope="module")
def trained(cfg, corpus):
    teacher, report = pretrain_bovw(corpus, cfg)
    return teacher, report


@pytest.fixture(scope="module")
def stage1(cfg, corpus, trained):
    return train_base_with_distill(trained[0], corpus, cfg, FLAGS_ON)


# -- teacher --------------------------------------------------------------------------


def test_teacher_logs_all_components_every_epoch(cfg, trained):
    _, report = trained
    assert len(report.rows) == cfg.bovw.epochs
    for row in report.rows:
        for key in ("l_ppc", "l_cls", "l_decov", "acc_base"):
            assert math.isfinite(row[key])


def test_teacher_report_is_reproducible(cfg, corpus, trained):
    teacher, report = trained
    again, report2 = pretrain_bovw(corpus, cfg)
    assert report2.to_csv() == report.to_csv()
    assert io.state_hash(again.state_dict()) == io.state_hash(teacher.state_dict())


def test_teacher_checkpoint_round_trip(tmp_path, trained):
    teacher = trained[0]
    io.save_checkpoint(tmp_path / "t.ckpt", teacher.state_dict())
    back = io.load_checkpoint(tmp_path / "t.ckpt")
    assert io.state_hash(back) == io.state_hash(teacher.state_dict())


def test_teacher_divergence_aborts(cfg, corpus):
    bad = cfg.replace(bovw__lr=1e300, bovw__epochs=1)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="bovw"):
        pretrain_bovw(corpus, bad)


# -- stage 1 ------------------------------------------------------------------------------


def test_stage1_reads_only_base_images(stage1):
    _, report = stage1
    seen = report.meta["images_read"]
    assert seen and all(i.startswith("base/") for i in seen)


def test_stage1_is_deterministic(cfg, corpus, trained, stage1):
    det, report = stage1
    det2, report2 = train_base_with_distill(trained[0], corpus, cfg, FLAGS_ON)
    assert report2.to_csv() == report.to_csv()
    assert io.state_hash(det2.state_dict()) == io.state_hash(det.state_dict())


def test_disabled_flags_reduce_objective_to_detection_loss(cfg, corpus, stage1, trained):
    det = stage1[0]
    imgs = corpus.det_base[:3]
    props = make_proposals(imgs, rng_for(0, "t"), cfg)
    with no_grad():
        out = detector_losses(det, trained[0], imgs, props, StageFlags())
    assert float(out["total"].data) == float(out["l_det"].data)
    assert float(out["l_distill"].data) == 0.0 and float(out["l_cls_bovw"].data) == 0.0


def test_identical_teacher_and_student_maps_contribute_nothing(cfg, corpus, stage1, trained, monkeypatch):
    det = stage1[0]
    imgs = corpus.det_base[:2]
    props = make_proposals(imgs, rng_for(0, "t"), cfg)
    with no_grad():
        roi = det.roi_features(det.feature_maps(np.stack([d.image for d in imgs])), props.boxes, props.image_index)
        q = det.bovw_maps(roi).data
    monkeypatch.setattr(training.TeacherCache, "maps", lambda self, t, i, p: training.Tensor(q))
    with no_grad():
        out = detector_losses(det, trained[0], imgs, props, FLAGS_ON)
    assert float(out["l_distill"].data) == 0.0
    assert float(out["total"].data) == float(out["l_det"].data) + float(out["l_cls_bovw"].data)


def test_losses_recompute_from_saved_checkpoint(tmp_path, cfg, corpus, stage1, trained):
    det = stage1[0]
    io.save_checkpoint(tmp_path / "d.ckpt", det.state_dict())
    loaded = load_detector_checkpoint(tmp_path / "d.ckpt", cfg, trained[0], corpus.num_base)
    det.eval()
    loaded.eval()
    imgs = corpus.det_base[:3]
    props = make_proposals(imgs, rng_for(1, "t"), cfg)
    with no_grad():
        a = detector_losses(det, trained[0], imgs, props, FLAGS_ON)
        b = detector_losses(loaded, trained[0], imgs, props, FLAGS_ON)
    for key in ("l_det", "l_distill", "l_cls_bovw", "total"):
        assert abs(float(a[key].data) - float(b[key].data)) <= 1e-9


def test_teacher_cache_matches_fresh_maps(cfg, corpus, stage1, trained):
    imgs = corpus.det_base[:2]
    props = make_proposals(imgs, rng_for(2, "t"), cfg)
    fresh = training.TeacherCache(False).maps(trained[0], imgs, props).data
    cache = training.TeacherCache(True, "h")
    first = cache.maps(trained[0], imgs, props).data
    second = cache.maps(trained[0], imgs, props).data
    assert np.array_equal(first, fresh) and np.array_equal(second, fresh)


def test_batches_merge_trailing_singleton():
    out = training.batches(5, 4)
    assert [b.tolist() for b in out] == [[0, 1, 2, 3, 4]]
    assert [len(b) for b in training.batches(9, 4)] == [4, 5]


# -- stage 2 -------------------------------------------------------------------------------


def test_head_expansion_keeps_base_logits(cfg, corpus, stage1):
    det = copy.deepcopy(stage1[0])
    d = corpus.test[0]
    with no_grad():
        roi = det.roi_features(det.feature_maps(d.image[None]), d.boxes, np.zeros(len(d.boxes), np.intp))
        before = det.heads(roi)[0].data
        det.expand_classes(corpus.num_novel, rng_for(0, "x"))
        after = det.heads(roi)[0].data
    assert after.shape[1] == corpus.num_classes
    assert np.array_equal(after[:, : corpus.num_base], before)


def test_teacher_unchanged_by_both_stages(cfg, corpus, trained, stage1):
    teacher = trained[0]
    before = io.state_hash(teacher.state_dict())
    finetune_novel(copy.deepcopy(stage1[0]), teacher, corpus, cfg, FLAGS_ON)
    assert io.state_hash(teacher.state_dict()) == before


def test_baseline_mode_runs_end_to_end(cfg, corpus, trained):
    det, _ = train_base_with_distill(trained[0], corpus, cfg, StageFlags())
    det, report = finetune_novel(det, trained[0], corpus, cfg, StageFlags())
    assert det.num_classes == corpus.num_classes
    assert 0.0 <= report.final["acc_novel"] <= 1.0 and report.final["miscls_novel_to_base"] >= 0


def test_one_shot_accounting(cfg, trained):
    one = cfg.replace(corpus__k=1)
    corpus = corpus_from_config(one)
    det, _ = train_base_with_distill(trained[0], corpus, one, StageFlags())
    _, report = finetune_novel(det, trained[0], corpus, one, StageFlags())
    novel_ids = {d.image_id for d in corpus.fewshot_novel}
    assert len(novel_ids) == corpus.num_novel
    assert sum(len(d.labels) for d in corpus.fewshot_novel) == corpus.num_novel
    assert novel_ids <= set(report.meta["images_read"])


def test_missing_stage1_checkpoint(tmp_path, cfg, corpus, trained):
    with pytest.raises(MissingCheckpointError, match="base stage"):
        finetune_novel(tmp_path / "absent.ckpt", trained[0], corpus, cfg, StageFlags())


def test_ablation_sharing_matches_independent_runs(cfg, corpus, trained):
    from bovw_distill.harness.pipeline import run_ablation, run_detector

    shared = run_ablation(trained[0], corpus, cfg)
    for name, flags in [("+novel", (True, True, False)), ("full", (True, True, True))]:
        fresh = run_detector(trained[0], corpus, cfg, *flags, name)
        assert np.array_equal(shared[name].metrics["confusion"], fresh.metrics["confusion"])
        assert [r.to_csv() for r in shared[name].reports] == [r.to_csv() for r in fresh.reports]
