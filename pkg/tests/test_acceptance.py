"""Release criteria at desk scale; each test records one PASS/FAIL line for the summary."""

import time

import numpy as np
import pytest

import oracles
from bovw_distill import cli, io
from bovw_distill.bovw import (
    BovwEncoder,
    ClassificationHead,
    Vocabulary,
    bovw_total_loss,
    decov_loss,
    encode_similarity_map,
    mean_abs_word_correlation,
    similarity_map,
)
from bovw_distill.config import default_config
from bovw_distill.distill import detector_total_loss, distill_loss, fuse_scores
from bovw_distill.gradsuite import run_suite
from bovw_distill.harness.pipeline import ABLATION, run_ablation
from bovw_distill.harness.training import (
    StageFlags,
    aug_config,
    corpus_from_config,
    detector_losses,
    make_proposals,
    pretrain_bovw,
    train_base_with_distill,
)
from bovw_distill.numerics import AdamW, Tensor, bilinear_resize, conv2d, no_grad, softmax
from bovw_distill.ppc import PixelPropagation, generate_views, ppc_loss_from_features, propagate
from bovw_distill.rng import rng_for

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


# -- shared expensive fixtures -------------------------------------------------------------


@pytest.fixture(scope="session")
def teachers():
    """Default-config teacher per seed, with its corpus, report and wall time."""
    out = {}
    for seed in SEEDS:
        cfg = default_config(seed)
        corpus = corpus_from_config(cfg)
        t0 = time.perf_counter()
        teacher, report = pretrain_bovw(corpus, cfg)
        out[seed] = dict(cfg=cfg, corpus=corpus, teacher=teacher, report=report, seconds=time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def ablation(teachers):
    """The four cumulative rows for every seed, plus teacher hashes around detector training."""
    out = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        t = teachers[seed]
        before = io.state_hash(t["teacher"].state_dict())
        rows = run_ablation(t["teacher"], t["corpus"], t["cfg"])
        out[seed] = dict(rows=rows, hash_before=before, hash_after=io.state_hash(t["teacher"].state_dict()))
    detector_seconds = time.perf_counter() - t0
    teacher_seconds = sum(teachers[s]["seconds"] for s in SEEDS)
    return out, teacher_seconds + detector_seconds


def _means(ablation_rows):
    names = [name for name, *_ in ABLATION]
    acc = {n: float(np.mean([ablation_rows[s]["rows"][n].acc_novel for s in SEEDS])) for n in names}
    mis = {n: float(np.mean([ablation_rows[s]["rows"][n].miscls for s in SEEDS])) for n in names}
    return names, acc, mis


# -- 1. gradients --------------------------------------------------------------------------------


def test_c1_gradient_suite(record):
    t0 = time.perf_counter()
    reports = run_suite(instances=10, h=1e-6, tol=1e-4)
    seconds = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = not failed and seconds <= 60.0
    record(1, ok, f"{len(reports)} cases x 10 instances, worst {worst.name} rel {worst.max_rel_error:.2e}, {seconds:.1f}s, failed {failed}")
    assert ok


# -- 2. oracle equivalence ------------------------------------------------------------------------


def _oracle_cases():
    def enc(r):
        c, k, d, hw = r.integers(1, 4), r.integers(1, 5), r.integers(1, 5), r.integers(1, 4)
        e = BovwEncoder(int(c), int(k), int(d), r)
        e.projection.bias.data[:] = r.standard_normal(int(d))
        x = r.standard_normal((int(c), int(hw), int(hw)))
        got = encode_similarity_map(Tensor(x), e).data
        ref = oracles.encode_similarity_map(x, e.projection.weight.data[:, :, 0, 0], e.projection.bias.data, e.vocabulary.words.data)
        return np.max(np.abs(got - ref))

    def dec(r):
        w = r.standard_normal((int(r.integers(1, 7)), int(r.integers(1, 7))))
        return abs(float(decov_loss(w).data) - oracles.decov_loss(w))

    def dis(r):
        shape = tuple(int(v) for v in r.integers(1, 4, 4))
        p, q = r.uniform(-1, 1, shape), r.uniform(-1, 1, shape)
        return abs(float(distill_loss(p, Tensor(q)).data) - oracles.distill_loss(p, q))

    def prop(r):
        d = int(r.integers(1, 5))
        mod = PixelPropagation(d, r)
        mod.eval()
        mod.transform[1].running_mean[:] = r.standard_normal(d)
        x = r.standard_normal((d, int(r.integers(1, 4)), int(r.integers(1, 4))))
        t = mod.transform(Tensor(x[None])).data[0]
        return np.max(np.abs(propagate(Tensor(x), mod).data - oracles.propagate(x, t)))

    def ppc(r):
        d, hw = int(r.integers(2, 5)), int(r.integers(1, 3))
        q, t = r.standard_normal((2, d, hw, hw)), r.standard_normal((2, d, hw, hw))
        n = hw * hw
        corr = np.array([[i, j] for i in range(n) for j in range(n) if r.random() < 0.6] or [[0, 0]])
        loss, _ = ppc_loss_from_features(Tensor(q), Tensor(t), [(0, 1, corr)])
        cells = lambda a: a.reshape(d, -1).T  # noqa: E731
        ref = oracles.ppc_loss(cells(q[0]), cells(t[0]), cells(q[1]), cells(t[1]), [tuple(c) for c in corr])
        return abs(float(loss.data) - ref)

    def conv(r):
        k = int(r.choice([1, 3]))
        c, o, s, size = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 3)), int(r.integers(3, 7))
        x, w, b = r.standard_normal((1, c, size, size)), r.standard_normal((o, c, k, k)), r.standard_normal(o)
        edge = bool(r.integers(0, 2))
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s, padding=k // 2, pad_mode="edge" if edge else "zeros").data
        return np.max(np.abs(got - oracles.conv2d(x, w, b, s, k // 2, edge=edge)))

    def resize(r):
        img = r.standard_normal((int(r.integers(1, 3)), int(r.integers(1, 8)), int(r.integers(1, 8))))
        oh, ow = int(r.integers(1, 9)), int(r.integers(1, 9))
        return np.max(np.abs(bilinear_resize(Tensor(img), oh, ow).data - oracles.bilinear_resize(img, oh, ow)))

    return {
        "encode_similarity_map": enc,
        "decov_loss": dec,
        "distill_loss": dis,
        "propagate": prop,
        "ppc_loss": ppc,
        "conv2d": conv,
        "bilinear_resize": resize,
    }


def test_c2_oracle_equivalence(record):
    worst = {}
    for name, case in _oracle_cases().items():
        worst[name] = max(float(case(np.random.default_rng([7, i, len(name)]))) for i in range(100))
    bad = [n for n, e in worst.items() if not e <= 1e-9]
    record(2, not bad, "100 instances each, max error " + ", ".join(f"{n} {e:.1e}" for n, e in worst.items()))
    assert not bad


# -- 3. invariants ------------------------------------------------------------------------------


def test_c3_invariants(record, tiny_cfg):
    r = np.random.default_rng(3)
    problems = []

    # PPC range and exact zero at alignment
    for i in range(100):
        q, t = r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3, 2, 2)) * r.uniform(1e-3, 1e3)
        corr = np.array([[a, b] for a in range(4) for b in range(4) if r.random() < 0.5] or [[0, 0]])
        v = float(ppc_loss_from_features(Tensor(q), Tensor(t), [(0, 1, corr)])[0].data)
        if not 0.0 <= v <= 4.0:
            problems.append(f"ppc range {v}")
        # exact alignment: power-of-two scales keep the targets exactly parallel in floating point
        perm = r.permutation(4)
        aligned = np.empty_like(q)
        for a, b in enumerate(perm):
            aligned[1, :, b // 2, b % 2] = q[0, :, a // 2, a % 2] * 2.0 ** r.integers(-10, 11)
            aligned[0, :, a // 2, a % 2] = q[1, :, b // 2, b % 2] * 2.0 ** r.integers(-10, 11)
        z = float(ppc_loss_from_features(Tensor(q), Tensor(aligned), [(0, 1, np.stack([np.arange(4), perm], 1))])[0].data)
        if z != 0.0:
            problems.append(f"ppc alignment {z}")

    # similarity maps under positive scaling
    scale_err = 0.0
    for i in range(100):
        words, pixels = r.standard_normal((5, 4)), r.standard_normal((2, 4, 3, 3))
        a, b = 10 ** r.uniform(-3, 3), 10 ** r.uniform(-3, 3)
        d = similarity_map(Tensor(a * words), Tensor(b * pixels)).data - similarity_map(Tensor(words), Tensor(pixels)).data
        scale_err = max(scale_err, float(np.max(np.abs(d))))
    if scale_err > 1e-9:
        problems.append(f"scale {scale_err}")

    # fused scores are probability vectors
    for i in range(100):
        head = ClassificationHead(3, 5, r)
        p = fuse_scores(softmax(Tensor(r.standard_normal((4, 5)) * 5), axis=-1), Tensor(r.uniform(-1, 1, (4, 3, 2, 2))), head, r.uniform()).p.data
        if np.any(p < 0) or np.max(np.abs(p.sum(1) - 1)) > 1e-12:
            problems.append("fused scores")

    # composed objectives equal the sums of their logged parts, on real model outputs
    rel = 0.0
    corpus = corpus_from_config(tiny_cfg)
    teacher, _ = pretrain_bovw(corpus, tiny_cfg)
    det, _ = train_base_with_distill(teacher, corpus, tiny_cfg, StageFlags(distill=True, fuse=True))
    for i in range(20):
        idx = r.choice(len(corpus.iconic_images), 4, replace=False)
        pairs = [generate_views(corpus.iconic_images[j], rng_for(0, "acc", i, int(j)), aug_config(tiny_cfg), grid=2) for j in idx]
        teacher.train()
        with no_grad():
            out = teacher.losses(pairs, corpus.iconic_labels[idx])
        parts = [float(out[k].data) for k in ("l_ppc", "l_cls", "l_decov")]
        expect = float(bovw_total_loss(*parts))
        rel = max(rel, abs(float(out["total"].data) - expect) / max(abs(expect), 1e-300))
        imgs = corpus.det_base[i % len(corpus.det_base) :][:2]
        with no_grad():
            o = detector_losses(det, teacher, imgs, make_proposals(imgs, rng_for(0, "acc-p", i), tiny_cfg), StageFlags(distill=True, fuse=True))
        parts = [float(o[k].data) for k in ("l_det", "l_distill", "l_cls_bovw")]
        expect = float(detector_total_loss(*parts))
        rel = max(rel, abs(float(o["total"].data) - expect) / max(abs(expect), 1e-300))
    teacher.eval()
    if rel > 1e-15:
        problems.append(f"sum of parts rel {rel}")

    record(3, not problems, f"ppc range/alignment, scale err {scale_err:.1e}, fusion simplex, sum-of-parts rel {rel:.1e}; {problems[:3]}")
    assert not problems


# -- 4. DeCov alone --------------------------------------------------------------------------------


def test_c4_decov_efficacy(record):
    t0 = time.perf_counter()
    vocab = Vocabulary(16, 32, rng_for(0, "decov-check"))
    before = mean_abs_word_correlation(vocab.words)
    opt = AdamW([("words", vocab.words)], lr=0.01, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        decov_loss(vocab).backward()
        opt.step()
    after = mean_abs_word_correlation(vocab.words)
    seconds = time.perf_counter() - t0
    reduction = 1.0 - after / before
    ok = reduction >= 0.5 and seconds <= 10.0
    record(4, ok, f"mean |corr| {before:.4f} -> {after:.2e} ({100 * reduction:.1f}% reduction), {seconds:.2f}s")
    assert ok


# -- 5. teacher accuracy ----------------------------------------------------------------------------


def test_c5_teacher_accuracy(record, teachers):
    t = teachers[0]
    cfg, rep = t["cfg"], t["report"]
    corpus = t["corpus"]
    setup = (corpus.num_base, len(corpus.iconic_images) // corpus.num_base, corpus.image_size, cfg.bovw.K)
    acc = rep.final["train_acc"]
    ok = setup == (6, 200, 64, 32) and cfg.bovw.epochs <= 30 and acc >= 0.95 and t["seconds"] <= 300
    record(5, ok, f"train accuracy {acc:.4f} after {cfg.bovw.epochs} epochs, {t['seconds']:.0f}s")
    assert ok


# -- 6. and 7. ablation ------------------------------------------------------------------------------


def test_c6_full_method_beats_baseline(record, ablation):
    rows, seconds = ablation
    names, acc, mis = _means(rows)
    ok = mis["full"] < mis["baseline"] and acc["full"] > acc["baseline"] and seconds <= 900
    record(
        6,
        ok,
        f"3-seed mean novel acc baseline {acc['baseline']:.4f} vs full {acc['full']:.4f}; "
        f"novel->base {mis['baseline']:.2f} vs {mis['full']:.2f}; {seconds:.0f}s",
    )
    assert ok


def test_c7_ablation_is_monotone(record, ablation):
    rows, _ = ablation
    names, acc, _ = _means(rows)
    steps = [100 * (acc[b] - acc[a]) for a, b in zip(names, names[1:])]
    inversions = [s for s in steps if s < 0]
    ok = len(inversions) == 0 or (len(inversions) == 1 and inversions[0] >= -0.5)
    record(7, ok, "novel acc " + " -> ".join(f"{n} {100 * acc[n]:.2f}" for n in names))
    assert ok


# -- 8. determinism ------------------------------------------------------------------------------


def test_c8_determinism(record, teachers, ablation, tiny_ini, tmp_path, capsys):
    csvs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        for argv in (["train-bovw"], ["train-detector", "--stage", "base"], ["train-detector", "--stage", "novel"]):
            assert cli.main([*argv, "--config", str(tiny_ini), "--out", str(out)]) == 0
        csvs[run] = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))}
    capsys.readouterr()
    same_csv = len(csvs["a"]) >= 4 and csvs["a"] == csvs["b"]

    teacher = teachers[0]["teacher"]
    io.save_vocabulary(tmp_path / "v.pbvw", teacher.vocabulary.words.data)
    vocab_ok = io.load_vocabulary(tmp_path / "v.pbvw").tobytes() == teacher.vocabulary.words.data.tobytes()
    state = teacher.state_dict()
    io.save_checkpoint(tmp_path / "t.ckpt", state)
    back = io.load_checkpoint(tmp_path / "t.ckpt")
    ckpt_ok = list(back) == list(state) and all(back[k].tobytes() == np.asarray(state[k], np.float64).tobytes() for k in state)

    rows, _ = ablation
    hash_ok = all(rows[s]["hash_before"] == rows[s]["hash_after"] for s in SEEDS)
    ok = same_csv and vocab_ok and ckpt_ok and hash_ok
    record(8, ok, f"csv identical {same_csv} ({len(csvs['a'])} files), vocabulary {vocab_ok}, checkpoint {ckpt_ok}, teacher hash {hash_ok}")
    assert ok
