import csv
import hashlib
import inspect
import json
import re

import numpy as np
import pytest

from bovw_distill import bovw, cli, distill, io, ppc
from bovw_distill.config import load_config
from bovw_distill.gradsuite import REGISTRY, run_suite
from bovw_distill.harness.evaluate import metrics_from_predictions
from bovw_distill.harness.training import build_detector, corpus_from_config
from bovw_distill.numerics import Tensor, functional, no_grad, softmax

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def ini(tmp_path_factory):
    from conftest import TINY_INI

    p = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    p.write_text(TINY_INI)
    return p


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(ini, tmp_path_factory):
    """train-bovw, both detector stages and eval into one output tree."""
    out = tmp_path_factory.mktemp("run")
    printed = {}
    for name, argv in [
        ("bovw", ["train-bovw"]),
        ("detector_base", ["train-detector", "--stage", "base"]),
        ("detector_novel", ["train-detector", "--stage", "novel"]),
        ("eval", ["eval"]),
    ]:
        cap = _Capture()
        with cap:
            assert cli.main([*argv, "--config", str(ini), "--out", str(out)]) == 0
        printed[name] = cap.text
    return out, printed


class _Capture:
    """Collect stdout without the function-scoped capsys fixture."""

    def __enter__(self):
        import contextlib
        import io as _io

        self.buf = _io.StringIO()
        self._cm = contextlib.redirect_stdout(self.buf)
        self._cm.__enter__()
        return self

    def __exit__(self, *exc):
        self._cm.__exit__(*exc)
        self.text = self.buf.getvalue()


def _hash_line(text):
    return re.search(r"config hash: ([0-9a-f]{64})", text).group(1)


def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- artifact tree ------------------------------------------------------------------


def test_pipeline_writes_expected_artifacts(pipeline):
    out, _ = pipeline
    for rel in [
        "bovw/vocabulary.pbvw",
        "bovw/teacher.ckpt",
        "bovw/report.csv",
        "bovw/report.png",
        "detector_base/detector.ckpt",
        "detector_base/report.csv",
        "detector_base/report.png",
        "detector_novel/metrics.csv",
        "detector_novel/metrics_confusion.png",
        "eval/metrics.csv",
        "eval/metrics_confusion.png",
    ]:
        assert (out / rel).is_file(), rel


def test_figures_are_png_next_to_csv(pipeline):
    out, _ = pipeline
    pngs = sorted(out.rglob("*.png"))
    assert len(pngs) >= 5
    for p in pngs:
        assert p.read_bytes()[:8] == PNG_MAGIC
        assert any(p.parent.glob("*.csv"))


def test_printed_hash_matches_written_config(pipeline):
    out, printed = pipeline
    for cmd, text in printed.items():
        recomputed = load_config(out / cmd / "config.resolved.ini").hash()
        assert _hash_line(text) == recomputed


def test_manifest_lists_every_artifact_with_its_hash(pipeline):
    out, _ = pipeline
    manifest = json.loads((out / "manifest.json").read_text())
    arts = manifest["artifacts"]
    assert set(manifest["config_hashes"]) == {"bovw", "detector_base", "detector_novel", "eval"}
    files = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    assert set(arts) == files
    for rel, digest in arts.items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest


def test_report_columns(pipeline):
    out, _ = pipeline
    header = (out / "detector_base" / "report.csv").read_text().splitlines()[0]
    assert header == "epoch,l_det,l_distill,l_cls_bovw,l_ppc,l_cls,l_decov,acc_base,acc_novel,miscls_novel_to_base"


def test_commands_are_idempotent(pipeline, ini, tmp_path):
    out, _ = pipeline
    with _Capture():
        assert cli.main(["train-bovw", "--config", str(ini), "--out", str(tmp_path)]) == 0
    for name in ("report.csv", "teacher.ckpt", "vocabulary.pbvw"):
        assert (tmp_path / "bovw" / name).read_bytes() == (out / "bovw" / name).read_bytes()


# -- errors ---------------------------------------------------------------------------------


def test_missing_teacher_is_usage_error(ini, tmp_path, capsys):
    code, _, err = _run(capsys, "train-detector", "--config", ini, "--out", tmp_path, "--stage", "base")
    assert code == 2 and "train-bovw" in err


def test_missing_stage1_checkpoint_is_usage_error(pipeline, ini, tmp_path, capsys):
    out, _ = pipeline
    code, _, err = _run(
        capsys, "train-detector", "--config", ini, "--out", tmp_path, "--stage", "novel",
        "--teacher", out / "bovw" / "teacher.ckpt",
    )
    assert code == 2 and "base stage" in err


def test_unknown_override_key(ini, tmp_path, capsys):
    code, _, err = _run(capsys, "train-bovw", "--config", ini, "--out", tmp_path, "--override", "bovw.KK=3")
    assert code == 2 and "bovw.KK" in err


def test_sweep_rejects_bad_path_before_training(ini, tmp_path, capsys):
    code, _, err = _run(capsys, "sweep", "--config", ini, "--out", tmp_path, "--param", "bovw.nope", "--values", "1,2")
    assert code == 2 and not (tmp_path / "sweep").exists()


# -- sweep ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def eta_sweep(ini, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    with _Capture():
        assert cli.main(["sweep", "--config", str(ini), "--out", str(out), "--param", "distill.eta", "--values", "0,1"]) == 0
    return out, _csv_rows(out / "sweep" / "sweep.csv")


def test_sweep_has_one_row_per_value(eta_sweep):
    out, rows = eta_sweep
    assert [r["value"] for r in rows] == ["0", "1"]
    assert (out / "sweep" / "sweep.png").read_bytes()[:8] == PNG_MAGIC


def test_sweep_rows_match_single_runs(eta_sweep, ini, tmp_path):
    _, rows = eta_sweep
    for row in rows:
        out = tmp_path / row["value"]
        over = ["--override", f"distill.eta={row['value']}"]
        with _Capture() as cap:
            assert cli.main(["train-bovw", "--config", str(ini), "--out", str(out), *over]) == 0
            assert cli.main(["train-detector", "--config", str(ini), "--out", str(out), "--stage", "base", *over]) == 0
            assert cli.main(["train-detector", "--config", str(ini), "--out", str(out), "--stage", "novel", *over]) == 0
        metrics = {r["class"]: r["accuracy"] for r in _csv_rows(out / "detector_novel" / "metrics.csv")}
        assert metrics["novel"] == row["acc_novel"] and metrics["base"] == row["acc_base"]
        assert metrics["miscls_novel_to_base"] == row["miscls_novel_to_base"]
        assert _hash_line(cap.text) == row["config_hash"]


def test_eta_endpoints_bracket_the_two_scores(eta_sweep, pipeline, ini, capsys):
    """eta=1 is the detector head alone and eta=0 the BoVW head alone; eta never changes training."""
    out, _ = pipeline
    _, rows = eta_sweep
    cfg = load_config(ini)
    corpus = corpus_from_config(cfg)
    teacher = cli._load_teacher(out / "bovw" / "teacher.ckpt", cfg, corpus.num_base)
    det = build_detector(cfg, teacher, corpus.num_classes)
    det.load_state_dict(io.load_checkpoint(out / "detector_novel" / "detector.ckpt"))
    det.eval()
    labels, p_orig, p_prime = [], [], []
    with no_grad():
        for d in corpus.test:
            roi = det.roi_features(det.feature_maps(d.image[None]), d.boxes, np.zeros(len(d.boxes), np.intp))
            p_orig.append(softmax(det.heads(roi)[0], axis=-1).data.argmax(1))
            p_prime.append(softmax(det.bovw_head.logits(det.bovw_maps(roi)), axis=-1).data.argmax(1))
            labels.append(d.labels)
    labels = np.concatenate(labels)
    heads = {"1": np.concatenate(p_orig), "0": np.concatenate(p_prime)}
    for row in rows:
        code, _, _ = _run(capsys, "eval", "--config", ini, "--out", out, "--eta", row["value"])
        assert code == 0
        got = {r["class"]: r["accuracy"] for r in _csv_rows(out / "eval" / "metrics.csv")}
        assert got["novel"] == row["acc_novel"] and got["miscls_novel_to_base"] == row["miscls_novel_to_base"]
        ref = metrics_from_predictions(labels, heads[row["value"]], corpus.num_base, corpus.num_classes)
        assert repr(ref["acc_novel"]) == row["acc_novel"]
        assert str(ref["miscls_novel_to_base"]) == row["miscls_novel_to_base"]


def test_parallel_sweep_matches_sequential(ini, tmp_path, monkeypatch):
    monkeypatch.setenv("BOVW_DISTILL_THREADS", "2")
    assert cli.worker_cap(8) == 2
    outs = {}
    for jobs in ("1", "2"):
        out = tmp_path / jobs
        with _Capture():
            assert cli.main(["sweep", "--config", str(ini), "--out", str(out), "--param", "detector.hidden", "--values", "8,16", "--jobs", jobs]) == 0
        outs[jobs] = (out / "sweep" / "sweep.csv").read_bytes()
    assert outs["1"] == outs["2"]


def test_worker_cap_defaults(monkeypatch):
    monkeypatch.setenv("BOVW_DISTILL_THREADS", "1")
    assert cli.worker_cap(4) == 1
    monkeypatch.delenv("BOVW_DISTILL_THREADS")
    assert cli.worker_cap(1) == 1


# -- gradcheck ---------------------------------------------------------------------------------


def test_gradcheck_command_passes(capsys):
    code, text, _ = _run(capsys, "gradcheck", "--instances", "2", "--only", "exp", "conv2d", "distill_loss")
    assert code == 0 and "3/3 cases passed" in text


def test_corrupted_gradient_is_named(capsys, monkeypatch):
    def bad_exp(self):
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (1.5 * g * out,))

    monkeypatch.setattr(Tensor, "exp", bad_exp)
    code, text, _ = _run(capsys, "gradcheck", "--instances", "2", "--only", "exp", "mul")
    assert code == 1
    assert "failed: exp" in text and "mul" not in text.split("failed:")[1]


def test_unknown_gradcheck_case(capsys):
    code, _, err = _run(capsys, "gradcheck", "--only", "nope")
    assert code == 2 and "nope" in err


# functions that are public but not differentiable (geometry, I/O, sampling, metrics)
NOT_DIFFERENTIABLE = {
    "interp_matrix",
    "save_vocabulary",
    "load_vocabulary",
    "mean_abs_word_correlation",
    "projection_head",
    "momentum_update",
    "cell_centers",
    "bin_diagonal",
    "match_cells",
    "render_view",
    "generate_views",
    "views_from_geometry",
    "stack_views",
    "pair_index",
    "crop_box",
    "teacher_encode",
    "ppc_loss_from_features",  # covered through ppc_loss
}


def test_every_differentiable_public_op_has_a_case():
    public = set()
    for mod in (functional, bovw, distill, ppc):
        public |= {
            n for n, f in inspect.getmembers(mod, inspect.isfunction)
            if f.__module__ == mod.__name__ and not n.startswith("_")
        }
    missing = sorted(public - NOT_DIFFERENTIABLE - set(REGISTRY))
    assert not missing, f"no gradcheck case for {missing}"
    tensor_methods = {"exp", "log", "sqrt", "abs", "relu", "clamp_min", "__neg__", "__pow__", "sum", "mean", "reshape", "transpose", "__getitem__", "__add__", "__sub__", "__mul__", "__truediv__", "__matmul__"}
    assert all(hasattr(Tensor, m) for m in tensor_methods)


def test_full_suite_passes_quickly():
    reports = run_suite(instances=2)
    assert len(reports) == len(REGISTRY)
    assert all(r.passed for r in reports), [r.name for r in reports if not r.passed]
