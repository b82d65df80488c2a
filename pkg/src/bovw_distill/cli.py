"""Command-line entry points.

    bovw-distill train-bovw     --config run.ini --out runs/a
    bovw-distill train-detector --config run.ini --out runs/a --stage base --distill on
    bovw-distill train-detector --config run.ini --out runs/a --stage novel --distill on --fuse on
    bovw-distill eval           --config run.ini --out runs/a
    bovw-distill sweep          --config run.ini --out runs/k --param bovw.K --values 8,16,32
    bovw-distill gradcheck

Every command writes its artifacts below ``--out``, records them with their
sha256 in ``manifest.json`` and prints the resolved-config hash.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import io, plotting
from .config import Config, ConfigError, load_config, parse_config
from .rng import rng_for
from .teacher import PABoVW

log = logging.getLogger("bovw_distill")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SWEEP_COLUMNS = ("param", "value", "config_hash", "teacher_acc", "acc_base", "acc_novel", "miscls_novel_to_base")


# -- artifact bookkeeping --------------------------------------------------------


class Run:
    """Output tree for one command: resolved config, artifacts and manifest."""

    def __init__(self, out: Path, command: str, cfg: Config):
        self.out, self.command, self.cfg = Path(out), command, cfg
        self.dir = self.out / command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []
        self.add_text("config.resolved.ini", cfg.to_text())
        print(f"config hash: {cfg.hash()}")

    def path(self, name: str) -> Path:
        return self.dir / name

    def add(self, path: Path) -> Path:
        self.artifacts.append(Path(path))
        return Path(path)

    def add_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return self.add(p)

    def finish(self) -> None:
        manifest_path = self.out / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        # keep entries from other commands sharing this out dir; replace our own
        entries = {k: v for k, v in manifest.get("artifacts", {}).items() if not k.startswith(self.command + "/")}
        for p in self.artifacts:
            entries[p.relative_to(self.out).as_posix()] = io.file_hash(p)
        manifest["artifacts"] = dict(sorted(entries.items()))
        manifest.setdefault("config_hashes", {})[self.command] = self.cfg.hash()
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for p in self.artifacts:
            log.info("wrote %s", p)


def _load(args) -> Config:
    return load_config(args.config, args.override or ())


def _on_off(value: str | None) -> bool | None:
    if value is None:
        return None
    return value == "on"


def _write_report(run: Run, report, stem: str) -> None:
    run.add_text(f"{stem}.csv", report.to_csv())
    run.add(plotting.plot_report(report, run.path(f"{stem}.png"), title=f"{stem} (seed {report.seed})"))


def _write_metrics(run: Run, metrics: dict, num_base: int, stem: str) -> None:
    rows = [("class", "accuracy")] + [(str(i), repr(a)) for i, a in enumerate(metrics["per_class_acc"])]
    rows += [("base", repr(metrics["acc_base"])), ("novel", repr(metrics["acc_novel"]))]
    rows += [("miscls_novel_to_base", str(metrics["miscls_novel_to_base"]))]
    run.add_text(f"{stem}.csv", "".join(",".join(r) + "\n" for r in rows))
    run.add(plotting.plot_confusion(metrics["confusion"], num_base, run.path(f"{stem}_confusion.png"), stem))


def _load_teacher(path: Path, cfg: Config, num_base: int) -> PABoVW:
    from .harness.training import MissingCheckpointError, teacher_spec

    if not path.exists():
        raise MissingCheckpointError(f"teacher checkpoint {path} does not exist; run train-bovw first")
    teacher = PABoVW(teacher_spec(cfg, num_base), rng_for(cfg.seed, "teacher", "init"))
    teacher.load_state_dict(io.load_checkpoint(path))
    teacher.eval()
    return teacher


# -- commands ---------------------------------------------------------------------


def cmd_train_bovw(args) -> int:
    from .harness.training import corpus_from_config, pretrain_bovw

    cfg = _load(args)
    run = Run(args.out, "bovw", cfg)
    corpus = corpus_from_config(cfg)
    teacher, report = pretrain_bovw(corpus, cfg, progress=log.info)
    io.save_vocabulary(run.path("vocabulary.pbvw"), teacher.vocabulary.words.data)
    run.add(run.path("vocabulary.pbvw"))
    io.save_checkpoint(run.path("teacher.ckpt"), teacher.state_dict())
    run.add(run.path("teacher.ckpt"))
    _write_report(run, report, "report")
    run.finish()
    print(f"teacher train accuracy: {report.final['train_acc']:.4f}")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    from .harness.training import StageFlags, corpus_from_config, finetune_novel, train_base_with_distill

    cfg = _load(args)
    distill, fuse = _on_off(args.distill), _on_off(args.fuse)
    # command-line flags become part of the resolved (and hashed) config
    if args.stage == "base" and distill is not None:
        cfg.distill.base = distill
    if args.stage == "novel":
        if distill is not None:
            cfg.distill.novel = distill
        if fuse is not None:
            cfg.distill.fuse = fuse
    if args.distill_target:
        cfg.set("distill.target", args.distill_target)
    out = Path(args.out)
    teacher_path = Path(args.teacher) if args.teacher else out / "bovw" / "teacher.ckpt"
    base_path = Path(args.base_checkpoint) if args.base_checkpoint else out / "detector_base" / "detector.ckpt"
    corpus = corpus_from_config(cfg)
    teacher = _load_teacher(teacher_path, cfg, corpus.num_base)
    target = cfg.distill.target
    if args.stage == "base":
        run = Run(out, "detector_base", cfg)
        detector, report = train_base_with_distill(
            teacher, corpus, cfg, StageFlags(distill=cfg.distill.base, target=target), progress=log.info
        )
    else:
        run = Run(out, "detector_novel", cfg)
        flags = StageFlags(distill=cfg.distill.novel, fuse=cfg.distill.fuse, target=target)
        detector, report = finetune_novel(str(base_path), teacher, corpus, cfg, flags, progress=log.info)
        _write_metrics(run, report.final, corpus.num_base, "metrics")
        print(
            f"novel accuracy {report.final['acc_novel']:.4f}, base accuracy {report.final['acc_base']:.4f}, "
            f"novel->base {report.final['miscls_novel_to_base']}"
        )
    io.save_checkpoint(run.path("detector.ckpt"), detector.state_dict())
    run.add(run.path("detector.ckpt"))
    _write_report(run, report, "report")
    run.finish()
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness.evaluate import evaluate
    from .harness.training import corpus_from_config, load_detector_checkpoint

    cfg = _load(args)
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "detector_novel" / "detector.ckpt"
    corpus = corpus_from_config(cfg)
    teacher = _load_teacher(Path(args.teacher) if args.teacher else out / "bovw" / "teacher.ckpt", cfg, corpus.num_base)
    detector = load_detector_checkpoint(ckpt, cfg, teacher, corpus.num_classes)
    eta = args.eta if args.eta is not None else (cfg.distill.eta if cfg.distill.fuse else None)
    run = Run(out, "eval", cfg)
    metrics = evaluate(detector, corpus, eta)
    _write_metrics(run, metrics, corpus.num_base, "metrics")
    run.finish()
    print(
        f"novel accuracy {metrics['acc_novel']:.4f}, base accuracy {metrics['acc_base']:.4f}, "
        f"novel->base {metrics['miscls_novel_to_base']}"
    )
    return EXIT_OK


def sweep_one(cfg_text: str, param: str, value: str) -> dict:
    """One full run (teacher + both stages) with ``param`` set to ``value``."""
    from .harness.pipeline import run_full

    cfg = parse_config(cfg_text, [f"{param}={value}"])
    teacher, res = run_full(cfg)
    m = res.metrics
    return {
        "param": param,
        "value": value,
        "config_hash": cfg.hash(),
        "teacher_acc": res.reports[0].final["train_acc"],
        "acc_base": m["acc_base"],
        "acc_novel": m["acc_novel"],
        "miscls_novel_to_base": m["miscls_novel_to_base"],
    }


def worker_cap(requested: int) -> int:
    env = os.environ.get("BOVW_DISTILL_THREADS")
    cap = max(1, int(env)) if env else (os.cpu_count() or 1)
    return max(1, min(requested, cap))


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one value")
    for v in values:
        cfg.replace(**{args.param: v})  # validates path and value before any training
    run = Run(args.out, "sweep", cfg)
    text = cfg.to_text()
    jobs = worker_cap(args.jobs)
    if jobs == 1:
        rows = []
        for v in values:
            log.info("sweep %s=%s", args.param, v)
            rows.append(sweep_one(text, args.param, v))
    else:
        # every run uses the same root seed, so parallel and sequential sweeps agree
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(sweep_one, [text] * len(values), [args.param] * len(values), values))
    p = run.path("sweep.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in SWEEP_COLUMNS])
    run.add(p)
    run.add(plotting.plot_sweep(args.param, values, rows, run.path("sweep.png")))
    run.finish()
    for r in rows:
        print(f"{args.param}={r['value']}: novel {r['acc_novel']:.4f}, base {r['acc_base']:.4f}, novel->base {r['miscls_novel_to_base']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    reports = run_suite(args.only or None, instances=args.instances, seed=args.seed, progress=print)
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} cases passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="sectioned key = value file")
    p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE", help="repeatable; wins over the file")
    p.add_argument("--out", required=True, help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bovw-distill", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-bovw", help="pretrain the PA-BoVW teacher")
    _common(p)
    p.set_defaults(func=cmd_train_bovw)

    p = sub.add_parser("train-detector", help="run one detector stage")
    _common(p)
    p.add_argument("--stage", choices=("base", "novel"), required=True)
    p.add_argument("--distill", choices=("on", "off"))
    p.add_argument("--fuse", choices=("on", "off"))
    p.add_argument("--distill-target", choices=("bovw", "features"))
    p.add_argument("--teacher", help="teacher checkpoint (default OUT/bovw/teacher.ckpt)")
    p.add_argument("--base-checkpoint", help="stage-1 detector (default OUT/detector_base/detector.ckpt)")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("eval", help="classify ground-truth test boxes")
    _common(p)
    p.add_argument("--checkpoint", help="detector checkpoint (default OUT/detector_novel/detector.ckpt)")
    p.add_argument("--teacher", help="teacher checkpoint (default OUT/bovw/teacher.ckpt)")
    p.add_argument("--eta", type=float, help="fusion weight; omit to use the config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="full runs over one config value")
    _common(p)
    p.add_argument("--param", required=True, help="dotted config path, e.g. bovw.K")
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (capped by BOVW_DISTILL_THREADS)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", metavar="CASE")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from .harness.training import MissingCheckpointError, TrainingDivergedError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, MissingCheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
