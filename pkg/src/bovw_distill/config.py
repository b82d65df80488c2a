"""Sectioned ``key = value`` run configuration.

Precedence is defaults < file < ``--override section.key=value``. Unknown
sections or keys are rejected with the offending line number, and the
resolved configuration hashes to a stable sha256.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class CorpusSection:
    num_base: int = 6
    num_novel: int = 2
    per_class: int = 200
    k: int = 5
    image_size: int = 64
    canvas_size: int = 128
    det_per_class: int = 60
    test_per_class: int = 40
    max_objects: int = 3
    object_min: float = 0.3
    object_max: float = 0.45


@dataclass
class BovwSection:
    K: int = 32
    D: int = 32
    channels: tuple = (16, 32, 32, 64)
    lr: float = 2e-3
    weight_decay: float = 0.05
    epochs: int = 6
    milestones: tuple = (4, 5)
    batch_size: int = 32
    m: float = 0.99
    tau: float = 0.7
    encode_from: str = "backbone"
    scale_min: float = 0.6
    scale_max: float = 1.0
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    blur_prob: float = 0.0
    solarize_prob: float = 0.0


@dataclass
class DetectorSection:
    M: int = 64
    S: int = 4
    channels: tuple = (16, 32, 32)
    hidden: int = 128
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs_base: int = 24
    milestones_base: tuple = (18,)
    epochs_novel: int = 40
    milestones_novel: tuple = (30,)
    finetune_lr_ratio: float = 0.1
    freeze_bn_novel: bool = True
    head_lr_mult_novel: float = 10.0
    backbone_lr_mult_novel: float = 0.1
    bovw_head_lr_mult_novel: float = 1.0
    batch_size: int = 16
    jitter: float = 0.1
    per_gt: int = 2
    per_gt_novel: int = 2
    finetune_set: str = "balanced"
    eval_every: int = 0  # 0 -> evaluate after the last epoch only


@dataclass
class DistillSection:
    eta: float = 0.5
    dprime: int = 0  # 0 -> same as bovw.D
    base: bool = True
    novel: bool = True
    fuse: bool = True
    target: str = "bovw"
    train_vocab_in_distill: bool = False
    cache_teacher: bool = False


SECTIONS = {
    "run": RunSection,
    "corpus": CorpusSection,
    "bovw": BovwSection,
    "detector": DetectorSection,
    "distill": DistillSection,
}

REQUIRED_KEYS = ("run.seed", "bovw.K", "bovw.D")

_CHOICES = {
    "bovw.encode_from": ("backbone", "projection"),
    "detector.finetune_set": ("balanced", "novel_only"),
    "distill.target": ("bovw", "features"),
}


@dataclass
class Config:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    bovw: BovwSection = field(default_factory=BovwSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    distill: DistillSection = field(default_factory=DistillSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def dprime(self) -> int:
        return self.distill.dprime or self.bovw.D

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def get(self, path: str) -> Any:
        section, key = _split(path)
        return getattr(getattr(self, section), key)

    def set(self, path: str, raw: Any) -> None:
        section, key = _split(path)
        sec = getattr(self, section)
        setattr(sec, key, _coerce(path, raw, type(getattr(sec, key))))
        _validate_choice(path, getattr(sec, key))

    def replace(self, **overrides) -> "Config":
        """Copy with ``{"section.key": value}`` style overrides (use ``__`` for the dot)."""
        new = copy.deepcopy(self)
        for path, value in overrides.items():
            new.set(path.replace("__", "."), value)
        return new

    def hash(self) -> str:
        return config_hash(self)

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _split(path: str) -> tuple[str, str]:
    if "." not in path:
        raise ConfigError(f"config path {path!r} must look like section.key")
    section, key = path.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r} in {path!r}")
    if key not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
        raise ConfigError(f"unknown config key {path!r}")
    return section, key


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(path: str, raw, typ):
    if not isinstance(raw, str):
        if typ is tuple:
            return tuple(raw)
        if typ is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, typ):
            return raw
        raw = str(raw)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {typ.__name__}") from None


def _validate_choice(path: str, value) -> None:
    if path in _CHOICES and value not in _CHOICES[path]:
        raise ConfigError(f"{path} must be one of {_CHOICES[path]}, got {value!r}")


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return no
        elif key is not None and current == section and "=" in s:
            if s.split("=", 1)[0].strip() == key:
                return no
    return 0


def parse_config(text: str, overrides: list[str] | tuple = (), source: str = "<config>") -> Config:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (bovw.K)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    cfg = Config()
    seen = set()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            path = f"{section}.{key}"
            line = _line_of(text, section, key)
            try:
                cfg.set(path, raw)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{line}: {exc}") from None
            seen.add(path)

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        cfg.set(path.strip(), raw)
        seen.add(path.strip())

    missing = [k for k in REQUIRED_KEYS if k not in seen]
    if missing:
        raise ConfigError(f"{source}: missing required key {missing[0]!r}")
    try:
        validate(cfg)
    except ConfigError as exc:
        line = _line_of(text, "detector", "S")
        raise ConfigError(f"{source}:{line}: {exc}" if line else f"{source}: {exc}") from None
    return cfg


def validate(cfg: Config) -> None:
    """Cross-key constraints that single-key parsing cannot see."""
    grid, rem = divmod(cfg.corpus.image_size, 2 ** len(cfg.bovw.channels))
    if rem or grid < 1:
        raise ConfigError(
            f"corpus.image_size={cfg.corpus.image_size} is not a multiple of the teacher stride {2 ** len(cfg.bovw.channels)}"
        )
    if cfg.detector.S != grid:
        raise ConfigError(
            f"detector.S={cfg.detector.S} must equal the teacher map size {grid} "
            f"(corpus.image_size / 2**len(bovw.channels)) so BoVW maps can be compared"
        )
    if cfg.corpus.canvas_size < cfg.corpus.image_size:
        raise ConfigError("corpus.canvas_size must be at least corpus.image_size")


def load_config(path, overrides=()) -> Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides, source=str(p))


def config_hash(cfg: Config) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def default_config(seed: int = 0) -> Config:
    cfg = Config()
    cfg.run.seed = seed
    return cfg
