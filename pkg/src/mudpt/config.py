"""Experiment configuration: JSON in, validated frozen dataclasses out.

Unknown keys anywhere in the document are rejected, and ``schema_version``
must match.  ``to_dict(from_dict(d))`` is stable: serializing a loaded config
and loading it again yields an equal config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .datagen import SHIFT_KINDS, CorpusConfig
from .encoders import BackboneConfig
from .errors import ConfigError, InvalidInputError
from .numerics import SgdSchedule
from .objective import PretrainSchedule
from .prompting import MODES, PromptConfig

SCHEMA_VERSION = 1
PROTOCOLS = ("few_shot", "base_to_new", "cross_dataset", "domain_gen")
DEFAULT_PROMPT_DEPTH = 12


@dataclass(frozen=True)
class PromptSettings:
    length: int = 4
    depth: int | None = None          # None -> min(12, backbone layers)
    joint_width: int = 32
    injection_heads: int = 2
    init_std: float = 0.02
    init_from_template: bool = True


@dataclass(frozen=True)
class PretrainSettings:
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 3e-4
    num_classes: int = 64
    train_per_class: int = 20
    test_per_class: int = 8
    seed: int = 0
    corpus_seed: int = 100
    checkpoint: str | None = None     # None -> <out>/backbone.json


@dataclass(frozen=True)
class Shift:
    kind: str
    severity: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    mode: tuple[str, ...] = ("mudpt",)
    protocol: str = "few_shot"
    seed: int = 0
    shots: int = 16
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompt: PromptSettings = field(default_factory=PromptSettings)
    schedule: SgdSchedule = field(default_factory=SgdSchedule)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    data: CorpusConfig = field(default_factory=CorpusConfig)
    cross_dataset_targets: int = 3
    shifts: tuple[Shift, ...] = tuple(Shift(k) for k in SHIFT_KINDS)
    output: str = "runs/experiment"

    @property
    def modes(self) -> tuple[str, ...]:
        return self.mode

    @property
    def prompt_depth(self) -> int:
        d = self.prompt.depth
        return min(DEFAULT_PROMPT_DEPTH, self.backbone.layers) if d is None else d

    def prompt_config(self, mode: str) -> PromptConfig:
        p = self.prompt
        return PromptConfig.for_mode(mode, length=p.length, depth=self.prompt_depth,
                                     joint_width=p.joint_width, injection_heads=p.injection_heads,
                                     init_std=p.init_std)

    def pretrain_schedule(self) -> PretrainSchedule:
        p = self.pretrain
        return PretrainSchedule(steps=p.steps, batch_size=p.batch_size, learning_rate=p.learning_rate)

    def pretrain_corpus_config(self) -> CorpusConfig:
        p = self.pretrain
        return replace(self.data, num_classes=p.num_classes, pool="pretrain", style_strength=0.0,
                       train_per_class=p.train_per_class, val_per_class=0, test_per_class=p.test_per_class)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not self.mode:
            raise ConfigError("at least one mode is required")
        for m in self.mode:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; expected one of {MODES}")
        if len(set(self.mode)) != len(self.mode):
            raise ConfigError("duplicate modes")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        self.backbone.validate()
        data = self.data.validate()
        if self.shots < 1 or self.shots > data.train_per_class:
            raise ConfigError(f"shots must lie in [1, {data.train_per_class}]")
        for label, cfg_val, bb_val in (("patches", data.patches, self.backbone.patches),
                                       ("patch_dim", data.patch_dim, self.backbone.patch_dim),
                                       ("vocab_size", data.vocab_size, self.backbone.vocab_size)):
            if cfg_val != bb_val:
                raise ConfigError(f"data.{label}={cfg_val} disagrees with backbone.{label}={bb_val}")
        for m in self.mode:
            self.prompt_config(m).validate(self.backbone.layers)
        if self.prompt.length + 3 > self.backbone.max_text_len:
            raise ConfigError("prompt length plus class name and eos exceeds max_text_len")
        if self.pretrain.steps > 0:
            self.pretrain_corpus_config().validate()
            if self.pretrain.batch_size > self.pretrain.num_classes:
                raise ConfigError("pretrain batch_size exceeds the number of pretraining classes")
        try:
            self.pretrain_schedule()
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None
        if self.protocol == "cross_dataset" and self.cross_dataset_targets < 1:
            raise ConfigError("cross_dataset needs at least one target dataset")
        if self.protocol == "domain_gen":
            if not self.shifts:
                raise ConfigError("domain_gen needs at least one shift")
            for s in self.shifts:
                if s.kind not in SHIFT_KINDS:
                    raise ConfigError(f"unknown shift kind {s.kind!r}")
                if not 0.0 <= s.severity <= 1.0:
                    raise ConfigError("shift severity must lie in [0, 1]")
        return self


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------

_NESTED = {"backbone": BackboneConfig, "prompt": PromptSettings, "schedule": SgdSchedule,
           "pretrain": PretrainSettings, "data": CorpusConfig}


def _build(cls, doc: Any, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown field(s) in {path or 'config'}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _check_types(obj, path: str = "") -> None:
    for f in fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            _check_types(value, f"{path}{f.name}.")
            continue
        expected = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        ok = True
        if expected.startswith("int"):
            ok = isinstance(value, int) and not isinstance(value, bool) or (value is None and "None" in expected)
        elif expected.startswith("float"):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif expected.startswith("bool"):
            ok = isinstance(value, bool)
        elif expected.startswith("str"):
            ok = isinstance(value, str) or (value is None and "None" in expected)
        if not ok:
            raise ConfigError(f"{path}{f.name} has wrong type {type(value).__name__} (expected {expected})")


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    for key, cls in _NESTED.items():
        if key in doc:
            doc[key] = _build(cls, doc[key], key)
    if "mode" in doc:
        mode = doc["mode"]
        if isinstance(mode, str):
            mode = [m.strip() for m in mode.split(",") if m.strip()]
        if not isinstance(mode, list) or not all(isinstance(m, str) for m in mode):
            raise ConfigError("mode must be a string or a list of strings")
        doc["mode"] = tuple(mode)
    if "shifts" in doc:
        if not isinstance(doc["shifts"], list):
            raise ConfigError("shifts must be a list")
        doc["shifts"] = tuple(_build(Shift, s, "shifts[]") for s in doc["shifts"])
    cfg = _build(ExperimentConfig, doc, "")
    _check_types(cfg)
    return cfg.validate()


def to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["mode"] = list(cfg.mode)
    d["shifts"] = [asdict(s) for s in cfg.shifts]
    return d


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(doc)


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, out: str | None = None,
                   mode: str | None = None) -> ExperimentConfig:
    doc = to_dict(cfg)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["output"] = out
    if mode is not None:
        doc["mode"] = mode
    return from_dict(doc)
