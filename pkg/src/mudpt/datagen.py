"""Deterministic synthetic image-text world.

Every class is an (attribute, object) pair.  A shared *world* (fixed by
``world_seed``) owns one patch-grid pattern per attribute and per object; a
class prototype is the sum of its two patterns plus a class-specific residual,
and each example adds Gaussian pixel noise.  Class names are the two tokens
``(attribute, object)``, so a text encoder that has seen every token during
pretraining can reach unseen combinations.

The pair space is cut into two fixed pools: pairs with ``(a + o) % 3 == 0``
are reserved for downstream tasks, all others feed pretraining.  Each corpus
also carries its own additive *style* pattern (drawn from the corpus seed),
which separates a downstream dataset from the pretraining distribution.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

CORPUS_VERSION = 1
SPLITS = ("train", "val", "test")
SHIFT_KINDS = ("noise_boost", "patch_permute", "prototype_drift", "contrast_scale")
NOISE_BOOST_SCALE = 2.0          # added noise std at severity 1
TEMPLATE_LEN = 4


@dataclass(frozen=True)
class CorpusConfig:
    num_classes: int = 16
    patches: int = 16
    patch_dim: int = 8
    train_per_class: int = 20
    val_per_class: int = 4
    test_per_class: int = 32
    noise_sigma: float = 0.1
    class_residual: float = 0.5
    style_strength: float = 1.0
    pool: str = "downstream"
    vocab_size: int = 64
    n_attributes: int = 12
    n_objects: int = 12
    world_seed: int = 0

    def validate(self) -> "CorpusConfig":
        if self.num_classes < 4:
            raise ConfigError("need at least 4 classes")
        if self.patches < 4 or self.patch_dim < 1:
            raise ConfigError("need at least 4 patches of positive width")
        if min(self.noise_sigma, self.class_residual, self.style_strength) < 0:
            raise ConfigError("noise_sigma, class_residual and style_strength must be non-negative")
        if min(self.train_per_class, self.test_per_class) < 1 or self.val_per_class < 0:
            raise ConfigError("per-class example counts must be positive")
        if self.pool not in ("downstream", "pretrain"):
            raise ConfigError(f"unknown class pool {self.pool!r}")
        vocab = self.vocabulary
        if vocab.objects[-1] >= vocab.eos:
            raise ConfigError("vocabulary too small for template, attribute and object tokens")
        if self.num_classes > len(vocab.pool(self.pool)):
            raise ConfigError(f"vocabulary supports only {len(vocab.pool(self.pool))} distinct "
                              f"{self.pool} class names, {self.num_classes} requested")
        return self

    @property
    def vocabulary(self) -> "Vocabulary":
        return Vocabulary(self.vocab_size, self.n_attributes, self.n_objects)


@dataclass(frozen=True)
class Vocabulary:
    """Token layout: template ids first, then attributes, then objects; eos is the last id."""

    size: int = 64
    n_attributes: int = 12
    n_objects: int = 12

    @property
    def template(self) -> tuple[int, ...]:
        return tuple(range(TEMPLATE_LEN))

    @property
    def attributes(self) -> tuple[int, ...]:
        return tuple(range(TEMPLATE_LEN, TEMPLATE_LEN + self.n_attributes))

    @property
    def objects(self) -> tuple[int, ...]:
        start = TEMPLATE_LEN + self.n_attributes
        return tuple(range(start, start + self.n_objects))

    @property
    def eos(self) -> int:
        return self.size - 1

    def pool(self, which: str) -> list[tuple[int, int]]:
        want_downstream = which == "downstream"
        return [(a, o) for a in range(self.n_attributes) for o in range(self.n_objects)
                if ((a + o) % 3 == 0) == want_downstream]

    def name_tokens(self, attribute: int, obj: int) -> tuple[int, int]:
        return self.attributes[attribute], self.objects[obj]


@dataclass
class ClassInfo:
    class_id: int
    name_tokens: tuple[int, ...]
    prototype: np.ndarray | None = None


@dataclass
class SyntheticCorpus:
    config: CorpusConfig
    seed: int
    classes: list[ClassInfo]
    images: np.ndarray          # E x M x p
    labels: np.ndarray          # E
    splits: np.ndarray          # E, values from SPLITS
    transform: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    @property
    def eos(self) -> int:
        return self.config.vocabulary.eos

    def class_sequence(self, class_id: int) -> tuple[int, ...]:
        """Class name tokens followed by eos."""
        return tuple(self.classes[class_id].name_tokens) + (self.eos,)

    def class_sequences(self, class_ids: Iterable[int] | None = None) -> list[tuple[int, ...]]:
        ids = self.class_ids if class_ids is None else class_ids
        return [self.class_sequence(c) for c in ids]

    def caption(self, class_id: int) -> tuple[int, ...]:
        """Template + class name + eos, the pretraining caption."""
        return self.config.vocabulary.template + self.class_sequence(class_id)

    def indices(self, split: str, class_ids: Iterable[int] | None = None) -> np.ndarray:
        mask = self.splits == split
        if class_ids is not None:
            mask &= np.isin(self.labels, np.fromiter(class_ids, dtype=np.int64))
        return np.flatnonzero(mask)

    def fetch(self, indices, audit: "AccessAudit | None" = None) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        if audit is not None:
            audit.record(self.labels[idx], self.splits[idx])
        return self.images[idx], self.labels[idx]


class AccessAudit:
    """Counts which classes and splits had their images read."""

    def __init__(self):
        self.class_counts: Counter = Counter()
        self.split_counts: Counter = Counter()

    def record(self, labels: Iterable[int], splits: Iterable[str]) -> None:
        self.class_counts.update(int(c) for c in labels)
        self.split_counts.update(str(s) for s in splits)

    @property
    def classes(self) -> set[int]:
        return set(self.class_counts)


def _world_patterns(cfg: CorpusConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.world_seed)
    attrs = rng.normal(0.0, 1.0, (cfg.n_attributes, cfg.patches, cfg.patch_dim))
    objs = rng.normal(0.0, 1.0, (cfg.n_objects, cfg.patches, cfg.patch_dim))
    return attrs, objs


def gen_corpus(config: CorpusConfig | None = None, seed: int = 0) -> SyntheticCorpus:
    cfg = (config or CorpusConfig()).validate()
    vocab = cfg.vocabulary
    attrs, objs = _world_patterns(cfg)
    rng = np.random.default_rng(seed)
    style = cfg.style_strength * np.random.default_rng([seed, 1]).normal(0.0, 1.0, attrs.shape[1:])
    pool = vocab.pool(cfg.pool)
    chosen = rng.choice(len(pool), size=cfg.num_classes, replace=False)

    classes = []
    for cid, k in enumerate(chosen):
        a, o = pool[int(k)]
        residual = cfg.class_residual * rng.normal(0.0, 1.0, attrs[a].shape)
        proto = attrs[a] + objs[o] + residual + style
        classes.append(ClassInfo(cid, vocab.name_tokens(a, o), proto))

    counts = (("train", cfg.train_per_class), ("val", cfg.val_per_class), ("test", cfg.test_per_class))
    images, labels, splits = [], [], []
    for c in classes:
        for split, count in counts:
            noise = rng.normal(0.0, 1.0, (count,) + c.prototype.shape)
            images.append(c.prototype + cfg.noise_sigma * noise)
            labels += [c.class_id] * count
            splits += [split] * count
    return SyntheticCorpus(cfg, seed, classes, np.concatenate(images, axis=0),
                           np.asarray(labels, dtype=np.int64), np.asarray(splits))


@dataclass
class FewShotSplit:
    train: dict[int, tuple[int, ...]]
    val: dict[int, tuple[int, ...]]
    test: tuple[int, ...]
    shots: int

    def train_indices(self) -> np.ndarray:
        return np.asarray([i for c in sorted(self.train) for i in self.train[c]], dtype=np.int64)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.train)


def few_shot_sample(corpus: SyntheticCorpus, shots: int = 16, seed: int = 0,
                    class_ids: Sequence[int] | None = None) -> FewShotSplit:
    """Draw ``shots`` training (and up to ``shots`` validation) examples per class.

    The test split is returned untouched (restricted to ``class_ids`` when given).
    """
    if shots < 1:
        raise ConfigError("shots must be positive")
    ids = corpus.class_ids if class_ids is None else list(class_ids)
    rng = np.random.default_rng(seed)
    train, val = {}, {}
    for c in ids:
        pool = corpus.indices("train", [c])
        if len(pool) < shots:
            raise DataError(f"class {c} has {len(pool)} training examples, {shots} requested")
        train[c] = tuple(sorted(int(i) for i in rng.choice(pool, size=shots, replace=False)))
        vpool = corpus.indices("val", [c])
        k = min(shots, len(vpool))
        val[c] = tuple(sorted(int(i) for i in rng.choice(vpool, size=k, replace=False))) if k else ()
    test = tuple(int(i) for i in corpus.indices("test", ids))
    return FewShotSplit(train, val, test, shots)


@dataclass(frozen=True)
class BaseNewSplit:
    base: tuple[int, ...]
    new: tuple[int, ...]


def base_new_split(class_ids: Sequence[int], seed: int = 0) -> BaseNewSplit:
    ids = list(class_ids)
    if len(ids) < 2:
        raise ConfigError("base-to-new split needs at least two classes")
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate class ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    cut = (len(ids) + 1) // 2
    return BaseNewSplit(tuple(sorted(shuffled[:cut])), tuple(sorted(shuffled[cut:])))


def domain_shift(corpus: SyntheticCorpus, kind: str, severity: float, seed: int = 0) -> SyntheticCorpus:
    """Label-preserving image transform; ``severity == 0`` returns identical images."""
    if kind not in SHIFT_KINDS:
        raise ConfigError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")
    if not 0.0 <= severity <= 1.0:
        raise ConfigError("severity must lie in [0, 1]")
    images = corpus.images.copy()
    rng = np.random.default_rng(seed)
    if severity > 0:
        if kind == "noise_boost":
            images = images + NOISE_BOOST_SCALE * severity * rng.normal(0.0, 1.0, images.shape)
        elif kind == "patch_permute":
            M = images.shape[1]
            k = int(round(severity * M))
            for e in range(len(images)):
                pos = np.sort(rng.choice(M, size=k, replace=False))
                images[e, pos] = images[e, rng.permutation(pos)]
        elif kind == "prototype_drift":
            drift = rng.normal(0.0, 1.0, (len(corpus.classes),) + images.shape[1:])
            images = images + severity * drift[corpus.labels]
        elif kind == "contrast_scale":
            mu = images.mean(axis=(1, 2), keepdims=True)
            images = mu + (1.0 - 0.9 * severity) * (images - mu)
    transform = dict(corpus.transform)
    transform.setdefault("shifts", [])
    transform = {"shifts": transform["shifts"] + [{"kind": kind, "severity": severity, "seed": seed}]}
    return replace(corpus, images=images, transform=transform)


# ---------------------------------------------------------------------------
# line-delimited JSON
# ---------------------------------------------------------------------------

def write_corpus(corpus: SyntheticCorpus, path) -> None:
    header = {"kind": "mudpt.corpus", "version": CORPUS_VERSION, "config": asdict(corpus.config),
              "seed": corpus.seed, "transform": corpus.transform}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for img, label, split in zip(corpus.images, corpus.labels, corpus.splits):
            rec = {"class_id": int(label), "name_tokens": list(corpus.classes[label].name_tokens),
                   "split": str(split), "patches": img.tolist()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_corpus(path) -> SyntheticCorpus:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("kind") != "mudpt.corpus":
        raise DataError(f"{path} is not a corpus file")
    if header.get("version") != CORPUS_VERSION:
        raise DataError(f"unsupported corpus version {header.get('version')!r}")
    cfg = CorpusConfig(**header["config"])
    names: dict[int, tuple[int, ...]] = {}
    images, labels, splits = [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        cid = int(rec["class_id"])
        tokens = tuple(int(t) for t in rec["name_tokens"])
        if names.setdefault(cid, tokens) != tokens:
            raise DataError(f"class {cid} has inconsistent names")
        if rec["split"] not in SPLITS:
            raise DataError(f"unknown split tag {rec['split']!r}")
        images.append(rec["patches"])
        labels.append(cid)
        splits.append(rec["split"])
    if sorted(names) != list(range(len(names))):
        raise DataError("class ids must be contiguous from 0")
    classes = [ClassInfo(c, names[c]) for c in sorted(names)]
    return SyntheticCorpus(cfg, int(header["seed"]), classes, np.asarray(images, dtype=np.float64),
                           np.asarray(labels, dtype=np.int64), np.asarray(splits),
                           header.get("transform") or {})
