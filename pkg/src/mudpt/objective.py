"""Cosine-similarity classification, the tuning objective and both training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import AccessAudit, FewShotSplit, SyntheticCorpus
from .encoders import DualEncoder
from .errors import ConfigError, InvalidInputError, NumericError
from .numerics import SGD, Adam, SgdSchedule, Tensor, log_softmax, no_grad, softmax
from .numerics.tensor import exp as texp
from .prompting import _MODE_FLAGS, PromptedModel, trainable_mask

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class ClassifierHead:
    weights: Tensor                      # m x d_c
    class_names: list[tuple[int, ...]]
    temperature: float

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    label: int


def synthesize_classifier(class_names: Sequence[Sequence[int]], model: PromptedModel,
                          fused=None) -> ClassifierHead:
    names = [tuple(int(t) for t in s) for s in class_names]
    if len(names) < 2:
        raise InvalidInputError("a classifier needs at least two classes")
    Z = model.encode_classes(names, fused)
    return ClassifierHead(Z, names, model.temperature)


def _unit_rows(t: Tensor, what: str) -> Tensor:
    sq = (t * t).sum(axis=-1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise NumericError(f"zero-norm {what} vector; cosine similarity undefined")
    return t / sq.sqrt()


def cosine_logits(x: Tensor, Z: Tensor, temperature: float | Tensor) -> Tensor:
    """``cos(x_b, z_k) / temperature`` for a batch ``x`` (B x d_c) and classes ``Z`` (m x d_c).

    A Tensor temperature is treated as the log inverse temperature (trainable scale).
    """
    cos = _unit_rows(x, "image") @ _unit_rows(Z, "class").T
    if isinstance(temperature, Tensor):
        return cos * texp(temperature)
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    return cos * (1.0 / temperature)


def predict(x, head: ClassifierHead) -> Prediction:
    """Softmax over cosine logits; argmax ties go to the lowest class index."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != (head.weights.shape[1],):
        raise InvalidInputError(f"image embedding must have {head.weights.shape[1]} entries")
    with no_grad():
        logits = cosine_logits(x.reshape(1, -1), head.weights, head.temperature).data[0]
        probs = softmax(logits).data
    return Prediction(logits, probs, int(np.argmax(logits)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError("cross_entropy expects B x m logits and B labels")
    if labels.size == 0:
        raise InvalidInputError("empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InvalidInputError(f"labels must lie in [0, {logits.shape[1]})")
    picked = log_softmax(logits, -1)[np.arange(len(labels)), labels]
    return -picked.mean()


def tuning_loss(images, labels, model: PromptedModel, class_names: Sequence[Sequence[int]]) -> Tensor:
    """Mean cross-entropy of the true class over a batch, through both prompted encoders.

    The fused prompts are computed once and shared by the text and image forwards.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise InvalidInputError("empty batch")
    fused = model.fused()
    Z = model.encode_classes(class_names, fused)
    X = model.encode_images(images, fused)
    return cross_entropy(cosine_logits(X, Z, model.temperature), labels)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_indices(model: PromptedModel, corpus: SyntheticCorpus, indices, class_ids: Sequence[int],
                    audit: AccessAudit | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(predicted local labels, true local labels)`` over the given examples.

    Local label k refers to ``class_ids[k]``.
    """
    class_ids = list(class_ids)
    lookup = {c: k for k, c in enumerate(class_ids)}
    with no_grad():
        fused = model.fused()
        Z = model.encode_classes(corpus.class_sequences(class_ids), fused)
        preds, truth = [], []
        idx = np.asarray(indices, dtype=np.int64)
        for start in range(0, len(idx), EVAL_CHUNK):
            imgs, labels = corpus.fetch(idx[start:start + EVAL_CHUNK], audit)
            X = model.encode_images(imgs, fused)
            logits = cosine_logits(X, Z, model.temperature).data
            preds.append(np.argmax(logits, axis=1))
            truth.append(np.array([lookup[int(c)] for c in labels], dtype=np.int64))
    return np.concatenate(preds), np.concatenate(truth)


# ---------------------------------------------------------------------------
# prompt tuning
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    steps: int = 0
    backbone_hash: str = ""

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.trace]


def check_mode(model: PromptedModel, mode: str) -> None:
    if mode not in _MODE_FLAGS:
        raise ConfigError(f"unknown mode {mode!r}")
    cfg = model.config
    if (cfg.text, cfg.visual, cfg.injection) != _MODE_FLAGS[mode]:
        raise ConfigError(f"model prompt configuration contradicts mode {mode!r}")


def train(model: PromptedModel, corpus: SyntheticCorpus, split: FewShotSplit,
          schedule: SgdSchedule | None = None, seed: int = 0, mode: str | None = None,
          audit: AccessAudit | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Plain-SGD prompt tuning over the few-shot training examples.

    Only the trainable partition (prompts + injection network) is updated; the
    backbone hash is compared before and after and a mismatch is an error.
    """
    schedule = schedule or SgdSchedule()
    if mode is not None:
        check_mode(model, mode)
    partition = trainable_mask(model)
    if not partition.trainable:
        raise ConfigError("nothing to train: the model has no prompt parameters")
    for p in partition.frozen.values():
        p.requires_grad = False
    for p in partition.trainable.values():
        p.requires_grad = True

    before = model.backbone.content_hash()
    class_ids = split.class_ids
    class_names = corpus.class_sequences(class_ids)
    lookup = {c: k for k, c in enumerate(class_ids)}
    pool = split.train_indices()
    opt = SGD(partition.trainable.values(), schedule.learning_rate)
    rng = np.random.default_rng(seed)
    result = TrainResult()
    step = 0
    for epoch in range(schedule.epochs):
        order = pool[rng.permutation(len(pool))]
        for start in range(0, len(order), schedule.batch_size):
            if schedule.max_steps is not None and step >= schedule.max_steps:
                break
            imgs, labels = corpus.fetch(order[start:start + schedule.batch_size], audit)
            local = np.array([lookup[int(c)] for c in labels], dtype=np.int64)
            opt.zero_grad()
            loss = tuning_loss(imgs, local, model, class_names)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite tuning loss at step {step}")
            loss.backward()
            opt.step()
            record = {"step": step, "epoch": epoch, "loss": value}
            result.trace.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
        if schedule.max_steps is not None and step >= schedule.max_steps:
            break
    result.steps = step
    after = model.backbone.content_hash()
    if after != before:
        raise RuntimeError("backbone parameters changed during prompt tuning")
    result.backbone_hash = after
    return result


# ---------------------------------------------------------------------------
# contrastive pretraining of the backbone
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainSchedule:
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 3e-4

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate < 0:
            raise ConfigError("steps and learning_rate must be non-negative")
        if self.batch_size < 2:
            raise InvalidInputError("contrastive pretraining needs batches of at least two pairs")


def contrastive_loss(X: Tensor, Z: Tensor, logit_scale) -> Tensor:
    """Symmetric in-batch cross-entropy; pair b is (X[b], Z[b])."""
    if X.shape[0] < 2 or X.shape[0] != Z.shape[0]:
        raise InvalidInputError("contrastive loss needs at least two aligned pairs")
    S = cosine_logits(X, Z, logit_scale)
    target = np.arange(X.shape[0])
    return (cross_entropy(S, target) + cross_entropy(S.T, target)) * 0.5


@dataclass
class PretrainResult:
    temperature: float
    trace: list[dict]


def contrastive_pretrain(corpus: SyntheticCorpus, backbone: DualEncoder,
                         schedule: PretrainSchedule | None = None, seed: int = 0) -> PretrainResult:
    """Train every backbone parameter (and the temperature) on template captions.

    Each batch holds one training image from each of ``batch_size`` distinct
    classes, so there are no duplicate positives among the negatives.
    """
    schedule = schedule or PretrainSchedule()
    if schedule.batch_size > len(corpus.classes):
        raise ConfigError(f"batch of {schedule.batch_size} distinct classes but only "
                          f"{len(corpus.classes)} classes in the corpus")
    params = backbone.named_parameters()
    backbone.set_requires_grad(True)
    opt = Adam(params.values(), lr=schedule.learning_rate)
    rng = np.random.default_rng(seed)
    per_class = {c: corpus.indices("train", [c]) for c in corpus.class_ids}
    captions = {c: corpus.caption(c) for c in corpus.class_ids}
    trace = []
    try:
        for step in range(schedule.steps):
            chosen = rng.choice(len(corpus.classes), size=schedule.batch_size, replace=False)
            idx = [int(rng.choice(per_class[int(c)])) for c in chosen]
            imgs, _ = corpus.fetch(idx)
            opt.zero_grad()
            X = backbone.encode_images(imgs)
            Z = backbone.encode_tokens([captions[int(c)] for c in chosen])
            loss = contrastive_loss(X, Z, backbone.logit_scale)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite contrastive loss at step {step}")
            loss.backward()
            opt.step()
            backbone.clamp_temperature()
            trace.append({"step": step, "loss": value, "temperature": backbone.temperature})
    finally:
        backbone.set_requires_grad(False)
    return PretrainResult(backbone.temperature, trace)


def similarity_gap(backbone: DualEncoder, corpus: SyntheticCorpus, split: str = "test") -> float:
    """Mean matched image-caption cosine minus mean mismatched cosine on ``split``."""
    idx = corpus.indices(split)
    with no_grad():
        Z = _unit_rows(backbone.encode_tokens([corpus.caption(c) for c in corpus.class_ids]), "caption").data
        cos = []
        for start in range(0, len(idx), EVAL_CHUNK):
            imgs, _ = corpus.fetch(idx[start:start + EVAL_CHUNK])
            cos.append(_unit_rows(backbone.encode_images(imgs), "image").data @ Z.T)
    cos = np.concatenate(cos)
    labels = corpus.labels[idx]
    matched = np.zeros_like(cos, dtype=bool)
    matched[np.arange(len(idx)), labels] = True
    return float(cos[matched].mean() - cos[~matched].mean())
