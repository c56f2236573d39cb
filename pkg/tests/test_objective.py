import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mudpt.datagen import CorpusConfig, few_shot_sample, gen_corpus
from mudpt.encoders import TAU_MAX, TAU_MIN, DualEncoder
from mudpt.errors import ConfigError, InvalidInputError, NumericError
from mudpt.numerics import SgdSchedule, Tensor, no_grad
from mudpt.objective import (
    ClassifierHead,
    PretrainSchedule,
    contrastive_loss,
    contrastive_pretrain,
    cross_entropy,
    predict,
    similarity_gap,
    synthesize_classifier,
    train,
    tuning_loss,
)
from mudpt.prompting import PromptConfig, PromptedModel
from mudpt.runner import build_model
from reference import reference_image, reference_text

EOS = 63


def head(Z, tau=0.1):
    Z = np.asarray(Z, dtype=np.float64)
    return ClassifierHead(Tensor(Z), [(i, EOS) for i in range(len(Z))], tau)


# ---------------------------------------------------------------- predict

def test_predict_uniform_when_classes_coincide():
    p = predict(np.array([0.3, -1.0, 2.0]), head([[1.0, 2.0, 3.0]] * 4))
    np.testing.assert_allclose(p.probabilities, [0.25] * 4, atol=1e-15)
    assert p.label == 0


def test_predict_temperature_halving_keeps_argmax(rng):
    Z, x = rng.normal(size=(5, 16)), rng.normal(size=16)
    assert predict(x, head(Z, 0.1)).label == predict(x, head(Z, 0.05)).label


def test_predict_matches_high_precision_oracle():
    angles = [0.0, math.pi / 3, math.pi / 2]
    Z = [[math.cos(a), math.sin(a)] for a in angles]
    x = [math.cos(0.2), math.sin(0.2)]
    mpmath.mp.dps = 50
    logits = [mpmath.cos(mpmath.mpf(0.2) - mpmath.mpf(a)) / mpmath.mpf("0.1") for a in angles]
    denom = sum(mpmath.exp(v) for v in logits)
    oracle = [float(mpmath.exp(v) / denom) for v in logits]
    p = predict(np.array(x), head(Z, 0.1))
    np.testing.assert_allclose(p.probabilities, oracle, atol=1e-10, rtol=0)


def test_predict_zero_norm_is_numeric_error():
    with pytest.raises(NumericError):
        predict(np.zeros(2), head([[1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(NumericError):
        predict(np.ones(2), head([[1.0, 0.0], [0.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_predict_normalized_and_cosines_bounded(seed, m):
    r = np.random.default_rng(seed)
    Z, x = r.normal(size=(m, 6)), r.normal(size=6)
    p = predict(x, head(Z, 1.0))
    assert abs(p.probabilities.sum() - 1.0) <= 1e-6
    assert np.all(np.abs(p.logits) <= 1.0 + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_label_permutation_equivariance(seed, m):
    r = np.random.default_rng(seed)
    Z, x, perm = r.normal(size=(m, 6)), r.normal(size=6), r.permutation(m)
    a, b = predict(x, head(Z)), predict(x, head(Z[perm]))
    np.testing.assert_allclose(b.probabilities, a.probabilities[perm], atol=1e-12)
    assert perm[b.label] == a.label


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.02, 1.0), st.floats(0.1, 0.9))
def test_lower_temperature_sharpens(seed, tau, shrink):
    r = np.random.default_rng(seed)
    Z, x = r.normal(size=(4, 6)), r.normal(size=6)
    hi, lo = predict(x, head(Z, tau)), predict(x, head(Z, tau * shrink))
    if np.ptp(hi.logits) > 1e-6 and hi.probabilities.max() < 1 - 1e-9:
        assert lo.probabilities.max() > hi.probabilities.max()


# ---------------------------------------------------------------- classifier synthesis

def test_synthesize_identical_names_and_shape(fresh_backbone):
    m = PromptedModel(fresh_backbone, PromptConfig.for_mode("mudpt"))
    h = synthesize_classifier([(4, 16, EOS), (4, 16, EOS), (5, 20, EOS)], m)
    assert h.weights.shape == (3, 16)
    assert np.array_equal(h.weights.data[0], h.weights.data[1])
    with pytest.raises(InvalidInputError):
        synthesize_classifier([(4, 16, EOS)], m)


def test_one_tuning_step_changes_classifier(fresh_backbone):
    corpus = gen_corpus(CorpusConfig(), seed=0)
    split = few_shot_sample(corpus, 16, 0)
    m = PromptedModel(fresh_backbone, PromptConfig.for_mode("mudpt"))
    names = corpus.class_sequences(split.class_ids)
    with no_grad():
        before = synthesize_classifier(names, m).weights.data
    train(m, corpus, split, SgdSchedule(max_steps=1), seed=0)
    with no_grad():
        after = synthesize_classifier(names, m).weights.data
    assert not np.array_equal(before, after)


# ---------------------------------------------------------------- losses

def test_cross_entropy_uniform_is_ln_m():
    for m in (2, 5, 16):
        assert float(cross_entropy(Tensor(np.zeros((3, m))), [0, 1, 1]).data) == pytest.approx(math.log(m), abs=1e-15)


def test_cross_entropy_confident_truth_tends_to_zero():
    logits = np.full((2, 4), -50.0)
    logits[[0, 1], [2, 3]] = 50.0
    assert float(cross_entropy(Tensor(logits), [2, 3]).data) < 1e-30


def test_tuning_loss_uniform_is_ln_m(fresh_backbone, rng):
    m = PromptedModel(fresh_backbone, PromptConfig.for_mode("mudpt"))
    names = [(4, 16, EOS)] * 5
    loss = tuning_loss(rng.normal(size=(3, 16, 8)), [0, 2, 4], m, names)
    assert float(loss.data) == pytest.approx(math.log(5), abs=1e-12)


def test_tuning_loss_errors(fresh_backbone):
    m = PromptedModel(fresh_backbone, PromptConfig.for_mode("mudpt"))
    with pytest.raises(InvalidInputError):
        tuning_loss(np.zeros((0, 16, 8)), [], m, [(4, 16, EOS), (5, 20, EOS)])
    with pytest.raises(InvalidInputError):
        tuning_loss(np.ones((1, 16, 8)), [2], m, [(4, 16, EOS), (5, 20, EOS)])


def test_tuning_loss_matches_straight_line_reimplementation(pretrained_backbone, pretrained_config):
    corpus = gen_corpus(pretrained_config.data, seed=0)
    split = few_shot_sample(corpus, 16, 0)
    model = build_model(pretrained_config.validate(), pretrained_backbone, "mudpt")
    idx = split.train_indices()[:4]
    images, labels = corpus.fetch(idx)
    local = [split.class_ids.index(int(c)) for c in labels]
    names = corpus.class_sequences(split.class_ids)
    got = float(tuning_loss(images, local, model, names).data)

    f = model.fused()
    T, V = model.prompts.text.data, model.prompts.visual.data
    Z = np.array([reference_text(pretrained_backbone, T, f.text.data, s) for s in names])
    X = np.array([reference_image(pretrained_backbone, V, f.visual.data, im) for im in images])
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    total = 0.0
    for b in range(4):
        logits = X[b] @ Z.T / pretrained_backbone.temperature
        total += -(logits[local[b]] - logits.max() - math.log(np.exp(logits - logits.max()).sum()))
    assert got == pytest.approx(total / 4, abs=1e-12)


# ---------------------------------------------------------------- contrastive pretraining

def test_contrastive_duplicated_pairs_is_ln2(rng):
    x, z = rng.normal(size=16), rng.normal(size=16)
    loss = contrastive_loss(Tensor(np.stack([x, x])), Tensor(np.stack([z, z])), Tensor(np.array(2.0)))
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_contrastive_batch_too_small():
    with pytest.raises(InvalidInputError):
        PretrainSchedule(batch_size=1)
    with pytest.raises(InvalidInputError):
        contrastive_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), Tensor(np.array(1.0)))


def test_pretrained_backbone_aligns_pairs(pretrained_backbone, pretrained_config):
    corpus = gen_corpus(pretrained_config.pretrain_corpus_config(), seed=pretrained_config.pretrain.corpus_seed)
    assert similarity_gap(pretrained_backbone, corpus, "test") > 0.2
    assert TAU_MIN <= pretrained_backbone.temperature <= TAU_MAX


def test_temperature_stays_clamped():
    cfg = CorpusConfig(num_classes=8, pool="pretrain", style_strength=0.0, train_per_class=4,
                       val_per_class=0, test_per_class=2)
    corpus = gen_corpus(cfg, seed=3)
    bb = DualEncoder(seed=1)
    bb.logit_scale.data = np.array(math.log(1 / TAU_MIN) - 1e-3)
    result = contrastive_pretrain(corpus, bb, PretrainSchedule(steps=5, batch_size=4, learning_rate=0.5), seed=0)
    assert all(TAU_MIN - 1e-15 <= r["temperature"] <= TAU_MAX + 1e-15 for r in result.trace)
    assert not any(p.requires_grad for p in bb.named_parameters().values())


# ---------------------------------------------------------------- prompt tuning

@pytest.fixture(scope="module")
def few_shot_task(pretrained_config):
    corpus = gen_corpus(pretrained_config.data, seed=0)
    return corpus, few_shot_sample(corpus, 16, 0)


def test_zero_learning_rate_is_null(pretrained_backbone, pretrained_config, few_shot_task):
    corpus, split = few_shot_task
    model = build_model(pretrained_config, pretrained_backbone, "mudpt")
    before = {k: p.data.copy() for k, p in model.prompt_parameters().items()}
    result = train(model, corpus, split, SgdSchedule(learning_rate=0.0, epochs=3, batch_size=256), seed=0)
    for k, p in model.prompt_parameters().items():
        assert np.array_equal(p.data, before[k])
    losses = result.losses if not callable(result.losses) else result.losses()
    assert max(losses) - min(losses) < 1e-12
    assert result.backbone_hash == pretrained_backbone.content_hash()


def test_mode_contradiction_rejected(pretrained_backbone, pretrained_config, few_shot_task):
    corpus, split = few_shot_task
    model = build_model(pretrained_config, pretrained_backbone, "mudpt")
    with pytest.raises(ConfigError):
        train(model, corpus, split, SgdSchedule(max_steps=1), mode="text_only")


def test_training_is_deterministic(pretrained_backbone, pretrained_config, few_shot_task):
    corpus, split = few_shot_task
    runs = []
    for _ in range(2):
        model = build_model(pretrained_config, pretrained_backbone, "mudpt")
        runs.append(train(model, corpus, split, SgdSchedule(learning_rate=1e-4, max_steps=5), seed=3).trace)
    assert runs[0] == runs[1]


def test_tuning_reduces_training_loss(pretrained_backbone, pretrained_config, few_shot_task):
    corpus, split = few_shot_task
    images, labels = corpus.fetch(split.train_indices())
    local = [split.class_ids.index(int(c)) for c in labels]
    names = corpus.class_sequences(split.class_ids)
    model = build_model(pretrained_config, pretrained_backbone, "mudpt")
    snapshot = pretrained_backbone.snapshot()
    with no_grad():
        before = float(tuning_loss(images, local, model, names).data)
    result = train(model, corpus, split, pretrained_config.schedule, seed=0, mode="mudpt")
    with no_grad():
        after = float(tuning_loss(images, local, model, names).data)
    assert result.steps == 300
    assert after <= 0.7 * before
    assert pretrained_backbone.snapshot() == snapshot
