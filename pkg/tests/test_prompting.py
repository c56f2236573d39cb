import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mudpt.encoders import DualEncoder
from mudpt.errors import CheckpointError, ConfigError, ShapeError
from mudpt.numerics import AttentionParams, Tensor, concat
from mudpt.objective import cosine_logits
from mudpt.prompting import (
    InjectionModel,
    PromptConfig,
    PromptedModel,
    _replace_hook,
    fuse,
    inject,
    prompted_encode_image,
    prompted_encode_text,
    trainable_mask,
)
from reference import reference_image, reference_text

EOS = 63
CLASSES = [(4, 16, EOS), (5, 20, EOS), (9, 27, EOS)]


def model_for(backbone, mode="mudpt", seed=0, **kw):
    return PromptedModel(backbone, PromptConfig.for_mode(mode, **kw), seed=seed,
                         init_tokens=(0, 1, 2, 3) if mode in ("mudpt", "text_only", "independent_multimodal")
                         and kw.get("length", 4) == 4 else None,
                         template_tokens=(0, 1, 2, 3))


def logits(model, images):
    fused = model.fused()
    return cosine_logits(model.encode_images(images, fused), model.encode_classes(CLASSES, fused),
                         model.temperature).data


@pytest.mark.parametrize("depth", [1, 2, 4])
def test_prompted_forwards_match_reference_interpreter(fresh_backbone, rng, depth):
    m = model_for(fresh_backbone, depth=depth)
    f = m.fused()
    T, V = m.prompts.text.data, m.prompts.visual.data
    for ids in CLASSES:
        z = prompted_encode_text(fresh_backbone.text, m.prompts.text, f.text, ids).data
        np.testing.assert_allclose(z, reference_text(fresh_backbone, T, f.text.data, ids), atol=1e-12)
    raw = rng.normal(size=(16, 8))
    x = prompted_encode_image(fresh_backbone.image, m.prompts.visual, f.visual, raw).data
    np.testing.assert_allclose(x, reference_image(fresh_backbone, V, f.visual.data, raw), atol=1e-12)


# ---------------------------------------------------------------- inject / fuse

def test_inject_shapes(rng):
    inj = InjectionModel(32, 48, 32, 2, rng)
    Tp, Vp = inject(Tensor(rng.normal(size=(2, 4, 32))), Tensor(rng.normal(size=(2, 4, 48))), inj)
    assert Tp.shape == (2, 4, 48) and Vp.shape == (2, 4, 32)


def test_inject_zero_output_adapters(rng):
    inj = InjectionModel(32, 48, 32, 2, rng)
    inj.out_to_text.data[:] = 0.0
    inj.out_to_visual.data[:] = 0.0
    Tp, Vp = inject(Tensor(rng.normal(size=(2, 4, 32))), Tensor(rng.normal(size=(2, 4, 48))), inj)
    assert not Tp.data.any() and not Vp.data.any()


def test_inject_shape_errors(rng):
    inj = InjectionModel(32, 48, 32, 2, rng)
    with pytest.raises(ShapeError):
        inject(Tensor(rng.normal(size=(2, 4, 32))), Tensor(rng.normal(size=(2, 3, 48))), inj)
    with pytest.raises(ShapeError):
        inject(Tensor(rng.normal(size=(2, 4, 48))), Tensor(rng.normal(size=(2, 4, 48))), inj)


def test_inject_hand_oracle():
    # L = 1, n = 1, one head, d_j = 2, d_t = 2, d_v = 3.
    inj = InjectionModel(2, 3, 2, 1, np.random.default_rng(0))
    inj.in_text.data = np.array([[1.0, 0.0], [0.5, 1.0]])
    inj.in_visual.data = np.array([[1.0, 2.0], [0.0, 1.0], [-1.0, 0.0]])
    inj.attn = AttentionParams(Tensor(np.array([[1.0, 0.0], [0.0, 2.0]])),
                               Tensor(np.array([[0.5, 0.5], [0.0, 1.0]])),
                               Tensor(np.array([[1.0, -1.0], [2.0, 0.0]])),
                               Tensor(np.array([[0.0, 1.0], [1.0, 1.0]])), heads=1)
    inj.out_to_text.data = np.array([[1.0, 2.0], [3.0, 4.0]])
    inj.out_to_visual.data = np.array([[1.0, 0.0, -1.0], [0.0, 1.0, 1.0]])
    T, V = [2.0, -1.0], [1.0, 1.0, 2.0]
    t = [T[0] * 1.0 + T[1] * 0.5, T[0] * 0.0 + T[1] * 1.0]               # [1.5, -1]
    v = [V[0] * 1 + V[1] * 0 + V[2] * -1, V[0] * 2 + V[1] * 1 + V[2] * 0]  # [-1, 3]
    # one key: attention weight is exactly 1, so MHA(q, kv, kv) = kv @ Wv @ Wo
    def through(kv):
        val = [kv[0] * 1.0 + kv[1] * 2.0, kv[0] * -1.0 + kv[1] * 0.0]
        return [val[0] * 0.0 + val[1] * 1.0, val[0] * 1.0 + val[1] * 1.0]
    a_v, a_t = through(v), through(t)
    V_prime = [a_v[0] * 1.0 + a_v[1] * 3.0, a_v[0] * 2.0 + a_v[1] * 4.0]
    T_prime = [a_t[0] * 1.0, a_t[1] * 1.0, a_t[0] * -1.0 + a_t[1] * 1.0]
    Tp, Vp = inject(Tensor(np.array([[T]])), Tensor(np.array([[V]])), inj)
    np.testing.assert_allclose(Tp.data[0, 0], T_prime, atol=1e-10)
    np.testing.assert_allclose(Vp.data[0, 0], V_prime, atol=1e-10)


def test_fuse_examples(rng):
    T, V = Tensor(rng.normal(size=(2, 4, 32))), Tensor(rng.normal(size=(2, 4, 48)))
    Tp, Vp = Tensor(rng.normal(size=(2, 4, 48))), Tensor(rng.normal(size=(2, 4, 32)))
    zero_t, zero_v = Tensor(np.zeros((2, 4, 48))), Tensor(np.zeros((2, 4, 32)))
    f = fuse(T, V, zero_t, zero_v)
    assert np.array_equal(f.text.data, T.data) and np.array_equal(f.visual.data, V.data)
    f = fuse(Tensor(np.zeros((2, 4, 32))), Tensor(np.zeros((2, 4, 48))), Tp, Vp)
    assert np.array_equal(f.text.data, Vp.data) and np.array_equal(f.visual.data, Tp.data)
    f = fuse(T, V, Tp, Vp)
    assert np.array_equal(f.text.data, T.data + Vp.data) and np.array_equal(f.visual.data, V.data + Tp.data)
    with pytest.raises(ShapeError):
        fuse(T, V, Vp, Tp)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fusion_linearity(seed):
    r = np.random.default_rng(seed)
    T, dT = r.normal(size=(2, 4, 32)), r.normal(size=(2, 4, 32))
    V, Tp, Vp = r.normal(size=(2, 4, 48)), r.normal(size=(2, 4, 48)), r.normal(size=(2, 4, 32))
    a = fuse(Tensor(T + dT), Tensor(V), Tensor(Tp), Tensor(Vp)).text.data
    b = fuse(Tensor(T), Tensor(V), Tensor(Tp), Tensor(Vp)).text.data
    np.testing.assert_allclose(a - b, dT, atol=1e-12)


# ---------------------------------------------------------------- degeneracies

def test_zero_injection_equals_independent_multimodal(fresh_backbone, rng):
    mud = model_for(fresh_backbone, "mudpt")
    ind = model_for(fresh_backbone, "independent_multimodal")
    ind.prompts.text.data = mud.prompts.text.data.copy()
    ind.prompts.visual.data = mud.prompts.visual.data.copy()
    mud.injection.out_to_text.data[:] = 0.0
    mud.injection.out_to_visual.data[:] = 0.0
    imgs = rng.normal(size=(5, 16, 8))
    assert np.max(np.abs(logits(mud, imgs) - logits(ind, imgs))) <= 1e-10


def test_depth_one_text_only_is_plain_prompt_tokens(fresh_backbone, rng):
    m = model_for(fresh_backbone, "text_only", depth=1)
    imgs = rng.normal(size=(5, 16, 8))
    t = fresh_backbone.text
    T0 = m.prompts.text[0]
    Z = concat([t.encode(concat([T0, t.embed(ids, offset=4)], axis=0)).reshape(1, -1) for ids in CLASSES], axis=0)
    X = fresh_backbone.encode_images(imgs)
    coop = cosine_logits(X, Z, m.temperature).data
    assert np.max(np.abs(logits(m, imgs) - coop)) <= 1e-10


def test_empty_visual_prompt_is_plain_image_encoder(fresh_backbone, rng):
    raw = rng.normal(size=(16, 8))
    empty = Tensor(np.zeros((2, 0, 48)))
    a = prompted_encode_image(fresh_backbone.image, empty, empty, raw).data
    assert np.array_equal(a, fresh_backbone.encode_images(raw).data)


# ---------------------------------------------------------------- replacement bookkeeping

@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_replacement_count(fresh_backbone, rng, depth):
    m = model_for(fresh_backbone, depth=depth)
    m.replacements = []
    logits(m, rng.normal(size=(2, 16, 8)))
    assert sorted(m.replacements) == sorted([("text", i) for i in range(1, depth)]
                                            + [("image", i) for i in range(1, depth)])


def test_sequence_lengths_at_every_layer(fresh_backbone, rng):
    m = model_for(fresh_backbone, depth=2)
    fresh_backbone.text.recorder, fresh_backbone.image.recorder = [], []
    logits(m, rng.normal(size=(2, 16, 8)))
    assert {r[2] for r in fresh_backbone.text.recorder} == {4 + 3}
    assert {r[2] for r in fresh_backbone.image.recorder} == {1 + 4 + 16}
    fresh_backbone.text.recorder = fresh_backbone.image.recorder = None


def _perturbing_hook(stack, depth, start, layer_to_hit, delta):
    inner = _replace_hook(stack, depth, start, 1, None, "")
    n = stack.shape[1]

    def hook(i, x):
        if i == layer_to_hit:
            bump = np.zeros(x.shape)
            # a non-constant vector; a constant shift would be removed by LayerNorm
            bump[:, start:start + n] = delta * np.linspace(-1.0, 1.0, x.shape[-1])
            x = x + Tensor(bump)
        return inner(i, x)
    return hook


def test_replaced_prompt_outputs_are_discarded(fresh_backbone):
    m = model_for(fresh_backbone, depth=3)
    f = m.fused()
    t = fresh_backbone.text
    W = concat([m.prompts.text[0], t.embed(CLASSES[0], offset=4)], axis=0).reshape(1, 7, 32)
    base = t.encode(W, _replace_hook(f.text, 3, 0, 1, None, "")).data
    for layer in (1, 2):
        out = t.encode(W, _perturbing_hook(f.text, 3, 0, layer, 5.0)).data
        assert np.array_equal(out, base)
    # at or beyond the depth, prompt positions propagate and do matter
    out = t.encode(W, _perturbing_hook(f.text, 3, 0, 3, 5.0)).data
    assert np.max(np.abs(out - base)) > 1e-9


def test_depth_beyond_layers_rejected(fresh_backbone):
    with pytest.raises(ConfigError):
        model_for(fresh_backbone, depth=5)
    with pytest.raises(ConfigError):
        PromptedModel(fresh_backbone, PromptConfig(text=True, visual=False, injection=True))


# ---------------------------------------------------------------- partition

def test_trainable_count_desk(fresh_backbone):
    L, n = 2, 4
    part = trainable_mask(model_for(fresh_backbone, depth=L))
    injection = 32 * 32 + 48 * 32 + 4 * 32 * 32 + 32 * 32 + 32 * 48
    assert part.trainable_count() == L * n * (32 + 48) + injection
    assert set(part.trainable).isdisjoint(part.frozen)
    assert set(part.frozen) == set(fresh_backbone.named_parameters())


def test_visual_prompts_absent_when_disabled(fresh_backbone):
    part = trainable_mask(model_for(fresh_backbone, "text_only"))
    assert set(part.trainable) == {"prompts.text"}


def test_prompt_init_from_template(fresh_backbone):
    m = model_for(fresh_backbone)
    t = fresh_backbone.text
    expected = t.token_embedding.data[[0, 1, 2, 3]] + t.positional.data[:4]
    assert np.array_equal(m.prompts.text.data[0], expected)


def test_unclassified_parameter_fails_loudly(fresh_backbone):
    m = model_for(fresh_backbone)
    extra = dict(m.named_parameters(), stray=Tensor(np.zeros(1)))
    m.named_parameters = lambda: extra
    with pytest.raises(RuntimeError):
        trainable_mask(m)


def test_prompt_checkpoint_round_trip(fresh_backbone, tmp_path):
    a = model_for(fresh_backbone, seed=1)
    a.save_prompts(tmp_path / "p.json")
    b = model_for(fresh_backbone, seed=2)
    b.load_prompts(tmp_path / "p.json")
    for k, p in a.prompt_parameters().items():
        assert np.array_equal(p.data, b.prompt_parameters()[k].data)
    other = model_for(DualEncoder(seed=9))
    with pytest.raises(CheckpointError):
        other.load_prompts(tmp_path / "p.json")
