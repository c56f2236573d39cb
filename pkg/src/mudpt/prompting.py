"""Deep multi-modal prompts, the cross-modal injection network, and prompted forwards.

A prompt stack holds ``depth`` blocks of ``length`` vectors per modality.  Layer
1 of each encoder sees the raw block ``T[0]`` / ``V[0]``.  Before each later
layer ``i < depth`` the prompt positions of the running sequence are thrown
away and replaced by the fused block ``T_hat[i]`` / ``V_hat[i]``; from layer
``depth`` on, whatever sits at the prompt positions simply propagates.

The injection network maps the raw stacks to cross-modal prompts
``(T', V') = inject(T, V)`` and fusion adds them crosswise:
``T_hat = T + V'`` and ``V_hat = V + T'``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .encoders import DualEncoder, ImageEncoder, TextEncoder, encode_token_groups
from .errors import CheckpointError, ConfigError, ShapeError
from .numerics import AttentionParams, Tensor, broadcast_to, concat, multi_head_attention

MODES = ("mudpt", "independent_multimodal", "text_only", "visual_only", "zero_shot")

_MODE_FLAGS = {
    "mudpt": (True, True, True),
    "independent_multimodal": (True, True, False),
    "text_only": (True, False, False),
    "visual_only": (False, True, False),
    "zero_shot": (False, False, False),
}


@dataclass(frozen=True)
class PromptConfig:
    length: int = 4
    depth: int = 4
    text: bool = True
    visual: bool = True
    injection: bool = True
    joint_width: int = 32
    injection_heads: int = 2
    init_std: float = 0.02

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "PromptConfig":
        if mode not in _MODE_FLAGS:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        text, visual, injection = _MODE_FLAGS[mode]
        return cls(text=text, visual=visual, injection=injection, **overrides)

    def validate(self, layers: int) -> "PromptConfig":
        if self.length < 1:
            raise ConfigError("prompt length must be positive")
        if not 1 <= self.depth <= layers:
            raise ConfigError(f"prompt depth {self.depth} must lie in [1, {layers}]")
        if self.injection and not (self.text and self.visual):
            raise ConfigError("the injection network needs both text and visual prompts")
        if self.injection and self.joint_width % self.injection_heads:
            raise ConfigError("joint_width must be divisible by injection_heads")
        return self


@dataclass
class PromptStack:
    text: Tensor | None     # depth x length x d_t
    visual: Tensor | None   # depth x length x d_v

    def __post_init__(self):
        if self.text is not None and self.visual is not None and self.text.shape[:2] != self.visual.shape[:2]:
            raise ShapeError(f"text stack {self.text.shape} and visual stack {self.visual.shape} "
                             "must share depth and length")

    @property
    def depth(self) -> int:
        return (self.text if self.text is not None else self.visual).shape[0]

    @property
    def length(self) -> int:
        return (self.text if self.text is not None else self.visual).shape[1]

    @classmethod
    def init(cls, cfg: PromptConfig, backbone: DualEncoder, rng: np.random.Generator,
             init_tokens: Sequence[int] | None = None) -> "PromptStack":
        """Random normal(0, init_std) stacks; the first text block optionally starts
        from the embeddings (token + position) of ``init_tokens``."""
        L, n = cfg.depth, cfg.length
        text = visual = None
        if cfg.text:
            d_t = backbone.config.text_width
            T = rng.normal(0.0, cfg.init_std, (L, n, d_t))
            if init_tokens is not None:
                if len(init_tokens) != n:
                    raise ConfigError(f"{len(init_tokens)} init tokens for prompt length {n}")
                enc = backbone.text
                T[0] = enc.token_embedding.data[list(init_tokens)] + enc.positional.data[:n]
            text = Tensor(T, requires_grad=True)
        if cfg.visual:
            visual = Tensor(rng.normal(0.0, cfg.init_std, (L, n, backbone.config.vision_width)),
                            requires_grad=True)
        return cls(text, visual)


@dataclass
class FusedPrompts:
    text: Tensor     # T_hat = T + V'
    visual: Tensor   # V_hat = V + T'


class InjectionModel:
    """Shared cross-attention block between per-modality adapters.

    ``in_text`` (d_t x d_j) and ``in_visual`` (d_v x d_j) lift both stacks into a
    joint width; one attention block (shared by both directions and all depths)
    mixes them; ``out_to_text`` (d_j x d_t) and ``out_to_visual`` (d_j x d_v)
    map the results back.  Text queries attending to visual keys yield ``V'``
    (text width); visual queries attending to text keys yield ``T'`` (visual width).
    """

    def __init__(self, text_width: int, vision_width: int, joint_width: int, heads: int,
                 rng: np.random.Generator):
        def mat(rows, cols):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(rows), (rows, cols)), requires_grad=True)

        self.in_text = mat(text_width, joint_width)
        self.in_visual = mat(vision_width, joint_width)
        self.attn = AttentionParams.init(joint_width, heads, rng, std=1.0 / math.sqrt(joint_width),
                                         requires_grad=True)
        self.out_to_text = mat(joint_width, text_width)
        self.out_to_visual = mat(joint_width, vision_width)

    def named_parameters(self, prefix: str = "injection.") -> dict[str, Tensor]:
        out = {f"{prefix}in_text": self.in_text, f"{prefix}in_visual": self.in_visual}
        out.update(self.attn.named_parameters(f"{prefix}attn."))
        out[f"{prefix}out_to_text"] = self.out_to_text
        out[f"{prefix}out_to_visual"] = self.out_to_visual
        return out

    def __call__(self, T: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
        return inject(T, V, self)


def inject(T: Tensor, V: Tensor, params: InjectionModel) -> tuple[Tensor, Tensor]:
    """Return ``(T', V')`` with ``T'`` in visual width and ``V'`` in text width.

    Each depth is an independent attention problem over its ``length`` vectors;
    the leading depth axis is treated as a batch.
    """
    if T.ndim != 3 or V.ndim != 3 or T.shape[:2] != V.shape[:2]:
        raise ShapeError(f"text {T.shape} and visual {V.shape} stacks must share depth and length")
    if T.shape[2] != params.in_text.shape[0] or V.shape[2] != params.in_visual.shape[0]:
        raise ShapeError("prompt widths do not match the injection adapters")
    t = T @ params.in_text
    v = V @ params.in_visual
    v_prime = multi_head_attention(t, v, v, params.attn) @ params.out_to_text
    t_prime = multi_head_attention(v, t, t, params.attn) @ params.out_to_visual
    return t_prime, v_prime


def fuse(T: Tensor, V: Tensor, T_prime: Tensor, V_prime: Tensor) -> FusedPrompts:
    if T.shape != V_prime.shape or V.shape != T_prime.shape:
        raise ShapeError(f"cannot fuse T {T.shape} + V' {V_prime.shape} and V {V.shape} + T' {T_prime.shape}")
    return FusedPrompts(text=T + V_prime, visual=V + T_prime)


def _replace_hook(stack: Tensor, depth: int, start: int, batch: int, recorder: list | None, branch: str):
    n, d = stack.shape[1], stack.shape[2]

    def hook(i: int, x: Tensor) -> Tensor:
        if not 1 <= i < depth:
            return x
        if recorder is not None:
            recorder.append((branch, i))
        block = broadcast_to(stack[i], (batch, n, d))
        parts = [x[:, :start]] if start else []
        parts += [block, x[:, start + n:]]
        return concat(parts, axis=1)

    return hook


def prompted_encode_text(text: TextEncoder, T: Tensor, T_hat: Tensor, class_tokens,
                         recorder: list | None = None) -> Tensor:
    """Encode ``[T_0, class tokens..., eos]`` with deep prompt replacement.

    ``class_tokens`` is one id sequence (-> d_c) or a 2-D batch (-> B x d_c).
    Class tokens take positional rows ``n .. n+N-1``.
    """
    ids = np.asarray(class_tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if T.shape != T_hat.shape:
        raise ShapeError(f"prompt stack {T.shape} and fused stack {T_hat.shape} differ")
    depth, n, d = T.shape
    if depth > len(text.layers):
        raise ConfigError(f"prompt depth {depth} exceeds {len(text.layers)} layers")
    W = text.embed(ids, offset=n)
    B = W.shape[0]
    x = concat([broadcast_to(T[0], (B, n, d)), W], axis=1)
    z = text.encode(x, _replace_hook(T_hat, depth, 0, B, recorder, "text"))
    return z[0] if single else z


def prompted_encode_image(image: ImageEncoder, V: Tensor | None, V_hat: Tensor | None, raw_patches,
                          recorder: list | None = None) -> Tensor:
    """Encode ``[c_0, V_0, P_0]`` with deep prompt replacement; no prompts -> plain encoder."""
    c0, P0 = image.embed(raw_patches)
    if V is None or V.shape[1] == 0:
        return image.encode(c0, P0)
    if V_hat is None or V.shape != V_hat.shape:
        raise ShapeError("visual prompt stack and fused stack differ")
    depth, n, d = V.shape
    if depth > len(image.layers):
        raise ConfigError(f"prompt depth {depth} exceeds {len(image.layers)} layers")
    single = P0.ndim == 2
    if single:
        c0, P0 = c0.reshape(1, d), P0.reshape((1,) + P0.shape)
    B = P0.shape[0]
    x = concat([c0.reshape(B, 1, d), broadcast_to(V[0], (B, n, d)), P0], axis=1)
    out = image.encode_sequence(x, _replace_hook(V_hat, depth, 1, B, recorder, "image"))
    return out[0] if single else out


@dataclass
class ParamPartition:
    trainable: dict[str, Tensor]
    frozen: dict[str, Tensor]

    def trainable_count(self) -> int:
        return sum(p.size for p in self.trainable.values())


class PromptedModel:
    """A frozen backbone plus the trainable prompt stacks and injection network."""

    def __init__(self, backbone: DualEncoder, cfg: PromptConfig | None = None, seed: int = 0,
                 init_tokens: Sequence[int] | None = None, template_tokens: Sequence[int] = ()):
        self.backbone = backbone
        self.config = (cfg or PromptConfig()).validate(backbone.config.layers)
        self.template_tokens = tuple(int(t) for t in template_tokens)
        rng = np.random.default_rng(seed)
        self.prompts = PromptStack.init(self.config, backbone, rng, init_tokens)
        self.injection = None
        if self.config.injection:
            bc = backbone.config
            self.injection = InjectionModel(bc.text_width, bc.vision_width, self.config.joint_width,
                                            self.config.injection_heads, rng)
        backbone.set_requires_grad(False)
        # (branch, layer_index) for every prompt replacement, when a list
        self.replacements: list | None = None

    @property
    def temperature(self) -> float:
        return self.backbone.temperature

    def fused(self) -> FusedPrompts | None:
        T, V = self.prompts.text, self.prompts.visual
        if T is None and V is None:
            return None
        if self.injection is None:
            return FusedPrompts(text=T, visual=V)
        T_prime, V_prime = self.injection(T, V)
        return fuse(T, V, T_prime, V_prime)

    def encode_classes(self, class_tokens: Sequence[Sequence[int]], fused: FusedPrompts | None = None) -> Tensor:
        """Class-name token sequences (each ending in eos) -> (m, d_c) text embeddings."""
        text = self.backbone.text
        T = self.prompts.text
        if T is None:
            prefix = list(self.template_tokens)
            return encode_token_groups(text, [prefix + list(s) for s in class_tokens])
        if fused is None:
            fused = self.fused()
        return encode_token_groups(
            text, class_tokens,
            lambda ids: prompted_encode_text(text, T, fused.text, ids, self.replacements))

    def encode_images(self, raw_patches, fused: FusedPrompts | None = None) -> Tensor:
        V = self.prompts.visual
        if V is not None and fused is None:
            fused = self.fused()
        return prompted_encode_image(self.backbone.image, V, None if V is None else fused.visual,
                                     raw_patches, self.replacements)

    def prompt_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.prompts.text is not None:
            out["prompts.text"] = self.prompts.text
        if self.prompts.visual is not None:
            out["prompts.visual"] = self.prompts.visual
        if self.injection is not None:
            out.update(self.injection.named_parameters())
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone.named_parameters())
        out.update(self.prompt_parameters())
        return out

    def save_prompts(self, path) -> str:
        meta = {"backbone_hash": self.backbone.content_hash(), "prompt_config": asdict(self.config),
                "template_tokens": list(self.template_tokens)}
        return checkpoint.save(path, "prompts", {k: p.data for k, p in self.prompt_parameters().items()}, meta)

    def load_prompts(self, path) -> None:
        params, meta, _ = checkpoint.load(path, kind="prompts")
        if meta.get("backbone_hash") != self.backbone.content_hash():
            raise CheckpointError("prompt checkpoint was tuned against a different backbone")
        own = self.prompt_parameters()
        if set(params) != set(own):
            raise CheckpointError(f"prompt parameters {sorted(params)} do not match model {sorted(own)}")
        for k, p in own.items():
            if params[k].shape != p.shape:
                raise CheckpointError(f"{k}: shape {params[k].shape} != {p.shape}")
            p.data = params[k].copy()


_TRAINABLE_PREFIXES = ("prompts.", "injection.")
_FROZEN_PREFIXES = ("text.", "image.", "logit_scale")


def trainable_mask(model: PromptedModel) -> ParamPartition:
    """Split every model parameter into trainable (prompts, injection) and frozen (backbone)."""
    trainable, frozen = {}, {}
    for name, p in model.named_parameters().items():
        if name.startswith(_TRAINABLE_PREFIXES):
            trainable[name] = p
        elif name.startswith(_FROZEN_PREFIXES):
            frozen[name] = p
        else:
            raise RuntimeError(f"parameter {name!r} belongs to neither partition")
    return ParamPartition(trainable, frozen)
