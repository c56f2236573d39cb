"""Frozen dual-encoder backbone: text and image Transformers plus projection heads.

Both branches use pre-LayerNorm blocks with bidirectional attention.  The text
embedding is read from the final sequence position (the eos token); the image
embedding from position 0 (the class token).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .errors import CheckpointError, InvalidInputError, ShapeError, VocabularyError
from .numerics import AttentionParams, Tensor, broadcast_to, concat, gelu, layer_norm, multi_head_attention

TAU_MIN, TAU_MAX = 0.01, 1.0

# hook(layer_index, hidden) -> hidden, called before every layer
LayerHook = Callable[[int, Tensor], Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    text_width: int = 32
    vision_width: int = 48
    embed_dim: int = 16
    layers: int = 4
    heads: int = 4
    vocab_size: int = 64
    patches: int = 16
    patch_dim: int = 8
    max_text_len: int = 12
    mlp_ratio: int = 4
    init_std: float = 0.02
    init_temperature: float = 0.07

    @property
    def eos_token(self) -> int:
        return self.vocab_size - 1

    def validate(self) -> "BackboneConfig":
        from .errors import ConfigError
        if self.layers < 1:
            raise ConfigError("backbone needs at least one layer")
        for w in (self.text_width, self.vision_width):
            if w % self.heads:
                raise ConfigError(f"width {w} not divisible by {self.heads} heads")
        if not TAU_MIN <= self.init_temperature <= TAU_MAX:
            raise ConfigError("init_temperature outside the clamp range")
        return self


class TransformerLayer:
    """LN -> attention -> residual -> LN -> MLP -> residual."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator, std: float):
        hidden = width * mlp_ratio
        self.ln1_gamma = Tensor(np.ones(width))
        self.ln1_beta = Tensor(np.zeros(width))
        self.attn = AttentionParams.init(width, heads, rng, std)
        self.ln2_gamma = Tensor(np.ones(width))
        self.ln2_beta = Tensor(np.zeros(width))
        self.fc1 = Tensor(rng.normal(0.0, std, (width, hidden)))
        self.fc1_bias = Tensor(np.zeros(hidden))
        self.fc2 = Tensor(rng.normal(0.0, std, (hidden, width)))
        self.fc2_bias = Tensor(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln1_gamma, self.ln1_beta)
        x = x + multi_head_attention(h, h, h, self.attn)
        h = layer_norm(x, self.ln2_gamma, self.ln2_beta)
        return x + (gelu(h @ self.fc1 + self.fc1_bias) @ self.fc2 + self.fc2_bias)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}ln1.gamma": self.ln1_gamma, f"{prefix}ln1.beta": self.ln1_beta,
            f"{prefix}ln2.gamma": self.ln2_gamma, f"{prefix}ln2.beta": self.ln2_beta,
            f"{prefix}mlp.fc1": self.fc1, f"{prefix}mlp.fc1_bias": self.fc1_bias,
            f"{prefix}mlp.fc2": self.fc2, f"{prefix}mlp.fc2_bias": self.fc2_bias,
        }
        out.update(self.attn.named_parameters(f"{prefix}attn."))
        return out


class _Tower:
    branch = ""

    def __init__(self, width: int, cfg: BackboneConfig, rng: np.random.Generator):
        self.width = width
        self.layers = [TransformerLayer(width, cfg.heads, cfg.mlp_ratio, rng, cfg.init_std)
                       for _ in range(cfg.layers)]
        # When a list, every layer application appends (branch, layer_index, seq_len).
        self.recorder: list | None = None

    def run_layers(self, x: Tensor, before_layer: LayerHook | None = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            if before_layer is not None:
                x = before_layer(i, x)
            if self.recorder is not None:
                self.recorder.append((self.branch, i, x.shape[-2]))
            x = layer(x)
        return x

    def _layer_params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{self.branch}.layers.{i}."))
        return out


class TextEncoder(_Tower):
    branch = "text"

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.text_width
        self.token_embedding = Tensor(rng.normal(0.0, cfg.init_std, (cfg.vocab_size, d)))
        self.positional = Tensor(rng.normal(0.0, cfg.init_std, (cfg.max_text_len, d)))
        super().__init__(d, cfg, rng)
        self.ln_final_gamma = Tensor(np.ones(d))
        self.ln_final_beta = Tensor(np.zeros(d))
        self.proj = Tensor(rng.normal(0.0, cfg.init_std, (d, cfg.embed_dim)))
        self.vocab_size = cfg.vocab_size
        self.eos_token = cfg.eos_token
        self.max_len = cfg.max_text_len

    def embed(self, token_ids, offset: int = 0) -> Tensor:
        """Token plus positional embedding.

        ``token_ids`` is one sequence (-> N x d_t) or a 2-D batch of equal-length
        sequences (-> B x N x d_t).  ``offset`` shifts the positional rows, which
        lets a block of ``offset`` prompt vectors sit in front of the tokens.
        """
        ids = np.asarray(token_ids)
        if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
            raise InvalidInputError("token_ids must be a non-empty sequence or batch of sequences")
        if not np.issubdtype(ids.dtype, np.integer):
            raise VocabularyError(f"token ids must be integers, got dtype {ids.dtype}")
        bad = ids[(ids < 0) | (ids >= self.vocab_size)]
        if bad.size:
            raise VocabularyError(f"token id {int(bad[0])} outside vocabulary of size {self.vocab_size}")
        if np.any(ids[..., -1] != self.eos_token):
            raise InvalidInputError(f"sequence must end with the eos token {self.eos_token}")
        n = ids.shape[-1]
        if offset < 0 or offset + n > self.max_len:
            raise ShapeError(f"positions {offset}..{offset + n - 1} exceed max_text_len {self.max_len}")
        return self.token_embedding[ids] + self.positional[offset:offset + n]

    def encode(self, W: Tensor, before_layer: LayerHook | None = None) -> Tensor:
        """Run the Transformer and project the eos (last) position into the shared space."""
        if W.ndim not in (2, 3) or W.shape[-1] != self.width or W.shape[-2] < 1:
            raise ShapeError(f"expected (..., N, {self.width}) text input, got {W.shape}")
        x = self.run_layers(W, before_layer)
        eos = layer_norm(x[..., -1, :], self.ln_final_gamma, self.ln_final_beta)
        return eos @ self.proj if eos.ndim == 2 else (eos.reshape(1, -1) @ self.proj).reshape(-1)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"text.token_embedding": self.token_embedding, "text.positional": self.positional}
        out.update(self._layer_params())
        out.update({"text.ln_final.gamma": self.ln_final_gamma, "text.ln_final.beta": self.ln_final_beta,
                    "text.proj": self.proj})
        return out


class ImageEncoder(_Tower):
    branch = "image"

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.vision_width
        self.patch_proj = Tensor(rng.normal(0.0, cfg.init_std, (cfg.patch_dim, d)))
        self.class_embedding = Tensor(rng.normal(0.0, cfg.init_std, (d,)))
        self.positional = Tensor(rng.normal(0.0, cfg.init_std, (cfg.patches + 1, d)))
        super().__init__(d, cfg, rng)
        self.ln_post_gamma = Tensor(np.ones(d))
        self.ln_post_beta = Tensor(np.zeros(d))
        self.proj = Tensor(rng.normal(0.0, cfg.init_std, (d, cfg.embed_dim)))
        self.patches = cfg.patches
        self.patch_dim = cfg.patch_dim

    def embed(self, raw_patches) -> tuple[Tensor, Tensor]:
        """Return ``(c_0, P_0)`` for one image (M x p) or a batch (B x M x p)."""
        raw = np.asarray(raw_patches.data if isinstance(raw_patches, Tensor) else raw_patches,
                         dtype=np.float64)
        if raw.ndim not in (2, 3) or raw.shape[-2:] != (self.patches, self.patch_dim):
            raise ShapeError(f"expected (..., {self.patches}, {self.patch_dim}) patches, got {raw.shape}")
        P0 = Tensor(raw) @ self.patch_proj + self.positional[1:]
        c0 = self.class_embedding + self.positional[0]
        if raw.ndim == 3:
            c0 = broadcast_to(c0, (raw.shape[0], self.width))
        return c0, P0

    def encode_sequence(self, x: Tensor, before_layer: LayerHook | None = None) -> Tensor:
        """Run the Transformer on ``[c, ..., patches]`` and project position 0."""
        x = self.run_layers(x, before_layer)
        cls = layer_norm(x[..., 0, :], self.ln_post_gamma, self.ln_post_beta)
        return cls @ self.proj if cls.ndim == 2 else (cls.reshape(1, -1) @ self.proj).reshape(-1)

    def encode(self, c0: Tensor, P0: Tensor) -> Tensor:
        if c0.shape[-1] != self.width or P0.shape[-1] != self.width or P0.shape[:-2] != c0.shape[:-1]:
            raise ShapeError(f"class token {c0.shape} and patches {P0.shape} are inconsistent")
        x = concat([c0.reshape(c0.shape[:-1] + (1, self.width)), P0], axis=-2)
        return self.encode_sequence(x)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"image.patch_proj": self.patch_proj, "image.class_embedding": self.class_embedding,
               "image.positional": self.positional}
        out.update(self._layer_params())
        out.update({"image.ln_post.gamma": self.ln_post_gamma, "image.ln_post.beta": self.ln_post_beta,
                    "image.proj": self.proj})
        return out


@dataclass
class BackboneSnapshot:
    content_hash: str
    params: dict[str, np.ndarray]

    def __eq__(self, other):
        if not isinstance(other, BackboneSnapshot):
            return NotImplemented
        return self.content_hash == other.content_hash and self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params)


class DualEncoder:
    """Text tower, image tower and the log-parameterized inverse temperature."""

    def __init__(self, cfg: BackboneConfig | None = None, seed: int = 0):
        self.config = (cfg or BackboneConfig()).validate()
        rng = np.random.default_rng(seed)
        self.text = TextEncoder(self.config, rng)
        self.image = ImageEncoder(self.config, rng)
        self.logit_scale = Tensor(math.log(1.0 / self.config.init_temperature))

    @property
    def temperature(self) -> float:
        return float(np.exp(-self.logit_scale.data))

    def clamp_temperature(self) -> None:
        self.logit_scale.data = np.clip(self.logit_scale.data, math.log(1.0 / TAU_MAX), math.log(1.0 / TAU_MIN))

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.text.named_parameters()
        out.update(self.image.named_parameters())
        out["logit_scale"] = self.logit_scale
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def content_hash(self) -> str:
        return checkpoint.content_hash({k: p.data for k, p in self.named_parameters().items()})

    def snapshot(self) -> BackboneSnapshot:
        state = self.state_dict()
        return BackboneSnapshot(checkpoint.content_hash(state), state)

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise CheckpointError(f"backbone parameter mismatch; missing={missing[:3]} extra={extra[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, path) -> str:
        return checkpoint.save(path, "backbone", self.state_dict(), {"config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "DualEncoder":
        params, meta, _ = checkpoint.load(path, kind="backbone")
        try:
            cfg = BackboneConfig(**meta["config"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"backbone checkpoint has no usable config: {exc}") from exc
        model = cls(cfg)
        model.load_state_dict(params)
        return model

    # convenience wrappers for the unprompted (zero-shot) path
    def encode_tokens(self, token_batch: Sequence[Sequence[int]]) -> Tensor:
        """Encode equal- or mixed-length token sequences; returns (B, d_c) in input order."""
        return encode_token_groups(self.text, token_batch)

    def encode_images(self, raw_patches) -> Tensor:
        c0, P0 = self.image.embed(raw_patches)
        return self.image.encode(c0, P0)


def encode_token_groups(text: TextEncoder, token_batch, encode_group=None) -> Tensor:
    """Batch sequences of equal length together and restore input order.

    ``encode_group(ids_2d) -> (B, d_c)`` defaults to plain embed + encode.
    """
    if encode_group is None:
        def encode_group(ids):
            return text.encode(text.embed(ids))
    seqs = [tuple(int(t) for t in s) for s in token_batch]
    if not seqs:
        raise InvalidInputError("no token sequences to encode")
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    if len(by_len) == 1:
        return encode_group(np.array(seqs, dtype=np.int64))
    parts, order = [], []
    for length in sorted(by_len):
        idx = by_len[length]
        parts.append(encode_group(np.array([seqs[i] for i in idx], dtype=np.int64)))
        order.extend(idx)
    stacked = concat(parts, axis=0)
    inverse = np.argsort(np.asarray(order))
    return stacked[inverse]
