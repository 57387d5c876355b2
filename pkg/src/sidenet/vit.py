"""Frozen per-frame Vision Transformer that emits per-layer feature taps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .params import ParamStore, normal, xavier_uniform


@dataclass
class ViTConfig:
    image_size: int = 16
    patch_size: int = 8
    layers: int = 2
    dim: int = 32
    heads: int = 2
    mlp_ratio: int = 4
    norm_style: str = "pre"
    in_chans: int = 3
    embed_dim: int = 0  # joint-space width of the output projection; 0 means ``dim``

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError("ViT needs at least one layer")
        if self.norm_style not in ("pre", "post"):
            raise ConfigError(f"norm_style must be 'pre' or 'post', got {self.norm_style!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def joint_dim(self) -> int:
        return self.embed_dim or self.dim

    @classmethod
    def tiny(cls) -> "ViTConfig":
        return cls(image_size=16, patch_size=8, layers=2, dim=32, heads=2)

    @classmethod
    def small(cls) -> "ViTConfig":
        return cls(image_size=32, patch_size=8, layers=12, dim=192, heads=3)


@dataclass
class FeatureTap:
    layer_index: int
    cls: Tensor  # [B, T, D]
    patches: Tensor  # [B, T, N, D]


@dataclass
class BackboneOutput:
    taps: list
    z_out: Tensor  # [B, T, D]


# ---------------------------------------------------------------- parameters


def init_transformer_block(store: ParamStore, prefix: str, dim: int, mlp_ratio: int, rng, dtype, trainable: bool) -> None:
    hidden = dim * mlp_ratio
    std = 0.02
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}.weight", np.ones(dim, dtype=dtype), trainable)
        store.add(f"{prefix}.{ln}.bias", np.zeros(dim, dtype=dtype), trainable)
    store.add(f"{prefix}.attn.qkv.weight", xavier_uniform(rng, dim, 3 * dim, dtype), trainable)
    store.add(f"{prefix}.attn.qkv.bias", np.zeros(3 * dim, dtype=dtype), trainable)
    store.add(f"{prefix}.attn.proj.weight", xavier_uniform(rng, dim, dim, dtype), trainable)
    store.add(f"{prefix}.attn.proj.bias", np.zeros(dim, dtype=dtype), trainable)
    store.add(f"{prefix}.mlp.fc1.weight", xavier_uniform(rng, dim, hidden, dtype), trainable)
    store.add(f"{prefix}.mlp.fc1.bias", normal(rng, hidden, std, dtype), trainable)
    store.add(f"{prefix}.mlp.fc2.weight", xavier_uniform(rng, hidden, dim, dtype), trainable)
    store.add(f"{prefix}.mlp.fc2.bias", normal(rng, dim, std, dtype), trainable)


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Random stand-in for pre-trained weights; every entry is frozen."""
    store = ParamStore()
    d, p = cfg.dim, cfg.patch_size
    patch_in = cfg.in_chans * p * p
    store.add("vit.patch_embed.weight", xavier_uniform(rng, patch_in, d, dtype), False)
    store.add("vit.cls_token", normal(rng, d, 0.02 * math.sqrt(d), dtype), False)
    store.add("vit.pos_embed", normal(rng, (1 + cfg.num_patches, d), 0.5, dtype), False)
    for i in range(cfg.layers):
        init_transformer_block(store, f"vit.blocks.{i}", d, cfg.mlp_ratio, rng, dtype, False)
    store.add("vit.ln_post.weight", np.ones(d, dtype=dtype), False)
    store.add("vit.ln_post.bias", np.zeros(d, dtype=dtype), False)
    store.add("vit.proj", xavier_uniform(rng, d, cfg.joint_dim, dtype), False)
    return store


def vit_param_shapes(cfg: ViTConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_vit_params(cfg, np.random.default_rng(0)).items()}


# ---------------------------------------------------------------- building blocks


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Scaled dot-product attention. q: [..., Sq, D]; k, v: [..., Sk, D]."""
    *lead, sq, d = q.shape
    sk = k.shape[-2]
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(x, s):
        return x.reshape(*lead, s, heads, dh).transpose(perm)

    qh, kh, vh = split(q, sq), split(k, sk), split(v, sk)
    scores = ag.matmul(qh, kh.transpose(tuple(range(nl + 1)) + (nl + 2, nl + 1))) * (1.0 / math.sqrt(dh))
    weights = ag.softmax_lastdim(scores)
    out = ag.matmul(weights, vh).transpose(perm).reshape(*lead, sq, d)
    return (out, weights) if return_weights else out


def self_attention(x: Tensor, store: ParamStore, prefix: str, heads: int) -> Tensor:
    d = x.shape[-1]
    qkv = ag.linear(x, store[f"{prefix}.qkv.weight"], store[f"{prefix}.qkv.bias"])
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    out = multihead_attention(q, k, v, heads)
    return ag.linear(out, store[f"{prefix}.proj.weight"], store[f"{prefix}.proj.bias"])


def mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = ag.gelu(ag.linear(x, store[f"{prefix}.fc1.weight"], store[f"{prefix}.fc1.bias"]))
    return ag.linear(h, store[f"{prefix}.fc2.weight"], store[f"{prefix}.fc2.bias"])


def _ln(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return ag.layernorm(x, store[f"{prefix}.weight"], store[f"{prefix}.bias"])


def transformer_block(x: Tensor, store: ParamStore, prefix: str, heads: int, norm_style: str = "pre") -> Tensor:
    if norm_style == "pre":
        x = x + self_attention(_ln(x, store, f"{prefix}.ln1"), store, f"{prefix}.attn", heads)
        return x + mlp(_ln(x, store, f"{prefix}.ln2"), store, f"{prefix}.mlp")
    x = _ln(x + self_attention(x, store, f"{prefix}.attn", heads), store, f"{prefix}.ln1")
    return _ln(x + mlp(x, store, f"{prefix}.mlp"), store, f"{prefix}.ln2")


# ---------------------------------------------------------------- forward


def patchify(frames: Tensor, patch_size: int) -> Tensor:
    """[B, T, C, H, W] -> [B, T, N, C*P*P], patches in row-major order."""
    b, t, c, h, w = frames.shape
    p = patch_size
    x = frames.reshape(b, t, c, h // p, p, w // p, p)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, t, (h // p) * (w // p), c * p * p)


def _check_frames(frames: Tensor, cfg: ViTConfig) -> None:
    if frames.ndim != 5 or frames.shape[2] != cfg.in_chans or frames.shape[3:] != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"frames shape {frames.shape} does not match [B, T, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}]"
        )


def patch_embed_image(frames: Tensor, cfg: ViTConfig, store: ParamStore) -> Tensor:
    """Per-frame patch projection, prepended [CLS], plus positional embedding -> [B, T, 1+N, D]."""
    frames = ag.as_tensor(frames)
    _check_frames(frames, cfg)
    b, t = frames.shape[:2]
    x = ag.matmul(patchify(frames, cfg.patch_size), store["vit.patch_embed.weight"])
    cls = store["vit.cls_token"].reshape(1, 1, 1, cfg.dim) + Tensor(np.zeros((b, t, 1, cfg.dim), dtype=x.dtype))
    x = ag.concat([cls, x], axis=2)
    return x + store["vit.pos_embed"]


BlockHook = Callable[[int, Tensor], Tensor]


def encode_frames(
    frames: Tensor,
    cfg: ViTConfig,
    store: ParamStore,
    tap_layers: Iterable[int] = (),
    block_hook: Optional[BlockHook] = None,
) -> BackboneOutput:
    """Backbone forward without forcing no-grad; ``block_hook(i, x)`` may rewrite block i's output.

    Used directly only by baselines that put the backbone on the gradient path.
    """
    tap_layers = sorted(set(tap_layers))
    for i in tap_layers:
        if not 1 <= i <= cfg.layers:
            raise ConfigError(f"tap layer {i} outside 1..{cfg.layers}")
    x = patch_embed_image(frames, cfg, store)
    b, t, s, d = x.shape
    x = x.reshape(b * t, s, d)
    taps = []
    for i in range(1, cfg.layers + 1):
        x = transformer_block(x, store, f"vit.blocks.{i - 1}", cfg.heads, cfg.norm_style)
        if block_hook is not None:
            x = block_hook(i, x)
        if i in tap_layers:
            full = x.reshape(b, t, s, d)
            taps.append(FeatureTap(i, full[:, :, 0], full[:, :, 1:]))
    cls = x[:, 0].reshape(b, t, d)
    z_out = _ln(cls, store, "vit.ln_post")
    return BackboneOutput(taps, z_out)


def vit_forward(frames, cfg: ViTConfig, store: ParamStore, tap_layers: Iterable[int]) -> BackboneOutput:
    """Frozen backbone pass: records nothing on the tape; taps are constants."""
    with ag.no_grad():
        return encode_frames(ag.as_tensor(frames), cfg, store, tap_layers)


def project(z: Tensor, store: ParamStore) -> Tensor:
    """The backbone's output projection into the joint image-text space."""
    return ag.matmul(z, store["vit.proj"])
