"""Trainable low-dimensional spatial-temporal side network.

Block order per side layer: fuse the down-projected backbone patch tap, a
temporal module (depthwise-separable temporal convolution by default), spatial
self-attention whose keys/values include the frame-shifted backbone [CLS]
token, then an MLP. Every sub-block is residual and its last projection is
zero-initialized, so a freshly built network is the plain fusion cascade.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .params import ParamStore, normal, xavier_uniform
from .vit import BackboneOutput, FeatureTap, ViTConfig, multihead_attention, patchify

FUSION_STRATEGIES = ("top", "interval")
TEMPORAL_MODULES = ("conv3d", "temporal_attention", "none")


@dataclass
class SideConfig:
    layers: int = 2
    dim: int = 16
    fusion: str = "interval"
    heads: int = 0  # 0 -> max(1, dim // 64)
    temporal_module: str = "conv3d"
    cls_shift: bool = True
    patch_embed_temporal_kernel: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1:
            raise ConfigError("side layers and dim must be positive")
        if self.fusion not in FUSION_STRATEGIES:
            raise ConfigError(f"fusion must be one of {FUSION_STRATEGIES}, got {self.fusion!r}")
        if self.temporal_module not in TEMPORAL_MODULES:
            raise ConfigError(f"temporal_module must be one of {TEMPORAL_MODULES}, got {self.temporal_module!r}")
        if self.patch_embed_temporal_kernel < 1 or self.patch_embed_temporal_kernel % 2 == 0:
            raise ConfigError("patch_embed_temporal_kernel must be a positive odd number")
        if self.dim % self.num_heads:
            raise ConfigError(f"side dim {self.dim} not divisible by {self.num_heads} heads")

    @property
    def num_heads(self) -> int:
        return self.heads or max(1, self.dim // 64)

    def validate_against(self, vit: ViTConfig) -> None:
        if self.layers > vit.layers:
            raise ConfigError(f"side layers {self.layers} exceed backbone layers {vit.layers}")
        if self.dim > vit.dim:
            raise ConfigError(f"side dim {self.dim} exceeds backbone dim {vit.dim}")


def make_fusion_plan(backbone_layers: int, side_layers: int, strategy: str) -> list[int]:
    """Backbone layer (1-based) feeding each side layer.

    ``interval`` takes layer ceil(i*L/l) for i = 1..l; ``top`` takes the last l layers.
    """
    L, l = backbone_layers, side_layers
    if not 1 <= l <= L:
        raise ConfigError(f"side layers {l} must lie in 1..{L}")
    if strategy == "interval":
        return [-(-i * L // l) for i in range(1, l + 1)]
    if strategy == "top":
        return list(range(L - l + 1, L + 1))
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


# ---------------------------------------------------------------- parameters


def init_side_params(cfg: SideConfig, vit: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    cfg.validate_against(vit)
    store = ParamStore()
    d, D = cfg.dim, vit.dim
    kt = cfg.patch_embed_temporal_kernel
    patch_in = vit.in_chans * vit.patch_size**2
    store.add("side.patch_embed.weight", normal(rng, (kt, patch_in, d), 1.0 / math.sqrt(kt * patch_in), dtype))
    store.add("side.patch_embed.bias", np.zeros(d, dtype=dtype))
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.layers):
        pre = f"side.blocks.{i}"
        store.add(f"{pre}.fuse.norm.weight", np.ones(D, dtype=dtype))
        store.add(f"{pre}.fuse.norm.bias", np.zeros(D, dtype=dtype))
        store.add(f"{pre}.fuse.down.weight", xavier_uniform(rng, D, d, dtype))
        store.add(f"{pre}.fuse.down.bias", np.zeros(d, dtype=dtype))
        if cfg.cls_shift:
            store.add(f"{pre}.fuse.down_cls.weight", xavier_uniform(rng, D, d, dtype))
            store.add(f"{pre}.fuse.down_cls.bias", np.zeros(d, dtype=dtype))
        if cfg.temporal_module == "conv3d":
            store.add_batchnorm(f"{pre}.temporal.bn", d, dtype)
            store.add(f"{pre}.temporal.pw1.weight", xavier_uniform(rng, d, d, dtype))
            store.add(f"{pre}.temporal.pw1.bias", np.zeros(d, dtype=dtype))
            dw = np.zeros((d, 3), dtype=dtype)
            dw[:, 1] = 1.0
            dw += normal(rng, (d, 3), 0.1, dtype)
            store.add(f"{pre}.temporal.dw.weight", dw)
            store.add(f"{pre}.temporal.pw2.weight", np.zeros((d, d), dtype=dtype))
            store.add(f"{pre}.temporal.pw2.bias", np.zeros(d, dtype=dtype))
        elif cfg.temporal_module == "temporal_attention":
            store.add(f"{pre}.temporal.ln.weight", np.ones(d, dtype=dtype))
            store.add(f"{pre}.temporal.ln.bias", np.zeros(d, dtype=dtype))
            store.add(f"{pre}.temporal.qkv.weight", xavier_uniform(rng, d, 3 * d, dtype))
            store.add(f"{pre}.temporal.qkv.bias", np.zeros(3 * d, dtype=dtype))
            store.add(f"{pre}.temporal.out.weight", np.zeros((d, d), dtype=dtype))
            store.add(f"{pre}.temporal.out.bias", np.zeros(d, dtype=dtype))
        store.add(f"{pre}.attn.ln.weight", np.ones(d, dtype=dtype))
        store.add(f"{pre}.attn.ln.bias", np.zeros(d, dtype=dtype))
        for name in ("q", "k", "v"):
            store.add(f"{pre}.attn.{name}.weight", xavier_uniform(rng, d, d, dtype))
            store.add(f"{pre}.attn.{name}.bias", np.zeros(d, dtype=dtype))
        store.add(f"{pre}.attn.out.weight", np.zeros((d, d), dtype=dtype))
        store.add(f"{pre}.attn.out.bias", np.zeros(d, dtype=dtype))
        store.add_batchnorm(f"{pre}.mlp.bn", d, dtype)
        store.add(f"{pre}.mlp.fc1.weight", xavier_uniform(rng, d, hidden, dtype))
        store.add(f"{pre}.mlp.fc1.bias", np.zeros(hidden, dtype=dtype))
        store.add(f"{pre}.mlp.fc2.weight", np.zeros((hidden, d), dtype=dtype))
        store.add(f"{pre}.mlp.fc2.bias", np.zeros(d, dtype=dtype))
    return store


# ---------------------------------------------------------------- operations


def side_patch_embed(frames, vit: ViTConfig, store: ParamStore) -> Tensor:
    """3D patch embedding (kernel k_t x P x P, stride 1 x P x P, temporal zero pad) -> [B, T, N, d].

    No [CLS] slot is produced.
    """
    frames = ag.as_tensor(frames)
    if frames.ndim != 5 or frames.shape[3:] != (vit.image_size, vit.image_size):
        raise ConfigError(f"frames shape {frames.shape} does not match image_size {vit.image_size}")
    with ag.no_grad():
        patches = patchify(frames, vit.patch_size)
    return ag.conv_temporal(patches, store["side.patch_embed.weight"]) + store["side.patch_embed.bias"]


def fuse(tap: FeatureTap, s_prev: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """s_in = s_prev + Down(Norm(tap.patches))."""
    if tap.patches.shape[:3] != s_prev.shape[:3]:
        raise ConfigError(f"tap patches {tap.patches.shape} do not align with side state {s_prev.shape}")
    z = ag.layernorm(tap.patches, store[f"{prefix}.norm.weight"], store[f"{prefix}.norm.bias"])
    z = ag.linear(z, store[f"{prefix}.down.weight"], store[f"{prefix}.down.bias"])
    return s_prev + z


def shift_cls(cls: Tensor) -> Tensor:
    """Move the first ceil(D/2) channels forward one frame and the rest backward one frame."""
    return ag.shift_frames(ag.as_tensor(cls))


def temporal_conv_block(s: Tensor, store: ParamStore, prefix: str, training: bool) -> Tensor:
    """s + PW2(DW_t(PW1(BN(s))))."""
    h = ag.batchnorm3d(s, store[f"{prefix}.bn.weight"], store[f"{prefix}.bn.bias"], store.bn_state(f"{prefix}.bn"), training)
    h = ag.linear(h, store[f"{prefix}.pw1.weight"], store[f"{prefix}.pw1.bias"])
    h = ag.conv_temporal_depthwise(h, store[f"{prefix}.dw.weight"])
    h = ag.linear(h, store[f"{prefix}.pw2.weight"], store[f"{prefix}.pw2.bias"])
    return s + h


def temporal_attention_block(s: Tensor, store: ParamStore, prefix: str, heads: int, return_weights: bool = False):
    """Residual self-attention along T at each spatial location."""
    b, t, n, d = s.shape
    x = s.transpose(0, 2, 1, 3)  # [B, N, T, d]
    h = ag.layernorm(x, store[f"{prefix}.ln.weight"], store[f"{prefix}.ln.bias"])
    qkv = ag.linear(h, store[f"{prefix}.qkv.weight"], store[f"{prefix}.qkv.bias"])
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    out, weights = multihead_attention(q, k, v, heads, return_weights=True)
    out = ag.linear(out, store[f"{prefix}.out.weight"], store[f"{prefix}.out.bias"])
    res = s + out.transpose(0, 2, 1, 3)
    return (res, weights) if return_weights else res


def shifted_cls_token(tap_cls: Tensor, store: ParamStore, fuse_prefix: str) -> Tensor:
    """Down_cls(Norm(shift_cls(cls))) -> [B, T, d]; Norm is the layer's fusion norm."""
    c = ag.layernorm(shift_cls(tap_cls), store[f"{fuse_prefix}.norm.weight"], store[f"{fuse_prefix}.norm.bias"])
    return ag.linear(c, store[f"{fuse_prefix}.down_cls.weight"], store[f"{fuse_prefix}.down_cls.bias"])


def shifted_attention_block(
    s: Tensor,
    cls_token: Optional[Tensor],
    store: ParamStore,
    prefix: str,
    heads: int,
    return_weights: bool = False,
):
    """Residual per-frame spatial attention; ``cls_token`` ([B, T, d]) is appended to keys/values.

    Queries are the N patch tokens; keys/values are N tokens, or N+1 with the
    shifted [CLS] token.
    """
    h = ag.layernorm(s, store[f"{prefix}.ln.weight"], store[f"{prefix}.ln.bias"])
    kv_in = h
    if cls_token is not None:
        b, t, _, d = s.shape
        kv_in = ag.concat([h, cls_token.reshape(b, t, 1, d)], axis=2)
    q = ag.linear(h, store[f"{prefix}.q.weight"], store[f"{prefix}.q.bias"])
    k = ag.linear(kv_in, store[f"{prefix}.k.weight"], store[f"{prefix}.k.bias"])
    v = ag.linear(kv_in, store[f"{prefix}.v.weight"], store[f"{prefix}.v.bias"])
    out, weights = multihead_attention(q, k, v, heads, return_weights=True)
    res = s + ag.linear(out, store[f"{prefix}.out.weight"], store[f"{prefix}.out.bias"])
    return (res, weights) if return_weights else res


def mlp_block(s: Tensor, store: ParamStore, prefix: str, training: bool) -> Tensor:
    """s + W2(GELU(W1(BN(s))))."""
    h = ag.batchnorm3d(s, store[f"{prefix}.bn.weight"], store[f"{prefix}.bn.bias"], store.bn_state(f"{prefix}.bn"), training)
    h = ag.gelu(ag.linear(h, store[f"{prefix}.fc1.weight"], store[f"{prefix}.fc1.bias"]))
    return s + ag.linear(h, store[f"{prefix}.fc2.weight"], store[f"{prefix}.fc2.bias"])


def side_block(s: Tensor, tap: FeatureTap, cfg: SideConfig, store: ParamStore, i: int, training: bool) -> Tensor:
    pre = f"side.blocks.{i}"
    s = fuse(tap, s, store, f"{pre}.fuse")
    if cfg.temporal_module == "conv3d":
        s = temporal_conv_block(s, store, f"{pre}.temporal", training)
    elif cfg.temporal_module == "temporal_attention":
        s = temporal_attention_block(s, store, f"{pre}.temporal", cfg.num_heads)
    cls_token = shifted_cls_token(tap.cls, store, f"{pre}.fuse") if cfg.cls_shift else None
    s = shifted_attention_block(s, cls_token, store, f"{pre}.attn", cfg.num_heads)
    return mlp_block(s, store, f"{pre}.mlp", training)


def side_forward(
    frames,
    backbone_out: BackboneOutput,
    cfg: SideConfig,
    vit: ViTConfig,
    store: ParamStore,
    training: bool = True,
) -> Tensor:
    """s_0 = 3D patch embed; each layer: fuse -> temporal -> shifted attention -> MLP. Returns s_out."""
    plan = make_fusion_plan(vit.layers, cfg.layers, cfg.fusion)
    got = [tap.layer_index for tap in backbone_out.taps]
    if got != plan:
        raise ConfigError(f"backbone taps {got} do not match fusion plan {plan}")
    s = side_patch_embed(frames, vit, store)
    for i, tap in enumerate(backbone_out.taps):
        s = side_block(s, tap, cfg, store, i, training)
    return s
