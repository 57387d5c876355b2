"""Small trainable text transformer for the retrieval arm."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .params import ParamStore, normal, xavier_uniform
from .vit import init_transformer_block, transformer_block


@dataclass
class TextConfig:
    vocab_size: int = 32
    width: int = 128
    layers: int = 2
    heads: int = 2
    max_len: int = 8

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"text width {self.width} not divisible by {self.heads} heads")


def init_text_params(cfg: TextConfig, embed_dim: int, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    store = ParamStore()
    store.add("text.token_embed", normal(rng, (cfg.vocab_size, cfg.width), 0.1, dtype))
    store.add("text.pos_embed", normal(rng, (cfg.max_len, cfg.width), 0.05, dtype))
    for i in range(cfg.layers):
        init_transformer_block(store, f"text.blocks.{i}", cfg.width, 4, rng, dtype, True)
    store.add("text.ln_final.weight", np.ones(cfg.width, dtype=dtype))
    store.add("text.ln_final.bias", np.zeros(cfg.width, dtype=dtype))
    store.add("text.proj", xavier_uniform(rng, cfg.width, embed_dim, dtype))
    return store


def encode_text(ids, cfg: TextConfig, store: ParamStore) -> Tensor:
    """Token ids [B, L] -> L2-normalized per-token embeddings [B, L, E]; the last token is end-of-sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] > cfg.max_len:
        raise ConfigError(f"token ids must be [B, L<={cfg.max_len}], got {ids.shape}")
    l = ids.shape[1]
    x = ag.embedding(store["text.token_embed"], ids) + store["text.pos_embed"][:l]
    for i in range(cfg.layers):
        x = transformer_block(x, store, f"text.blocks.{i}", cfg.heads)
    x = ag.layernorm(x, store["text.ln_final.weight"], store["text.ln_final.bias"])
    return ag.l2_normalize(ag.matmul(x, store["text.proj"]))
