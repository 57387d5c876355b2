"""Shared builders for the test-suite: tiny f64 models with every branch switched on."""

from __future__ import annotations

import numpy as np

from sidenet import autograd as ag
from sidenet.params import ParamStore
from sidenet.side import SideConfig, init_side_params, make_fusion_plan, side_forward
from sidenet.vit import ViTConfig, init_vit_params, vit_forward

F64 = np.float64


def randomize_zero_inits(store: ParamStore, rng, prefix: str = "side.", scale: float = 0.3) -> None:
    """Give every trainable tensor under ``prefix`` non-degenerate values.

    Zero-initialized residual branches make most upstream gradients vanish,
    which would let a broken backward slip through a finite-difference check.
    """
    for name, p in store.items():
        if name.startswith(prefix) and p.requires_grad:
            p.data[...] += rng.standard_normal(p.shape).astype(p.dtype) * scale


def tiny_setup(
    vit: ViTConfig | None = None,
    side: SideConfig | None = None,
    batch: int = 2,
    frames: int = 3,
    seed: int = 0,
    dtype=F64,
    randomize: bool = True,
):
    """(vit cfg, side cfg, store, frames array, backbone output) for a tiny model."""
    vit = vit or ViTConfig.tiny()
    side = side or SideConfig(layers=2, dim=16)
    rng = np.random.default_rng(seed)
    store = init_vit_params(vit, rng, dtype)
    store.update(init_side_params(side, vit, rng, dtype))
    if randomize:
        randomize_zero_inits(store, rng)
    x = rng.standard_normal((batch, frames, vit.in_chans, vit.image_size, vit.image_size)).astype(dtype)
    out = vit_forward(x, vit, store, make_fusion_plan(vit.layers, side.layers, side.fusion))
    return vit, side, store, x, out


def projection_loss(y: ag.Tensor, seed: int = 1) -> ag.Tensor:
    """A fixed random linear functional of ``y``: every output element matters."""
    w = np.random.default_rng(seed).standard_normal(y.shape).astype(y.dtype)
    return (y * ag.Tensor(w)).sum()


def side_loss_fn(vit, side, store, x, out, training=True):
    return lambda: projection_loss(side_forward(x, out, side, vit, store, training=training))


def walk_saved_bytes(tape: ag.Tape, params) -> int:
    """Independent recount of retained bytes: walk every node, resolve views to
    their owning buffer, skip parameter storage, count each buffer once."""

    def owner(a):
        while a.base is not None:
            a = a.base
        return a

    param_roots = {id(owner(p.data)) for p in params}
    seen = {}
    for node in tape.nodes:
        for item in node.saved:
            arr = owner(item.data if isinstance(item, ag.Tensor) else np.asarray(item))
            if id(arr) not in param_roots:
                seen[id(arr)] = arr.nbytes
    return sum(seen.values())
