"""Training-memory accounting for full fine-tuning, adapters and side-tuning.

Two routes that are meant to agree:

* ``measure_tape`` runs one real training step at desk scale and reads the
  saved-for-backward bytes off the tape.
* ``analytic_memory`` evaluates closed-form per-layer element counts derived
  from the saved-for-backward policy documented in :mod:`sidenet.autograd`.
  It assumes pre-norm backbones and ignores the few bytes of argmax indices.

Optimizer state is two moment buffers per trainable element; gradients take
one more copy of the trainable parameters.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .heads import init_recognition_head, label_smoothing_ce, recognition_head
from .params import ParamStore, xavier_uniform
from .side import SideConfig, init_side_params, make_fusion_plan, side_forward
from .vit import ViTConfig, encode_frames, init_vit_params, vit_forward

STRATEGIES = ("full_ft", "adapter", "side_tuning")
CSV_COLUMNS = (
    "strategy",
    "backbone",
    "layers",
    "dim",
    "batch",
    "frames",
    "activation_bytes",
    "trainable_params",
    "total_bytes",
)


@dataclass
class MemoryReport:
    strategy: str
    saved_activation_bytes: int
    parameter_bytes: int
    trainable_parameter_bytes: int
    optimizer_state_bytes: int
    trainable_params: int = 0

    @property
    def gradient_bytes(self) -> int:
        return self.trainable_parameter_bytes

    @property
    def total_training_bytes(self) -> int:
        return self.saved_activation_bytes + self.parameter_bytes + self.gradient_bytes + self.optimizer_state_bytes


@dataclass
class StrategyDescriptor:
    strategy: str
    backbone: ViTConfig
    side: Optional[SideConfig] = None
    adapter_dim: int = 64
    batch: int = 2
    frames: int = 4
    num_classes: int = 4
    dtype: str = "f32"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "side_tuning":
            if self.side is None:
                raise ConfigError("side_tuning needs a SideConfig")
            self.side.validate_against(self.backbone)

    @property
    def itemsize(self) -> int:
        return np.dtype(ag.DTYPES[self.dtype]).itemsize

    @property
    def backbone_name(self) -> str:
        b = self.backbone
        return f"vit-L{b.layers}-D{b.dim}-P{b.patch_size}-I{b.image_size}"

    @property
    def tunable_layers(self) -> int:
        return self.side.layers if self.strategy == "side_tuning" else self.backbone.layers

    @property
    def tunable_dim(self) -> int:
        if self.strategy == "side_tuning":
            return self.side.dim
        if self.strategy == "adapter":
            return self.adapter_dim
        return self.backbone.dim


# ---------------------------------------------------------------- measured route


def init_adapter_params(cfg: ViTConfig, r: int, rng, dtype) -> ParamStore:
    """Bottleneck MLP (D -> r -> D) after each backbone block."""
    store = ParamStore()
    for i in range(cfg.layers):
        store.add(f"adapter.blocks.{i}.down.weight", xavier_uniform(rng, cfg.dim, r, dtype))
        store.add(f"adapter.blocks.{i}.down.bias", np.zeros(r, dtype=dtype))
        store.add(f"adapter.blocks.{i}.up.weight", xavier_uniform(rng, r, cfg.dim, dtype))
        store.add(f"adapter.blocks.{i}.up.bias", np.zeros(cfg.dim, dtype=dtype))
    return store


def adapter_hook(store: ParamStore):
    def hook(i: int, x: Tensor) -> Tensor:
        pre = f"adapter.blocks.{i - 1}"
        h = ag.gelu(ag.linear(x, store[f"{pre}.down.weight"], store[f"{pre}.down.bias"]))
        return x + ag.linear(h, store[f"{pre}.up.weight"], store[f"{pre}.up.bias"])

    return hook


def build_training_step(desc: StrategyDescriptor, seed: int = 0) -> tuple[ParamStore, Callable[[], Tensor]]:
    """Parameters and a zero-argument loss closure for one desk-scale training step."""
    rng = np.random.default_rng(seed)
    dtype = ag.DTYPES[desc.dtype]
    vit = desc.backbone
    store = init_vit_params(vit, rng, dtype)
    frames = rng.standard_normal((desc.batch, desc.frames, vit.in_chans, vit.image_size, vit.image_size)).astype(dtype)
    labels = np.arange(desc.batch) % desc.num_classes

    if desc.strategy == "side_tuning":
        side = desc.side
        store.update(init_side_params(side, vit, rng, dtype))
        init_recognition_head(store, side.dim, desc.num_classes, rng, dtype)
        plan = make_fusion_plan(vit.layers, side.layers, side.fusion)

        def step():
            out = vit_forward(frames, vit, store, plan)
            s = side_forward(frames, out, side, vit, store, training=True)
            return label_smoothing_ce(recognition_head(s, store).logits, labels)

        return store, step

    if desc.strategy == "full_ft":
        for p in store.values():
            p.requires_grad = True
        hook = None
    else:
        store.update(init_adapter_params(vit, desc.adapter_dim, rng, dtype))
        hook = adapter_hook(store)
    store.add("baseline.head.weight", xavier_uniform(rng, vit.dim, desc.num_classes, dtype))
    store.add("baseline.head.bias", np.zeros(desc.num_classes, dtype=dtype))

    def step():
        out = encode_frames(Tensor(frames), vit, store, (), block_hook=hook)
        logits = ag.linear(out.z_out.mean(axis=1), store["baseline.head.weight"], store["baseline.head.bias"])
        return label_smoothing_ce(logits, labels)

    return store, step


def measure_tape(step: Callable[[], Tensor], store: ParamStore, strategy: str = "side_tuning", run_backward: bool = True) -> MemoryReport:
    """Run ``step`` on a fresh tape and report its exact saved-for-backward bytes."""
    with ag.fresh_tape() as tape:
        loss = step()
        saved = tape.saved_bytes
        if run_backward and loss.requires_grad:
            ag.backward(loss)
    trainable = store.nbytes(trainable_only=True)
    return MemoryReport(
        strategy=strategy,
        saved_activation_bytes=saved,
        parameter_bytes=store.nbytes(),
        trainable_parameter_bytes=trainable,
        optimizer_state_bytes=2 * trainable,
        trainable_params=store.count(trainable_only=True),
    )


def measure_strategy(desc: StrategyDescriptor, seed: int = 0) -> MemoryReport:
    store, step = build_training_step(desc, seed)
    return measure_tape(step, store, desc.strategy, run_backward=False)


# ---------------------------------------------------------------- analytic route


def _side_param_counts(desc: StrategyDescriptor) -> tuple[int, int]:
    """(trainable elements, frozen buffer elements) of side network + head."""
    vit, side = desc.backbone, desc.side
    d, D, h = side.dim, vit.dim, side.mlp_ratio * side.dim
    cin = vit.in_chans * vit.patch_size**2
    train = side.patch_embed_temporal_kernel * cin * d + d
    buffers = 0
    per = 2 * D + D * d + d  # fusion norm + down
    if side.cls_shift:
        per += D * d + d
    if side.temporal_module == "conv3d":
        per += 2 * d + (d * d + d) + 3 * d + (d * d + d)
        buffers += 2 * d * side.layers
    elif side.temporal_module == "temporal_attention":
        per += 2 * d + (3 * d * d + 3 * d) + (d * d + d)
    per += 2 * d + 4 * (d * d + d)  # attention
    per += 2 * d + (d * h + h) + (h * d + d)  # mlp
    buffers += 2 * d * side.layers
    train += side.layers * per + d * desc.num_classes + desc.num_classes
    return train, buffers


def _vit_param_count(vit: ViTConfig) -> int:
    D, hid = vit.dim, vit.dim * vit.mlp_ratio
    cin = vit.in_chans * vit.patch_size**2
    block = 4 * D + (3 * D * D + 3 * D) + (D * D + D) + (D * hid + hid) + (hid * D + D)
    return cin * D + D + (1 + vit.num_patches) * D + vit.layers * block + 2 * D + D * vit.joint_dim


def _vit_block_saved(vit: ViTConfig, frames: int, trainable_weights: bool) -> int:
    """Elements retained by one pre-norm backbone block on the gradient path."""
    D, s = vit.dim, vit.num_patches + 1
    tok = frames * s
    n = 9 * tok * D + 2 * tok + frames * vit.heads * s * s
    if trainable_weights:
        n += tok * D * (3 + vit.mlp_ratio)  # inputs of qkv, proj, fc1, fc2
    return n


def _side_layer_saved(desc: StrategyDescriptor, frames: int) -> int:
    vit, side = desc.backbone, desc.side
    d, D, n = side.dim, vit.dim, vit.num_patches
    hid = side.mlp_ratio * d
    tok = frames * n
    heads = side.num_heads
    total = 2 * tok * D  # fusion: normalized tap, norm output
    if side.temporal_module == "conv3d":
        total += 4 * tok * d + d
    elif side.temporal_module == "temporal_attention":
        total += 6 * tok * d + tok + desc.batch * n * heads * desc.frames**2
    s = n + 1 if side.cls_shift else n
    if side.cls_shift:
        total += 2 * frames * D + frames * s * d  # [CLS] norm/down inputs, concatenated keys/values
    total += 4 * tok * d + tok + 2 * frames * s * d + frames * heads * n * s
    total += 2 * tok * d + d + 2 * tok * hid
    return total


def analytic_memory(desc: StrategyDescriptor) -> MemoryReport:
    vit = desc.backbone
    B, T = desc.batch, desc.frames
    F = B * T
    D, K = vit.dim, desc.num_classes
    cin = vit.in_chans * vit.patch_size**2
    head_loss = 2 * B * K
    vit_params = _vit_param_count(vit)
    if desc.strategy == "side_tuning":
        acts = F * vit.num_patches * cin  # 3D patch-embed input
        acts += desc.side.layers * _side_layer_saved(desc, F)
        acts += B * desc.side.dim + head_loss
        trainable, buffers = _side_param_counts(desc)
        frozen = vit_params + buffers
    elif desc.strategy == "adapter":
        r = desc.adapter_dim
        tok = F * (vit.num_patches + 1)
        acts = (vit.layers - 1) * _vit_block_saved(vit, F, False)
        acts += vit.layers * (tok * D + 2 * tok * r)
        acts += F * D + F + B * D + head_loss
        trainable = vit.layers * (2 * D * r + r + D) + D * K + K
        frozen = vit_params
    else:
        acts = F * vit.num_patches * cin + vit.layers * _vit_block_saved(vit, F, True)
        acts += F * D + F + B * D + head_loss
        trainable = vit_params + D * K + K
        frozen = 0
    sz = desc.itemsize
    return MemoryReport(
        strategy=desc.strategy,
        saved_activation_bytes=acts * sz,
        parameter_bytes=(trainable + frozen) * sz,
        trainable_parameter_bytes=trainable * sz,
        optimizer_state_bytes=2 * trainable * sz,
        trainable_params=trainable,
    )


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonRow:
    descriptor: StrategyDescriptor
    report: MemoryReport

    def as_csv_row(self) -> dict:
        d = self.descriptor
        return {
            "strategy": d.strategy,
            "backbone": d.backbone_name,
            "layers": d.tunable_layers,
            "dim": d.tunable_dim,
            "batch": d.batch,
            "frames": d.frames,
            "activation_bytes": self.report.saved_activation_bytes,
            "trainable_params": self.report.trainable_params,
            "total_bytes": self.report.total_training_bytes,
        }


def compare_strategies(descs: Sequence[StrategyDescriptor], measured: bool = False) -> list[ComparisonRow]:
    """Reports for each descriptor, sorted by total training bytes (stable)."""
    if len(descs) < 2:
        raise ConfigError("compare_strategies needs at least two descriptors")
    fn = measure_strategy if measured else analytic_memory
    rows = [ComparisonRow(d, fn(d)) for d in descs]
    return sorted(rows, key=lambda r: r.report.total_training_bytes)


def comparison_csv(rows: Iterable[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_csv_row())
    return buf.getvalue()
