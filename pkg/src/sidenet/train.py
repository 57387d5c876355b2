"""Training and evaluation harness for the recognition and retrieval arms."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config
from .data import VideoDataset, generate_synthetic_pairs, generate_synthetic_videos, load_clip_dir, vocabulary
from .errors import ConfigError, NumericalError
from .heads import (
    LOGIT_SCALE_MAX,
    contrastive_loss,
    init_recognition_head,
    init_retrieval_head,
    label_smoothing_ce,
    recognition_head,
    retrieval_metrics,
    retrieval_video_head,
    similarity_matrix,
)
from .optim import AdamWHyper, AdamWState, adamw_step, cosine_schedule
from .params import ParamStore
from .side import init_side_params, make_fusion_plan, side_forward
from .text import encode_text, init_text_params
from .vit import BackboneOutput, init_vit_params, project, vit_forward

log = logging.getLogger(__name__)


@dataclass
class Model:
    cfg: TrainConfig
    store: ParamStore

    @property
    def dtype(self):
        return ag.DTYPES[self.cfg.dtype]

    @property
    def plan(self) -> list[int]:
        return make_fusion_plan(self.cfg.vit.layers, self.cfg.side.layers, self.cfg.side.fusion)

    def backbone(self, frames: Tensor) -> BackboneOutput:
        return vit_forward(frames, self.cfg.vit, self.store, self.plan)

    def side(self, frames: Tensor, out: BackboneOutput, training: bool) -> Tensor:
        return side_forward(frames, out, self.cfg.side, self.cfg.vit, self.store, training)

    def logits(self, frames, training: bool) -> Tensor:
        frames = Tensor(frames, dtype=self.dtype)
        out = self.backbone(frames)
        s = self.side(frames, out, training)
        if self.cfg.head == "gap":
            return recognition_head(s, self.store).logits
        up = ag.linear(s.mean(axis=2), self.store["side.up.weight"], self.store["side.up.bias"])
        rep = (up + out.z_out).mean(axis=1)
        return ag.linear(rep, self.store["side.head.weight"], self.store["side.head.bias"])

    def video_embeddings(self, frames, training: bool) -> Tensor:
        frames = Tensor(frames, dtype=self.dtype)
        out = self.backbone(frames)
        return retrieval_video_head(self.side(frames, out, training), out.z_out, self.store)

    def frozen_video_embeddings(self, frames) -> Tensor:
        """Projected backbone [CLS] frame embeddings, the side network's starting point."""
        with ag.no_grad():
            out = self.backbone(Tensor(frames, dtype=self.dtype))
            return ag.l2_normalize(project(out.z_out, self.store))

    def text_embeddings(self, ids) -> Tensor:
        return encode_text(ids, self.cfg.text, self.store)

    def similarity(self, frames, ids, training: bool) -> Tensor:
        return similarity_matrix(self.video_embeddings(frames, training), self.text_embeddings(ids), self.cfg.matching)


def build_model(cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> Model:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dtype = ag.DTYPES[cfg.dtype]
    store = init_vit_params(cfg.vit, rng, dtype)
    if cfg.vit_checkpoint:
        store.load_state_dict(load_checkpoint(cfg.vit_checkpoint))
    store.update(init_side_params(cfg.side, cfg.vit, rng, dtype))
    if cfg.task == "recognition":
        head_in = cfg.side.dim if cfg.head == "gap" else cfg.vit.dim
        init_recognition_head(store, head_in, cfg.data.num_classes, rng, dtype)
        if cfg.head == "retrieval_style":
            store.add("side.up.weight", np.zeros((cfg.side.dim, cfg.vit.dim), dtype=dtype))
            store.add("side.up.bias", np.zeros(cfg.vit.dim, dtype=dtype))
    else:
        if cfg.text.vocab_size < len(vocabulary(cfg.data)):
            raise ConfigError(f"text.vocab_size {cfg.text.vocab_size} < synthetic vocabulary {len(vocabulary(cfg.data))}")
        init_retrieval_head(store, cfg.side.dim, cfg.vit.dim, dtype)
        store.update(init_text_params(cfg.text, cfg.vit.joint_dim, rng, dtype))
    return Model(cfg, store)


def make_data(cfg: TrainConfig, seed: Optional[int] = None) -> VideoDataset:
    if cfg.data_dir:
        return load_clip_dir(cfg.data_dir)
    seed = cfg.seed if seed is None else seed
    if cfg.task == "retrieval":
        return generate_synthetic_pairs(cfg.data, seed, cfg.num_pairs)
    return generate_synthetic_videos(cfg.data, seed)


# ---------------------------------------------------------------- evaluation


def _topk(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, logits.shape[1])
    # stable sort: earlier class wins ties
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return 100.0 * float(np.mean((order == labels[:, None]).any(axis=1)))


def evaluate_model(model: Model, data: VideoDataset, batch: int = 64) -> dict:
    """Eval-mode metrics: top-1/top-5 for recognition, R@k/MdR/MnR (text-to-video) for retrieval."""
    with ag.no_grad():
        if model.cfg.task == "recognition":
            logits = np.concatenate(
                [model.logits(data.videos[i : i + batch], training=False).data for i in range(0, len(data), batch)]
            )
            return {"top1": _topk(logits, data.labels, 1), "top5": _topk(logits, data.labels, 5)}
        if data.tokens is None:
            raise ConfigError("retrieval evaluation needs token sequences")
        video = ag.concat(
            [model.video_embeddings(data.videos[i : i + batch], training=False) for i in range(0, len(data), batch)], 0
        )
        text = model.text_embeddings(data.tokens)
        return retrieval_metrics(similarity_matrix(video, text, model.cfg.matching).data)


def load_model(cfg: TrainConfig, checkpoint_path) -> Model:
    """Model for ``cfg`` with every tensor taken from the checkpoint (strict name/shape match)."""
    model = build_model(cfg)
    model.store.load_state_dict(load_checkpoint(checkpoint_path), strict=True)
    return model


def evaluate(checkpoint_path, data: VideoDataset, cfg: TrainConfig) -> dict:
    return evaluate_model(load_model(cfg, checkpoint_path), data)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Model
    metrics: list = field(default_factory=list)
    best_path: Optional[Path] = None
    backbone_checksum_before: str = ""
    backbone_checksum_after: str = ""


def _first_nonfinite(store: ParamStore) -> str:
    # running statistics are written by the forward pass, so they are symptoms; report them last
    for name in sorted(store, key=lambda k: (k.endswith(("running_mean", "running_var")), k)):
        p = store[name]
        if not np.all(np.isfinite(p.data)):
            return name
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"{name}.grad"
    return "loss"


def _no_decay(store: ParamStore) -> set:
    return {k for k, p in store.items() if p.data.ndim < 2}


def _primary_metric(task: str, metrics: dict) -> float:
    return metrics["top1"] if task == "recognition" else metrics["R@1"]


def train(cfg: TrainConfig, data: Optional[VideoDataset] = None, out_dir=None) -> TrainResult:
    """Run ``optim.epochs`` epochs; one JSON metrics line per epoch, best checkpoint kept.

    With ``out_dir`` set, writes ``config.txt``, ``metrics.jsonl``, ``best.s4v``,
    ``last.s4v`` and ``summary.csv`` there.
    """
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, rng)
    store = model.store
    data = make_data(cfg) if data is None else data
    if cfg.task == "retrieval" and data.tokens is None:
        raise ConfigError("retrieval training needs token sequences")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        (out / "metrics.jsonl").write_text("")

    n = len(data)
    opt = cfg.optim
    per_epoch = math.ceil(n / opt.batch)
    total = opt.epochs * per_epoch
    warmup = opt.warmup_epochs * per_epoch
    hyper = AdamWHyper(lr=opt.lr, weight_decay=opt.weight_decay, betas=(opt.beta1, opt.beta2))
    state = AdamWState()
    trainable = list(store.trainable())
    no_decay = _no_decay(store)
    before = store.checksum("vit.")
    result = TrainResult(model, backbone_checksum_before=before)
    best = -math.inf
    step = 0
    step1_bytes = None

    for epoch in range(1, opt.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        lr = 0.0
        for start in range(0, n, opt.batch):
            idx = np.sort(perm[start : start + opt.batch])
            lr = cosine_schedule(step + 1, total, warmup, opt.lr)
            store.zero_grad()
            with ag.fresh_tape() as tape:
                if cfg.task == "recognition":
                    loss = label_smoothing_ce(model.logits(data.videos[idx], training=True), data.labels[idx], cfg.label_smoothing)
                else:
                    sim = model.similarity(data.videos[idx], data.tokens[idx], training=True)
                    loss = contrastive_loss(sim, store["side.logit_scale"])
                if step1_bytes is None:
                    step1_bytes = tape.saved_bytes
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"non-finite loss at step {step + 1}; first non-finite tensor: {_first_nonfinite(store)}")
                ag.backward(loss)
            bad = _first_nonfinite(store)
            if bad != "loss":
                raise NumericalError(f"non-finite values after backward at step {step + 1}: {bad}")
            adamw_step(trainable, state, hyper, lr=lr, no_decay=no_decay)
            if "side.logit_scale" in store:
                np.clip(store["side.logit_scale"].data, None, LOGIT_SCALE_MAX, out=store["side.logit_scale"].data)
            losses.append(loss.item())
            step += 1

        metrics = evaluate_model(model, data)
        record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": lr}
        record.update(metrics)
        record["saved_activation_bytes"] = int(step1_bytes)
        result.metrics.append(record)
        log.info("epoch %d: %s", epoch, record)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        score = _primary_metric(cfg.task, metrics)
        if score > best:
            best = score
            if out is not None:
                save_checkpoint(store.state_dict(), out / "best.s4v")
                result.best_path = out / "best.s4v"

    result.backbone_checksum_after = store.checksum("vit.")
    if out is not None:
        save_checkpoint(store.state_dict(), out / "last.s4v")
        final = result.metrics[-1]
        with open(out / "summary.csv", "w") as fh:
            fh.write(",".join(final) + "\n")
            fh.write(",".join(repr(final[k]) for k in final) + "\n")
    return result
