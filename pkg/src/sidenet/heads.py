"""Task heads, matching, losses and retrieval metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .params import ParamStore, xavier_uniform
from .vit import project

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)


@dataclass
class RecognitionOutput:
    representation: Tensor  # [B, d]
    logits: Tensor  # [B, num_classes]


def init_recognition_head(store: ParamStore, dim: int, num_classes: int, rng, dtype) -> None:
    store.add("side.head.weight", xavier_uniform(rng, dim, num_classes, dtype))
    store.add("side.head.bias", np.zeros(num_classes, dtype=dtype))


def init_retrieval_head(store: ParamStore, side_dim: int, vit_dim: int, dtype) -> None:
    # zero Up keeps the frozen backbone's frame embedding at init
    store.add("side.up.weight", np.zeros((side_dim, vit_dim), dtype=dtype))
    store.add("side.up.bias", np.zeros(vit_dim, dtype=dtype))
    store.add("side.logit_scale", np.asarray(LOGIT_SCALE_INIT, dtype=dtype))


def recognition_head(s_out: Tensor, store: ParamStore) -> RecognitionOutput:
    """Global average over T and N (exactly summed, so order-free), then a linear classifier."""
    rep = ag.exact_mean(s_out, axis=(1, 2))
    return RecognitionOutput(rep, ag.linear(rep, store["side.head.weight"], store["side.head.bias"]))


def retrieval_video_head(s_out: Tensor, z_out: Tensor, store: ParamStore) -> Tensor:
    """L2-normalized Proj(Up(mean_N s_out) + Z_out) -> [B, T, D_joint]."""
    frame = s_out.mean(axis=2)
    up = ag.linear(frame, store["side.up.weight"], store["side.up.bias"])
    return ag.l2_normalize(project(up + z_out, store))


def _pairwise_token_dots(text: Tensor, video: Tensor) -> Tensor:
    """text [Bt, L, E], video [Bv, T, E] -> [Bt, Bv, L, T]."""
    bt, l, e = text.shape
    bv, t, _ = video.shape
    return ag.matmul(text.reshape(bt, 1, l, e), video.transpose(0, 2, 1).reshape(1, bv, e, t))


def tokenwise_similarity(video: Tensor, text: Tensor) -> Tensor:
    """Symmetric max-mean token matching of one video [T, E] and one text [L, E]."""
    if video.shape[0] == 0 or text.shape[0] == 0:
        raise ContractError("token-wise matching needs at least one token on each side")
    t, e = video.shape
    l = text.shape[0]
    return similarity_matrix(video.reshape(1, t, e), text.reshape(1, l, e)).reshape(())


def similarity_matrix(video: Tensor, text: Tensor, mode: str = "tokenwise") -> Tensor:
    """sim[i, j] between text i and video j; rows are text queries.

    ``tokenwise``: 0.5 * (mean_l max_t <text_l, video_t> + mean_t max_l <video_t, text_l>).
    ``global``: cosine between mean-pooled, re-normalized video frames and the text's last token.
    Ties in the max go to the first index.
    """
    if mode == "tokenwise":
        dots = _pairwise_token_dots(text, video)
        t2v = dots.max(axis=3).mean(axis=2)
        v2t = dots.max(axis=2).mean(axis=2)
        return (t2v + v2t) * 0.5
    if mode == "global":
        v = ag.l2_normalize(video.mean(axis=1))
        eos = text[:, -1]
        return ag.matmul(eos, v.transpose(1, 0))
    raise ContractError(f"unknown matching mode {mode!r}")


def contrastive_loss(sim: Tensor, logit_scale) -> Tensor:
    """Symmetric InfoNCE: mean of row-wise and column-wise cross-entropy on exp(logit_scale) * sim.

    ``logit_scale`` is a log temperature, either a learnable Tensor or a float.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"contrastive loss needs a square similarity matrix, got {sim.shape}")
    b = sim.shape[0]
    if isinstance(logit_scale, Tensor):
        scale = ag.exp(logit_scale)
    else:
        scale = math.exp(float(logit_scale))
    logits = sim * scale
    diag = (np.arange(b), np.arange(b))
    rows = ag.log_softmax_lastdim(logits)[diag].mean()
    cols = ag.log_softmax_lastdim(logits.transpose(1, 0))[diag].mean()
    return (rows + cols) * -0.5


def label_smoothing_ce(logits: Tensor, targets, eps: float = 0.1) -> Tensor:
    """Cross-entropy against (1 - eps) * onehot + eps / K, averaged over the batch."""
    if not 0 <= eps < 1:
        raise ContractError(f"label smoothing must be in [0, 1), got {eps}")
    b, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (b,) or targets.min() < 0 or targets.max() >= k:
        raise ContractError(f"targets must be {b} class indices in [0, {k})")
    q = np.full((b, k), eps / k, dtype=logits.dtype)
    q[np.arange(b), targets] += 1 - eps
    return (ag.log_softmax_lastdim(logits) * Tensor(q)).sum() * (-1.0 / b)


def retrieval_ranks(sim: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row; equal scores at lower column index rank first."""
    sim = np.asarray(sim)
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)]
    better = (sim > diag[:, None]).sum(axis=1)
    cols = np.arange(n)
    ties_before = ((sim == diag[:, None]) & (cols[None, :] < cols[:, None])).sum(axis=1)
    return 1 + better + ties_before


def retrieval_metrics(sim) -> dict[str, float]:
    """R@1/5/10 (percent), median and mean rank of the ground truth on the diagonal."""
    sim = np.asarray(getattr(sim, "data", sim))
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"retrieval metrics need a square matrix, got {sim.shape}")
    ranks = retrieval_ranks(sim)
    return {
        "R@1": 100.0 * float(np.mean(ranks <= 1)),
        "R@5": 100.0 * float(np.mean(ranks <= 5)),
        "R@10": 100.0 * float(np.mean(ranks <= 10)),
        "MdR": float(np.median(ranks)),
        "MnR": float(np.mean(ranks)),
    }


def write_matrix_csv(path, matrix, header: Sequence[str] | None = None) -> None:
    m = np.asarray(getattr(matrix, "data", matrix))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header) if header else [f"col{j}" for j in range(m.shape[1])])
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def write_metrics_csv(path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(metrics))
        w.writerow([metrics[k] for k in metrics])
