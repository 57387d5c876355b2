"""Synthetic motion clips whose classes differ only in temporal order.

The ``cross`` generator draws a red block sliding horizontally along one row
and a green block sliding vertically along one column. Each direction is
drawn independently; the class is ``2 * vertical_dir + horizontal_dir``. For a
given path the two directions visit the same positions, only in reverse, so
any statistic that ignores frame order (e.g. the time-averaged frame) carries
no class information. ``slide`` keeps only the red block (2 classes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError

GENERATORS = ("cross", "slide")
PAD, EOS = 0, 1
BASE_VOCAB = ["<pad>", "<eos>", "red", "green", "left", "right", "up", "down"]


@dataclass
class SyntheticVideoSpec:
    num_classes: int = 4
    clips_per_class: int = 16
    frames: int = 4
    height: int = 16
    width: int = 16
    generator: str = "cross"
    noise: float = 0.1
    block: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        expected = 4 if self.generator == "cross" else 2
        if self.num_classes != expected:
            raise ConfigError(f"generator {self.generator!r} defines {expected} classes, got {self.num_classes}")
        if self.frames < 2:
            raise ConfigError("motion needs at least 2 frames")
        if self.block > min(self.height, self.width) - (self.frames - 1):
            raise ConfigError("block too large to move one pixel per frame")
        if self.channels < 2:
            raise ConfigError("need at least 2 channels for the two block colors")


@dataclass
class VideoDataset:
    videos: np.ndarray  # [num, T, C, H, W]
    labels: np.ndarray  # [num]
    attributes: np.ndarray  # [num, 4] = horizontal dir, vertical dir, row band, column band
    tokens: Optional[np.ndarray] = None  # [num, L]
    vocab: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def vocabulary(spec: SyntheticVideoSpec) -> list[str]:
    rows = spec.height // spec.block
    cols = spec.width // spec.block
    return BASE_VOCAB + [f"row{i}" for i in range(rows)] + [f"col{j}" for j in range(cols)]


def _path(rng, length: int, block: int, frames: int, forward: bool) -> np.ndarray:
    max_step = (length - block) // (frames - 1)
    step = int(rng.integers(1, max_step + 1))
    start = int(rng.integers(0, length - block - step * (frames - 1) + 1))
    pos = start + step * np.arange(frames)
    return pos if forward else pos[::-1].copy()


def _render(spec: SyntheticVideoSpec, rng, h_dir: int, v_dir: int, row: int, col: int) -> np.ndarray:
    T, C, H, W, b = spec.frames, spec.channels, spec.height, spec.width, spec.block
    clip = (rng.standard_normal((T, C, H, W)) * spec.noise).astype(np.float32)
    xs = _path(rng, W, b, T, forward=bool(h_dir))
    y = row * b
    for t in range(T):
        clip[t, 0, y : y + b, xs[t] : xs[t] + b] += 1.0
    if spec.generator == "cross":
        ys = _path(rng, H, b, T, forward=bool(v_dir))
        x = col * b
        for t in range(T):
            clip[t, 1, ys[t] : ys[t] + b, x : x + b] += 1.0
    return clip


def _draw(spec: SyntheticVideoSpec, rng, attrs: np.ndarray) -> np.ndarray:
    return np.stack([_render(spec, rng, *map(int, a)) for a in attrs])


def generate_synthetic_videos(spec: SyntheticVideoSpec, seed: int) -> VideoDataset:
    """``clips_per_class`` clips per class, class-major order, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    rows, cols = spec.height // spec.block, spec.width // spec.block
    attrs = []
    for label in range(spec.num_classes):
        for _ in range(spec.clips_per_class):
            h_dir = label % 2
            v_dir = label // 2 if spec.generator == "cross" else 0
            attrs.append((h_dir, v_dir, int(rng.integers(rows)), int(rng.integers(cols))))
    attrs = np.asarray(attrs, dtype=np.int64)
    labels = np.repeat(np.arange(spec.num_classes), spec.clips_per_class)
    return VideoDataset(_draw(spec, rng, attrs), labels, attrs)


def caption_tokens(spec: SyntheticVideoSpec, attr) -> list[int]:
    vocab = vocabulary(spec)
    h_dir, v_dir, row, col = map(int, attr)
    words = ["red", "right" if h_dir else "left", f"row{row}"]
    if spec.generator == "cross":
        words += ["green", "down" if v_dir else "up", f"col{col}"]
    return [vocab.index(w) for w in words] + [EOS]


def generate_synthetic_pairs(spec: SyntheticVideoSpec, seed: int, num_pairs: int = 32) -> VideoDataset:
    """Clips with distinct attribute combinations, each paired with a caption token sequence.

    Captions read e.g. ``red right row2 green up col0 <eos>``.
    """
    rng = np.random.default_rng(seed)
    rows, cols = spec.height // spec.block, spec.width // spec.block
    vdirs = 2 if spec.generator == "cross" else 1
    vcols = cols if spec.generator == "cross" else 1
    combos = np.array([(h, v, r, c) for h in range(2) for v in range(vdirs) for r in range(rows) for c in range(vcols)])
    if num_pairs > len(combos):
        raise ConfigError(f"only {len(combos)} distinct captions available, asked for {num_pairs}")
    attrs = combos[np.sort(rng.choice(len(combos), size=num_pairs, replace=False))]
    labels = attrs[:, 1] * 2 + attrs[:, 0] if spec.generator == "cross" else attrs[:, 0]
    tokens = np.array([caption_tokens(spec, a) for a in attrs], dtype=np.int64)
    return VideoDataset(_draw(spec, rng, attrs), labels.astype(np.int64), attrs, tokens, vocabulary(spec))


def motion_statistic(clip: np.ndarray) -> tuple[int, int]:
    """Direction bits read from block centroids in the first and last frame (1 = right / down)."""

    def centroid(img, axis):
        w = np.clip(img, 0.5, None) - 0.5
        idx = np.arange(img.shape[axis])
        prof = w.sum(axis=1 - axis)
        return float((prof * idx).sum() / max(prof.sum(), 1e-9))

    dx = centroid(clip[-1, 0], 1) - centroid(clip[0, 0], 1)
    dy = centroid(clip[-1, 1], 0) - centroid(clip[0, 1], 0) if clip.shape[1] > 1 else 0.0
    return int(dx > 0), int(dy > 0)


def order_free_knn_accuracy(videos: np.ndarray, labels: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy on time-averaged frames, a frame-order-blind baseline."""
    feats = videos.mean(axis=1).reshape(len(videos), -1).astype(np.float64)
    sq = (feats**2).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2 * feats @ feats.T
    np.fill_diagonal(dist, np.inf)
    return float(np.mean(labels[np.argmin(dist, axis=1)] == labels))


# ---------------------------------------------------------------- clip directories


def save_clip_dir(ds: VideoDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        item = {"video": ds.videos[i], "label": np.asarray(ds.labels[i], dtype=np.float64),
                "attributes": ds.attributes[i].astype(np.float64)}
        if ds.tokens is not None:
            item["tokens"] = ds.tokens[i].astype(np.float64)
        save_checkpoint(item, root / f"clip_{i:05d}.s4v")


def load_clip_dir(root) -> VideoDataset:
    """Load a directory of per-clip archives written by :func:`save_clip_dir`."""
    files = sorted(p for p in Path(root).iterdir() if p.suffix == ".s4v")
    if not files:
        raise FileNotFoundError(f"no .s4v clips in {root}")
    items = [load_checkpoint(p) for p in files]
    videos = np.stack([it["video"] for it in items])
    labels = np.array([int(it["label"]) for it in items], dtype=np.int64)
    attrs = np.stack([it.get("attributes", np.zeros(4)) for it in items]).astype(np.int64)
    tokens = np.stack([it["tokens"] for it in items]).astype(np.int64) if "tokens" in items[0] else None
    return VideoDataset(videos, labels, attrs, tokens)
