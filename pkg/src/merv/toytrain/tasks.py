"""Synthetic video question-answering tasks.

``temporal_direction``: a block slides left-to-right or right-to-left. Every
video is generated moving right and half are then reversed in time, so the
label is fixed by motion direction alone and the set of frames (hence any
order-blind summary of them) is identical across the two classes.

``spatial_pattern``: a static block striped horizontally or vertically with
period 2, aligned to a 4-pixel grid, so 4x4 patch means cannot tell the two
orientations apart while edge statistics can.

``mixed``: a moving striped block; the answer names both properties.
"""
from dataclasses import dataclass

import numpy as np

KINDS = ("temporal_direction", "spatial_pattern", "mixed")

VOCAB = ("<pad>", "<bos>", "ask_motion", "ask_pattern", "ask_both", "caption",
         "left_to_right", "right_to_left", "horizontal", "vertical", "<eos>")
TOK = {w: i for i, w in enumerate(VOCAB)}
PROMPTS = {"temporal_direction": "ask_motion", "spatial_pattern": "ask_pattern", "mixed": "ask_both"}
DIRECTION = ("left_to_right", "right_to_left")
PATTERN = ("horizontal", "vertical")


@dataclass
class SynthTask:
    kind: str
    videos: np.ndarray  # (n, T, H, W, 3) float32
    labels: np.ndarray  # (n, k) int, one column per answer word

    def __len__(self):
        return len(self.videos)

    def answers(self):
        """Answer token ids, (n, k + 1) including the closing ``<eos>``."""
        cols = []
        if self.kind in ("temporal_direction", "mixed"):
            cols.append(np.array([TOK[w] for w in DIRECTION])[self.labels[:, 0]])
        if self.kind in ("spatial_pattern", "mixed"):
            cols.append(np.array([TOK[w] for w in PATTERN])[self.labels[:, -1]])
        cols.append(np.full(len(self), TOK["<eos>"]))
        return np.stack(cols, axis=1)

    def prompt(self, stage="question"):
        return TOK["caption"] if stage == "caption" else TOK[PROMPTS[self.kind]]

    def reversed(self):
        """Time-reversed copy; motion labels flip, pattern labels do not."""
        labels = self.labels.copy()
        if self.kind in ("temporal_direction", "mixed"):
            labels[:, 0] = 1 - labels[:, 0]
        return SynthTask(self.kind, np.ascontiguousarray(self.videos[:, ::-1]), labels)

    def split(self, n_first):
        return (
            SynthTask(self.kind, self.videos[:n_first], self.labels[:n_first]),
            SynthTask(self.kind, self.videos[n_first:], self.labels[n_first:]),
        )


def _balanced(rng, n):
    return rng.permutation(np.arange(n) % 2)


def _background(rng, T, size):
    level = rng.uniform(0.0, 0.2)
    noise = rng.normal(0.0, 0.02, size=(T, size, size, 1))
    return np.clip(level + noise, 0.0, 1.0).repeat(3, axis=-1)


def _moving_block(rng, T, size, stripes=None):
    """Video of a block moving right, optionally striped; returns float array."""
    v = _background(rng, T, size)
    speed = int(rng.integers(2, 4))
    bw = int(rng.integers(4, 9))
    bh = int(rng.integers(6, 13))
    travel = speed * (T - 1)
    x0 = int(rng.integers(0, max(1, size - bw - travel + 1)))
    y0 = int(rng.integers(0, size - bh + 1))
    color = rng.uniform(0.4, 1.0, size=3)
    mask = _stripe_mask(bh, bw, stripes)
    for f in range(T):
        x = min(x0 + speed * f, size - bw)
        patch = v[f, y0 : y0 + bh, x : x + bw]
        patch[mask] = color
    return v


def _stripe_mask(h, w, stripes):
    mask = np.ones((h, w), dtype=bool)
    if stripes == 0:
        mask[1::2, :] = False
    elif stripes == 1:
        mask[:, 1::2] = False
    return mask


def _striped_block(rng, T, size, stripes):
    v = _background(rng, T, size)
    cells = size // 4
    bh = 4 * int(rng.integers(2, 4))
    bw = 4 * int(rng.integers(2, 4))
    y0 = 4 * int(rng.integers(0, cells - bh // 4 + 1))
    x0 = 4 * int(rng.integers(0, cells - bw // 4 + 1))
    color = rng.uniform(0.4, 1.0, size=3)
    mask = _stripe_mask(bh, bw, stripes)
    region = v[:, y0 : y0 + bh, x0 : x0 + bw]
    region[:, mask] = color
    return v


def make_synth_task(kind, n, seed, frames=8, size=32):
    if kind not in KINDS:
        raise ValueError(f"unknown task kind {kind!r}; choose from {KINDS}")
    if size % 4:
        raise ValueError("frame size must be a multiple of 4")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    videos = np.empty((n, frames, size, size, 3), dtype=np.float32)
    if kind == "temporal_direction":
        labels = _balanced(rng, n)[:, None]
        for i in range(n):
            v = _moving_block(rng, frames, size)
            videos[i] = v[::-1] if labels[i, 0] else v
    elif kind == "spatial_pattern":
        labels = _balanced(rng, n)[:, None]
        for i in range(n):
            videos[i] = _striped_block(rng, frames, size, int(labels[i, 0]))
    else:
        combo = rng.permutation(np.arange(n) % 4)
        labels = np.stack([combo // 2, combo % 2], axis=1)
        for i in range(n):
            v = _moving_block(rng, frames, size, stripes=int(labels[i, 1]))
            videos[i] = v[::-1] if labels[i, 0] else v
    return SynthTask(kind, videos, labels.astype(np.int64))
