"""Encoder geometry profiles and deterministic mock encoders.

The mock encoders stand in for pretrained backbones. Each one reduces a video
to a handful of per-tubelet pixel statistics and maps them to ``dim``
channels with a fixed random matrix, so the output grid has exactly the
geometry of the backbone it imitates.
"""
import os
import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import featio
from .errors import AlignmentError, DimensionError, FormatError
from .numerics import adaptive_avg_pool2d, adaptive_avg_pool3d

KINDS = ("spatial", "temporal", "language", "generic")


@dataclass(frozen=True)
class EncoderProfile:
    """Static description of one visual encoder.

    ``flops_per_frame`` follows the ViT rule 2 * params * tokens, where tokens
    counts the patch tokens attributable to one input frame.
    """

    name: str
    input_frames: int
    out_t: int
    out_h: int
    out_w: int
    dim: int
    latency_ms: float = 0.0
    flops_per_frame: float = 0.0
    params: int = 0
    kind: str = "generic"
    flexible_frames: bool = True

    def __post_init__(self):
        for field in ("input_frames", "out_t", "out_h", "out_w", "dim"):
            if getattr(self, field) < 1:
                raise DimensionError(f"{self.name}: {field} must be >= 1")
        if self.input_frames % self.out_t:
            raise DimensionError(
                f"{self.name}: {self.input_frames} input frames do not tile {self.out_t} output frames"
            )
        if self.latency_ms < 0 or self.flops_per_frame < 0 or self.params < 0:
            raise ValueError(f"{self.name}: costs must be nonnegative")
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def temporal_stride(self):
        return self.input_frames // self.out_t

    @property
    def grid(self):
        return (self.out_t, self.out_h, self.out_w, self.dim)

    def input_frames_for(self, t):
        """Input frame count that makes this encoder emit ``t`` frames."""
        if t < 1:
            raise AlignmentError(f"{self.name}: target t={t} must be >= 1")
        if not self.flexible_frames and t != self.out_t:
            raise AlignmentError(f"{self.name}: fixed at {self.out_t} output frames, cannot reach t={t}")
        return self.temporal_stride * t

    def retimed(self, t):
        return replace(self, input_frames=self.input_frames_for(t), out_t=t)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ViT-L/14 and ViT-B/16 towers at 224px; ViViT-B/16x2 sees 2-frame tubelets so
# each input frame carries half a 14x14 token grid.
DEFAULT_PROFILES = {
    "languagebind": EncoderProfile(
        "languagebind", 16, 16, 16, 16, 1024,
        latency_ms=30.0, flops_per_frame=2 * 303e6 * 257, params=303_000_000, kind="language",
    ),
    "dinov2": EncoderProfile(
        "dinov2", 16, 16, 16, 16, 1024,
        latency_ms=28.0, flops_per_frame=2 * 304e6 * 257, params=304_000_000, kind="spatial",
    ),
    "vivit": EncoderProfile(
        "vivit", 32, 16, 14, 14, 768,
        latency_ms=20.0, flops_per_frame=2 * 89e6 * 98, params=89_000_000, kind="temporal",
    ),
    "siglip": EncoderProfile(
        "siglip", 16, 16, 14, 14, 768,
        latency_ms=12.0, flops_per_frame=2 * 93e6 * 196, params=93_000_000, kind="language",
    ),
}

EXTRA_PROFILES = {
    # Hiera-B 16x224: 32x spatial and 2x temporal reduction
    "hiera": EncoderProfile(
        "hiera", 16, 8, 7, 7, 768,
        latency_ms=18.0, flops_per_frame=2 * 51e6 * 98, params=51_000_000, kind="temporal",
    ),
}


def default_ensemble(names=None):
    names = list(DEFAULT_PROFILES) if names is None else names
    out = []
    for n in names:
        if n in DEFAULT_PROFILES:
            out.append(DEFAULT_PROFILES[n])
        elif n in EXTRA_PROFILES:
            out.append(EXTRA_PROFILES[n])
        else:
            raise KeyError(f"unknown encoder profile {n!r}")
    return out


# ---------------------------------------------------------------- videos


def as_video(data):
    v = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if v.ndim != 4 or v.shape[-1] != 3 or min(v.shape[:3]) < 1:
        raise DimensionError(f"video must be (T, H, W, 3), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("video contains NaN or Inf")
    return v


def image_as_video(image, T):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {image.shape}")
    if T < 1:
        raise DimensionError("T must be >= 1")
    return as_video(np.repeat(image[None], T, axis=0))


def sample_indices(T, n):
    if n < 1:
        raise DimensionError("n must be >= 1")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    # round half up, not numpy's half-to-even
    return np.floor(np.arange(n) * (T - 1) / (n - 1) + 0.5).astype(np.int64)


def uniform_sample_frames(video, n):
    video = as_video(video)
    return np.ascontiguousarray(video[sample_indices(video.shape[0], n)])


def reverse_time(video):
    return np.ascontiguousarray(as_video(video)[::-1])


def load_video(path, frame_size=None):
    """Read a video from a container file or a directory of raw RGB8 frames.

    Raw frames are ``H*W*3`` bytes each and are read in sorted filename order;
    ``frame_size=(H, W)`` is required unless the frames are square.
    """
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if not n.startswith("."))
        if not names:
            raise FormatError(f"{path}: no frame files")
        frames = []
        for n in names:
            with open(os.path.join(path, n), "rb") as fh:
                raw = np.frombuffer(fh.read(), dtype=np.uint8)
            if frame_size is None:
                side = int(round((raw.size / 3) ** 0.5))
                if side * side * 3 != raw.size:
                    raise FormatError(f"{n}: {raw.size} bytes is not a square RGB frame; pass a frame size")
                H = W = side
            else:
                H, W = frame_size
            if raw.size != H * W * 3:
                raise FormatError(f"{n}: {raw.size} bytes, expected {H * W * 3}")
            frames.append(raw.reshape(H, W, 3))
        return as_video(np.stack(frames).astype(np.float32) / 255.0)
    arr = featio.read_feature(path)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise FormatError(f"{path}: video container must have shape (T, H, W, 3), got {arr.shape}")
    return as_video(arr)


# ---------------------------------------------------------------- encoders


def _luma(v):
    return v.mean(axis=-1)


def _edge_energy(y, axis):
    g = np.abs(np.diff(y, axis=axis))
    # repeat the last difference so the map keeps the frame size
    last = np.take(g, [-1], axis=axis) if g.shape[axis] else np.zeros_like(np.take(y, [0], axis=axis))
    return np.concatenate([g, last], axis=axis)


def _pool_pixels(maps, h, w):
    """Pool (T, H, W, c) pixel maps to the encoder grid (T, h, w, c)."""
    T, H, W, _ = maps.shape
    if h > H or w > W:
        raise DimensionError(f"frames of {H}x{W} pixels are smaller than the {h}x{w} grid")
    return adaptive_avg_pool2d(maps, h, w)


def _appearance_stats(v, h, w):
    """Per-frame [1, r, g, b, horizontal edge energy, vertical edge energy]."""
    y = _luma(v)
    maps = np.concatenate(
        [v, _edge_energy(y, 2)[..., None], _edge_energy(y, 1)[..., None]], axis=-1
    )
    pooled = _pool_pixels(maps, h, w)
    ones = np.ones(pooled.shape[:3] + (1,), dtype=pooled.dtype)
    return np.concatenate([ones, pooled], axis=-1)


def _motion_stats(v, h, w):
    """Per-frame [1, r, g, b, dr, dg, db, flow x, flow y].

    Flow is the per-cell least-squares brightness-constancy estimate, which
    has the same sign at the leading and trailing edge of a moving object.
    """
    T = v.shape[0]
    dv = np.gradient(v, axis=0) if T > 1 else np.zeros_like(v)
    y = _luma(v)
    it = _luma(dv)
    ix = np.gradient(y, axis=2)
    iy = np.gradient(y, axis=1)
    maps = np.stack([ix * it, iy * it, ix * ix, iy * iy], axis=-1)
    p = _pool_pixels(np.ascontiguousarray(maps), h, w).astype(np.float64)
    eps = 1e-3
    fx = -p[..., 0] / (p[..., 2] + eps)
    fy = -p[..., 1] / (p[..., 3] + eps)
    colors = _pool_pixels(np.ascontiguousarray(np.concatenate([v, dv], axis=-1)), h, w)
    ones = np.ones(colors.shape[:3] + (1,), dtype=np.float64)
    return np.concatenate([ones, colors, fx[..., None], fy[..., None]], axis=-1)


class MockEncoder:
    """Fixed random linear read-out of per-tubelet pixel statistics.

    ``spatial`` summarizes each frame independently and averages over the
    whole clip, so it is blind to frame order. ``temporal`` adds frame
    differences and motion moments per tubelet. ``language`` mixes tubelet
    appearance with a clip-level summary. ``generic`` is tubelet appearance.
    """

    N_STATS = {"spatial": 6, "generic": 6, "temporal": 9, "language": 11}

    def __init__(self, profile, seed, kind=None):
        self.profile = profile
        self.seed = int(seed)
        self.kind = profile.kind if kind is None else kind
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        rng = np.random.default_rng([self.seed, zlib.crc32(profile.name.encode())])
        n = self.N_STATS[self.kind]
        self.readout = (rng.standard_normal((n, profile.dim)) / np.sqrt(n)).astype(np.float32)

    def statistics(self, video):
        p = self.profile
        v = video.astype(np.float64)
        if self.kind == "temporal":
            s = _motion_stats(v, p.out_h, p.out_w)
        else:
            s = _appearance_stats(v, p.out_h, p.out_w).astype(np.float64)
        if self.kind == "spatial":
            s = np.broadcast_to(s.mean(axis=0, keepdims=True), (p.out_t,) + s.shape[1:])
            return np.ascontiguousarray(s)
        s = adaptive_avg_pool3d(np.ascontiguousarray(s), p.out_t, p.out_h, p.out_w)
        if self.kind == "language":
            clip = np.broadcast_to(s[..., 1:].mean(axis=(0, 1, 2)), s.shape[:3] + (5,))
            s = np.concatenate([s, clip], axis=-1)
        return s

    def __call__(self, video):
        return encode(self, video)


def make_mock_encoder(profile, seed, kind=None):
    return MockEncoder(profile, seed, kind)


def encode(encoder, video):
    video = as_video(video)
    p = encoder.profile
    if video.shape[0] != p.input_frames:
        raise AlignmentError(
            f"{p.name} expects {p.input_frames} frames, got {video.shape[0]}; resample first"
        )
    stats = encoder.statistics(video)
    feat = (stats.reshape(-1, stats.shape[-1]) @ encoder.readout.astype(np.float64)).astype(np.float32)
    return feat.reshape(p.grid)
