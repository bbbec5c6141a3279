"""Temporal alignment planning and pre-fusion projectors.

Every projector maps one encoder's (t, h_e, w_e, d_e) feature to an
(l, d) token matrix: ``x_e = flatten(P(v_e)) @ W_e`` where ``P`` is the
variant-specific spatial (or spatio-temporal) reduction and ``W_e`` is a
bias-free linear map to the language-model width ``d``.
"""
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import AlignmentError, ConfigError, DimensionError
from .numerics import (
    adaptive_avg_pool2d,
    adaptive_avg_pool3d,
    conv3d_simple,
    gelu,
    layer_norm,
    softmax,
)

VARIANTS = ("avg2d", "avg3d", "attn_resampler", "conv2d", "conv3d")


@dataclass(frozen=True)
class AlignmentPlan:
    t: int
    input_frames: dict
    profiles: tuple

    def __post_init__(self):
        for p in self.profiles:
            if p.out_t != self.t:
                raise AlignmentError(f"{p.name} emits {p.out_t} frames under a t={self.t} plan")


def plan_temporal_alignment(profiles, t):
    """Pick each encoder's input frame count so that all of them emit ``t`` frames."""
    retimed = []
    for p in profiles:
        try:
            retimed.append(p.retimed(t))
        except AlignmentError as exc:
            raise AlignmentError(f"encoder {p.name!r} cannot reach t={t}: {exc}") from None
    return AlignmentPlan(t=t, input_frames={p.name: p.input_frames for p in retimed}, profiles=tuple(retimed))


@dataclass
class ProjectorConfig:
    variant: str = "avg2d"
    h: int = 8
    w: int = 8
    d: int = 4096
    seed: int = 0
    # avg3d only: duplicate the halved frame axis back to t frames
    restore_frames: bool = False
    resampler_heads: int = 8
    resampler_mlp_ratio: int = 4
    # conv2d only: residual 3x3 blocks on each side of the pool
    conv_blocks: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown projector variant {self.variant!r}; choose from {VARIANTS}")
        if min(self.h, self.w, self.d) < 1:
            raise ConfigError("projector h, w and d must be >= 1")

    def validate(self, profiles):
        for p in profiles:
            if self.h > p.out_h or self.w > p.out_w:
                raise ConfigError(
                    f"projector grid {self.h}x{self.w} exceeds {p.name}'s {p.out_h}x{p.out_w} output"
                )
            if self.variant == "attn_resampler" and p.dim % self.resampler_heads:
                raise ConfigError(f"{p.name}: width {p.dim} not divisible by {self.resampler_heads} heads")

    def out_frames(self, t):
        if self.variant == "avg3d" and not self.restore_frames:
            return max(1, t // 2)
        return t

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown projector fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def token_count(cfg, t):
    """Visual tokens per encoder: ``t_out * h * w``."""
    return cfg.out_frames(t) * cfg.h * cfg.w


def _param_shapes(cfg, d_e):
    shapes = {"W": (d_e, cfg.d)}
    if cfg.variant == "attn_resampler":
        hidden = cfg.resampler_mlp_ratio * d_e
        shapes.update(
            latents=(cfg.h * cfg.w, d_e),
            ln_in_g=(d_e,), ln_in_b=(d_e,), ln_lat_g=(d_e,), ln_lat_b=(d_e,),
            wq=(d_e, d_e), wk=(d_e, d_e), wv=(d_e, d_e), wo=(d_e, d_e),
            ln_mlp_g=(d_e,), ln_mlp_b=(d_e,),
            w1=(d_e, hidden), b1=(hidden,), w2=(hidden, d_e), b2=(d_e,),
            ln_out_g=(d_e,), ln_out_b=(d_e,),
        )
    elif cfg.variant == "conv2d":
        for side in ("pre", "post"):
            for i in range(cfg.conv_blocks):
                shapes[f"{side}{i}_k"] = (1, 3, 3, d_e, d_e)
                shapes[f"{side}{i}_b"] = (d_e,)
    elif cfg.variant == "conv3d":
        shapes.update(conv_k=(2, 3, 3, d_e, d_e), conv_b=(d_e,))
    return shapes


def count_projector_params(cfg, profiles, include_linear=True):
    """Trainable projector parameters summed over the ensemble.

    ``include_linear=False`` counts only the reduction stage, i.e. everything
    except the per-encoder ``W_e`` maps.
    """
    total = 0
    for p in profiles:
        for name, shape in _param_shapes(cfg, p.dim).items():
            if name == "W" and not include_linear:
                continue
            total += int(np.prod(shape))
    return total


def _init_param(rng, name, shape, dtype):
    if name.endswith("_g"):
        return np.ones(shape, dtype=dtype)
    if name.endswith("_b") or name in ("b1", "b2"):
        return np.zeros(shape, dtype=dtype)
    if name == "latents":
        return (0.02 * rng.standard_normal(shape)).astype(dtype)
    fan_in = int(np.prod(shape[:-1]))
    scale = 1.0 / np.sqrt(fan_in)
    if name.endswith("_k") and name != "conv_k":
        # residual conv blocks start close to identity
        scale *= 0.1
    draw = rng.standard_normal(shape, dtype=np.float32 if dtype == np.float32 else np.float64)
    draw *= scale
    return draw.astype(dtype, copy=False)


class Projector:
    """A :class:`ProjectorConfig` plus its materialized per-encoder weights."""

    def __init__(self, config, profiles, params=None, dtype=np.float32):
        config.validate(profiles)
        self.config = config
        self.profiles = {p.name: p for p in profiles}
        if params is None:
            params = {}
            for p in profiles:
                rng = np.random.default_rng([config.seed, zlib.crc32(p.name.encode())])
                params[p.name] = {
                    k: _init_param(rng, k, s, dtype) for k, s in _param_shapes(config, p.dim).items()
                }
        self.params = params
        for p in profiles:
            expected = _param_shapes(config, p.dim)
            got = {k: tuple(v.shape) for k, v in params[p.name].items()}
            if got != expected:
                raise DimensionError(f"{p.name}: parameter shapes {got} != {expected}")

    def astype(self, dtype):
        params = {e: {k: v.astype(dtype) for k, v in ps.items()} for e, ps in self.params.items()}
        return Projector(self.config, list(self.profiles.values()), params)


def init_projector(cfg, profiles):
    return Projector(cfg, profiles)


def resampler_reduce(x, P, heads):
    t, he, we, de = x.shape
    dh = de // heads
    tokens = x.reshape(t, he * we, de)
    lat = P["latents"]
    xn = layer_norm(tokens, P["ln_in_g"], P["ln_in_b"])
    ln = layer_norm(lat, P["ln_lat_g"], P["ln_lat_b"])
    q = (ln @ P["wq"]).reshape(-1, heads, dh).transpose(1, 0, 2)  # (H, L, dh)
    k = (xn @ P["wk"]).reshape(t, -1, heads, dh).transpose(0, 2, 1, 3)  # (t, H, n, dh)
    v = (xn @ P["wv"]).reshape(t, -1, heads, dh).transpose(0, 2, 1, 3)
    attn = softmax(q[None] @ k.transpose(0, 1, 3, 2) / np.sqrt(dh), axis=-1)  # (t, H, L, n)
    o = (attn @ v).transpose(0, 2, 1, 3).reshape(t, -1, de) @ P["wo"]
    z = lat[None] + o
    m = layer_norm(z, P["ln_mlp_g"], P["ln_mlp_b"])
    z = z + gelu(m @ P["w1"] + P["b1"]) @ P["w2"] + P["b2"]
    return layer_norm(z, P["ln_out_g"], P["ln_out_b"])


def _conv_block(x, k, b):
    return x + gelu(conv3d_simple(x, k, padding=(0, 1, 1)) + b)


def reduce_feature(feature, cfg, P, heads=None):
    """Variant-specific reduction P(v_e): (t, h_e, w_e, d_e) -> (tokens, d_e)."""
    v = feature
    t = v.shape[0]
    if cfg.variant == "avg2d":
        r = adaptive_avg_pool2d(v, cfg.h, cfg.w)
    elif cfg.variant == "avg3d":
        r = adaptive_avg_pool3d(v, max(1, t // 2), cfg.h, cfg.w)
        if cfg.restore_frames:
            r = r[(np.arange(t) * r.shape[0]) // t]
    elif cfg.variant == "attn_resampler":
        return resampler_reduce(v, P, heads or cfg.resampler_heads).reshape(-1, v.shape[-1])
    elif cfg.variant == "conv2d":
        for i in range(cfg.conv_blocks):
            v = _conv_block(v, P[f"pre{i}_k"], P[f"pre{i}_b"])
        r = adaptive_avg_pool2d(v, cfg.h, cfg.w)
        for i in range(cfg.conv_blocks):
            r = _conv_block(r, P[f"post{i}_k"], P[f"post{i}_b"])
    else:  # conv3d
        v = conv3d_simple(v, P["conv_k"], padding=((0, 1), (1, 1), (1, 1))) + P["conv_b"]
        r = adaptive_avg_pool2d(v, cfg.h, cfg.w)
    return r.reshape(-1, r.shape[-1])


def prefuse(feature, projector, encoder):
    """Project one encoder's feature grid to (l, d) tokens."""
    p = projector.profiles[encoder]
    feature = np.asarray(feature)
    if feature.ndim != 4 or feature.shape[1:] != (p.out_h, p.out_w, p.dim):
        raise DimensionError(
            f"{encoder}: feature shape {feature.shape} does not match (t, {p.out_h}, {p.out_w}, {p.dim})"
        )
    P = projector.params[encoder]
    dtype = feature.dtype if feature.dtype in (np.float32, np.float64) else np.float32
    P = {k: v.astype(dtype, copy=False) for k, v in P.items()}
    reduced = reduce_feature(feature.astype(dtype, copy=False), projector.config, P)
    return reduced @ P["W"]


def prefuse_weight_grad(feature, projector, encoder, grad_out):
    """Gradient of ``sum(grad_out * prefuse(...))`` w.r.t. ``W_e``."""
    P = projector.params[encoder]
    dtype = np.asarray(grad_out).dtype
    P = {k: v.astype(dtype, copy=False) for k, v in P.items()}
    reduced = reduce_feature(np.asarray(feature, dtype=dtype), projector.config, P)
    return reduced.T @ grad_out


def worker_count():
    try:
        return max(1, int(os.environ.get("MERV_THREADS", "1")))
    except ValueError:
        raise ConfigError("MERV_THREADS must be an integer") from None


def prefuse_all(features, projector, threads=None):
    """Project every encoder's feature; output order follows ``features`` order.

    ``features`` maps encoder name to feature grid.
    """
    names = list(features)
    threads = worker_count() if threads is None else threads
    if threads <= 1 or len(names) == 1:
        out = [prefuse(features[n], projector, n) for n in names]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda n: prefuse(features[n], projector, n), names))
    shapes = {o.shape for o in out}
    if len(shapes) > 1:
        raise DimensionError(f"projected features disagree in shape: {sorted(shapes)}")
    return out
