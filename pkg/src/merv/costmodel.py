"""Parameter and FLOP accounting for each pipeline stage.

Conventions: a matmul of (m, k) by (k, n) costs ``2*m*k*n``; a mean over a
window of ``k`` values costs ``k`` (k-1 adds and one divide); a direct
convolution costs ``2 * output cells * kernel volume * d_in * d_out``.
Elementwise nonlinearities and normalizations are not counted.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .alignment import ProjectorConfig, count_projector_params, token_count
from .encoders import default_ensemble
from .fusion import FusionConfig

STAGES = ("encoder", "projector", "fusion", "llm")

LLAMA2_7B = {"params": 7e9, "layers": 32, "width": 4096}


def _window_sum(n_in, n_out):
    """Sum of adaptive-pool window sizes along one axis."""
    i = np.arange(n_out)
    return int(np.sum(((i + 1) * n_in + n_out - 1) // n_out - (i * n_in) // n_out))


def pool_flops(in_grid, out_grid, channels):
    total = channels
    for n_in, n_out in zip(in_grid, out_grid):
        total *= _window_sum(n_in, n_out)
    return total


def _resampler_flops(cfg, p, t):
    n, L, de = p.out_h * p.out_w, cfg.h * cfg.w, p.dim
    hidden = cfg.resampler_mlp_ratio * de
    per_frame = (
        2 * L * de * de  # queries
        + 2 * 2 * n * de * de  # keys and values
        + 2 * L * n * de  # scores
        + 2 * L * n * de  # weighted values
        + 2 * L * de * de  # output projection
        + 2 * L * de * hidden * 2  # MLP
    )
    return t * per_frame


def projector_flops_breakdown(cfg, profile, t):
    """FLOPs of one encoder's projector split into ``pool``, ``linear`` and ``other``."""
    p = profile
    de = p.dim
    ell = token_count(cfg, t)
    out = {"pool": 0, "linear": 2 * ell * de * cfg.d, "other": 0}
    if cfg.variant == "avg2d":
        out["pool"] = pool_flops((t, p.out_h, p.out_w), (t, cfg.h, cfg.w), de)
    elif cfg.variant == "avg3d":
        out["pool"] = pool_flops((t, p.out_h, p.out_w), (max(1, t // 2), cfg.h, cfg.w), de)
    elif cfg.variant == "attn_resampler":
        out["other"] = _resampler_flops(cfg, p, t)
    elif cfg.variant == "conv2d":
        pre = cfg.conv_blocks * 2 * t * p.out_h * p.out_w * 9 * de * de
        post = cfg.conv_blocks * 2 * t * cfg.h * cfg.w * 9 * de * de
        out["other"] = pre + post
        out["pool"] = pool_flops((t, p.out_h, p.out_w), (t, cfg.h, cfg.w), de)
    else:  # conv3d
        out["other"] = 2 * t * p.out_h * p.out_w * 18 * de * de
        out["pool"] = pool_flops((t, p.out_h, p.out_w), (t, cfg.h, cfg.w), de)
    return out


def projector_flops(cfg, profiles, t, include_linear=True):
    total = 0
    for p in profiles:
        b = projector_flops_breakdown(cfg, p, t)
        total += b["pool"] + b["other"] + (b["linear"] if include_linear else 0)
    return total


def llm_flops(n_tokens, n_params, attention_term=False, layers=LLAMA2_7B["layers"], width=LLAMA2_7B["width"]):
    """Dense forward cost ``2 * tokens * params``, optionally plus QK^T and AV."""
    flops = 2 * n_tokens * n_params
    if attention_term:
        flops += 4 * layers * n_tokens * n_tokens * width
    return flops


def fusion_cost(cfg, n, ell, d):
    """``(params, flops)`` of a fusion strategy over ``n`` encoders of ``(ell, d)`` tokens."""
    if n == 0:
        return 0, 0
    mixing = (2 * n - 1) * ell * d
    s = cfg.strategy
    if s == "cross_attn":
        return d, n * ell * d + 2 * n * d + 3 * n + mixing
    if s == "learnable_weights":
        return n, 3 * n + mixing
    if s == "fixed_mix":
        return 0, mixing
    if s == "concat_seq":
        return 0, 0
    hidden = cfg.mlp_hidden or d
    params = n * d * hidden + hidden + hidden * d + d
    return params, 2 * ell * n * d * hidden + 2 * ell * hidden * d + ell * (hidden + d)


def llm_tokens(strategy, n, ell, text_tokens=0):
    visual = 0 if n == 0 else (n * ell if strategy == "concat_seq" else ell)
    return visual + text_tokens


@dataclass
class SystemConfig:
    profiles: list = field(default_factory=default_ensemble)
    t: int = 16
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    llm_params: float = LLAMA2_7B["params"]
    llm_layers: int = LLAMA2_7B["layers"]
    llm_width: int = LLAMA2_7B["width"]
    text_tokens: int = 0
    attention_term: bool = False
    # feed every encoder token to the LLM with only the linear map (no pooling)
    full_tokens: bool = False


@dataclass
class StageCost:
    params: int = 0
    flops: int = 0


@dataclass
class CostReport:
    stages: dict
    llm_tokens: int = 0

    @property
    def total_params(self):
        return sum(s.params for s in self.stages.values())

    @property
    def total_flops(self):
        return sum(s.flops for s in self.stages.values())

    def to_dict(self):
        return {
            "stages": {k: {"params": int(v.params), "flops": int(v.flops)} for k, v in self.stages.items()},
            "total": {"params": int(self.total_params), "flops": int(self.total_flops)},
            "llm_tokens": int(self.llm_tokens),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        rows = [(k, v.params, v.flops) for k, v in self.stages.items()]
        rows.append(("total", self.total_params, self.total_flops))
        lines = [f"{'stage':<10} {'params':>16} {'flops':>22}"]
        lines += [f"{name:<10} {int(p):>16,d} {int(f):>22,d}" for name, p, f in rows]
        lines.append(f"{'llm tokens':<10} {self.llm_tokens:>16,d}")
        return "\n".join(lines) + "\n"


def pipeline_cost(cfg):
    profiles = [p.retimed(cfg.t) for p in cfg.profiles]
    n = len(profiles)
    enc = StageCost(
        params=sum(p.params for p in profiles),
        flops=int(round(sum(p.input_frames * p.flops_per_frame for p in profiles))),
    )
    pc = cfg.projector
    d = pc.d
    if cfg.full_tokens:
        if len({p.out_h * p.out_w for p in profiles}) > 1:
            raise ValueError("full-token mode needs encoders with equal token grids")
        ell = cfg.t * profiles[0].out_h * profiles[0].out_w if profiles else 0
        proj = StageCost(
            params=d * sum(p.dim for p in profiles),
            flops=sum(2 * ell * p.dim * d for p in profiles),
        )
    else:
        ell = token_count(pc, cfg.t)
        proj = StageCost(
            params=count_projector_params(pc, profiles),
            flops=projector_flops(pc, profiles, cfg.t),
        )
    fp, ff = fusion_cost(cfg.fusion, n, ell, d)
    tokens = llm_tokens(cfg.fusion.strategy, n, ell, cfg.text_tokens)
    llm = StageCost(
        params=int(cfg.llm_params),
        flops=int(llm_flops(tokens, cfg.llm_params, cfg.attention_term, cfg.llm_layers, cfg.llm_width)),
    )
    return CostReport(
        stages={"encoder": enc, "projector": proj, "fusion": StageCost(fp, ff), "llm": llm},
        llm_tokens=tokens,
    )


def paper_scale_config(strategy="cross_attn", encoders=None, **overrides):
    """Four encoders, t=16, 8x8 tokens per frame, d=4096, 7B-parameter LLM."""
    return SystemConfig(
        profiles=default_ensemble(encoders),
        t=16,
        projector=ProjectorConfig(variant="avg2d", h=8, w=8, d=4096),
        fusion=FusionConfig(strategy=strategy),
        **overrides,
    )
