"""Torch modules for the trainable pipeline.

Projector and fusion parameters are copied from their numpy counterparts so
both paths compute the same function; the decoder-only language model is a
small pre-norm transformer that reads the fused visual tokens as a prefix.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..alignment import Projector, ProjectorConfig
from ..errors import ConfigError
from ..fusion import FusionConfig, Fuser


@dataclass
class ToyLLMConfig:
    layers: int = 2
    d: int = 64
    heads: int = 4
    vocab: int = 11
    context: int = 80
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")

    def to_dict(self):
        return asdict(self)


def _gelu(x):
    return F.gelu(x, approximate="tanh")


def _layer_norm(x, g, b):
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


class TorchProjector(nn.Module):
    def __init__(self, projector: Projector):
        super().__init__()
        self.config = projector.config
        self.names = list(projector.profiles)
        self.params = nn.ModuleDict(
            {
                name: nn.ParameterDict(
                    {k: nn.Parameter(torch.from_numpy(np.array(v))) for k, v in projector.params[name].items()}
                )
                for name in self.names
            }
        )

    def _resampler(self, x, P):
        B, t, he, we, de = x.shape
        heads = self.config.resampler_heads
        dh = de // heads
        tokens = x.reshape(B * t, he * we, de)
        lat = P["latents"]
        xn = _layer_norm(tokens, P["ln_in_g"], P["ln_in_b"])
        ln = _layer_norm(lat, P["ln_lat_g"], P["ln_lat_b"])
        q = (ln @ P["wq"]).reshape(-1, heads, dh).transpose(0, 1)
        k = (xn @ P["wk"]).reshape(B * t, -1, heads, dh).transpose(1, 2)
        v = (xn @ P["wv"]).reshape(B * t, -1, heads, dh).transpose(1, 2)
        attn = torch.softmax(q.unsqueeze(0) @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        o = (attn @ v).transpose(1, 2).reshape(B * t, -1, de) @ P["wo"]
        z = lat.unsqueeze(0) + o
        m = _layer_norm(z, P["ln_mlp_g"], P["ln_mlp_b"])
        z = z + _gelu(m @ P["w1"] + P["b1"]) @ P["w2"] + P["b2"]
        z = _layer_norm(z, P["ln_out_g"], P["ln_out_b"])
        return z.reshape(B, -1, de)

    @staticmethod
    def _conv(x, k, pads):
        # x: (B, t, h, w, c) -> (B, c, t, h, w); kernel (kt, kh, kw, cin, cout) -> (cout, cin, kt, kh, kw)
        xc = x.permute(0, 4, 1, 2, 3)
        (t0, t1), (h0, h1), (w0, w1) = pads
        xc = F.pad(xc, (w0, w1, h0, h1, t0, t1))
        y = F.conv3d(xc, k.permute(4, 3, 0, 1, 2))
        return y.permute(0, 2, 3, 4, 1)

    def _block(self, x, k, b):
        return x + _gelu(self._conv(x, k, ((0, 0), (1, 1), (1, 1))) + b)

    @staticmethod
    def _pool(x, t, h, w):
        y = F.adaptive_avg_pool3d(x.permute(0, 4, 1, 2, 3), (t, h, w))
        return y.permute(0, 2, 3, 4, 1)

    def reduce(self, x, name):
        cfg = self.config
        P = self.params[name]
        B, t = x.shape[:2]
        de = x.shape[-1]
        if cfg.variant == "avg2d":
            r = self._pool(x, t, cfg.h, cfg.w)
        elif cfg.variant == "avg3d":
            r = self._pool(x, max(1, t // 2), cfg.h, cfg.w)
            if cfg.restore_frames:
                idx = torch.div(torch.arange(t) * r.shape[1], t, rounding_mode="floor")
                r = r[:, idx]
        elif cfg.variant == "attn_resampler":
            return self._resampler(x, P)
        elif cfg.variant == "conv2d":
            for i in range(cfg.conv_blocks):
                x = self._block(x, P[f"pre{i}_k"], P[f"pre{i}_b"])
            r = self._pool(x, t, cfg.h, cfg.w)
            for i in range(cfg.conv_blocks):
                r = self._block(r, P[f"post{i}_k"], P[f"post{i}_b"])
        else:
            v = self._conv(x, P["conv_k"], ((0, 1), (1, 1), (1, 1))) + P["conv_b"]
            r = self._pool(v, t, cfg.h, cfg.w)
        return r.reshape(B, -1, de)

    def forward(self, features):
        """``features``: list of (B, t, h_e, w_e, d_e) tensors in encoder order."""
        return [self.reduce(x, n) @ self.params[n]["W"] for x, n in zip(features, self.names)]


class TorchFusion(nn.Module):
    def __init__(self, fuser: Fuser):
        super().__init__()
        self.config = fuser.config
        self.n = fuser.n
        self.params = nn.ParameterDict(
            {k: nn.Parameter(torch.from_numpy(np.array(v))) for k, v in fuser.params.items()}
        )
        w = fuser.mix_weights if fuser.config.strategy == "fixed_mix" else None
        self.register_buffer("fixed", None if w is None else torch.as_tensor(np.asarray(w, dtype=np.float32)))

    def forward(self, xs):
        X = torch.stack(xs, dim=1)  # (B, N, l, d)
        B, N, ell, d = X.shape
        s = self.config.strategy
        if s == "cross_attn":
            keys = X.mean(dim=2)
            logits = (keys @ self.params["Q"].reshape(-1, 1)).squeeze(-1) / math.sqrt(d)
            w = torch.softmax(logits, dim=-1)
        elif s == "learnable_weights":
            w = torch.softmax(self.params["logits"], dim=0).expand(B, N)
        elif s == "fixed_mix":
            w = self.fixed.to(X.dtype).expand(B, N)
        elif s == "concat_seq":
            return X.reshape(B, N * ell, d), None
        else:
            P = self.params
            h = X.permute(0, 2, 1, 3).reshape(B, ell, N * d)
            return _gelu(h @ P["w1"] + P["b1"]) @ P["w2"] + P["b2"], None
        return torch.einsum("bn,bnld->bld", w, X), w


class Block(nn.Module):
    def __init__(self, d, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)

    def forward(self, x, mask):
        B, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (z.reshape(B, n, self.heads, dh).transpose(1, 2) for z in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = torch.softmax(att.masked_fill(mask, float("-inf")), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(B, n, d))
        return x + self.fc2(_gelu(self.fc1(self.ln2(x))))


class ToyLM(nn.Module):
    """Decoder-only LM that accepts a prefix of already-embedded visual tokens."""

    def __init__(self, cfg: ToyLLMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab, cfg.d)
        self.pos = nn.Embedding(cfg.context, cfg.d)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.d)
        self.head = nn.Linear(cfg.d, cfg.vocab)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
                if getattr(m, "bias", None) is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, prefix, tokens):
        x = torch.cat([prefix, self.tok(tokens)], dim=1)
        n = x.shape[1]
        if n > self.cfg.context:
            raise ConfigError(f"sequence of {n} exceeds context {self.cfg.context}")
        x = x + self.pos(torch.arange(n, device=x.device))
        mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(self.ln_f(x))


class ToyPipeline(nn.Module):
    """Projection, fusion and language model; encoders run outside (frozen)."""

    GROUPS = ("projector", "fusion", "llm")

    def __init__(self, projector: Projector, fuser: Fuser, llm_cfg: ToyLLMConfig):
        super().__init__()
        if projector.config.d != llm_cfg.d:
            raise ConfigError(f"projector width {projector.config.d} != LLM width {llm_cfg.d}")
        self.projector = TorchProjector(projector)
        self.fusion = TorchFusion(fuser)
        self.llm = ToyLM(llm_cfg)
        self.profiles = list(projector.profiles.values())

    @property
    def names(self):
        return self.projector.names

    def visual_tokens(self, features):
        return self.fusion(self.projector(features))

    def forward(self, features, tokens):
        """Return ``(logits, weights)``; logits cover prefix and text positions."""
        prefix, w = self.visual_tokens(features)
        return self.llm(prefix.to(self.llm.tok.weight.dtype), tokens), w

    def group(self, name):
        return getattr(self, name)

    def to_numpy_stages(self):
        """Rebuild numpy :class:`Projector` and :class:`Fuser` from current weights."""
        proj_params = {
            n: {k: p.detach().cpu().numpy().copy() for k, p in self.projector.params[n].items()}
            for n in self.names
        }
        projector = Projector(self.projector.config, self.profiles, proj_params)
        fuse_params = {k: p.detach().cpu().numpy().copy() for k, p in self.fusion.params.items()}
        fuser = Fuser(self.fusion.config, self.fusion.n, projector.config.d, fuse_params)
        return projector, fuser


def build_pipeline(profiles, projector_cfg: ProjectorConfig, fusion_cfg: FusionConfig, llm_cfg: ToyLLMConfig, seed=0):
    """Fresh trainable pipeline; every random draw derives from ``seed``."""
    torch.manual_seed(seed)
    projector = Projector(projector_cfg, list(profiles))
    fuser = Fuser(fusion_cfg, len(profiles), projector_cfg.d)
    return ToyPipeline(projector, fuser, llm_cfg)
