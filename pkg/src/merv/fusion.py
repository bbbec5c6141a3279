"""Fusion of projected encoder features into one visual token sequence.

The default strategy is a single-query cross-attention whose keys are the
per-encoder token means and whose values are the full token matrices, so the
output is a convex, input-dependent mixture of the encoders' features.
"""
import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import gelu, softmax, softmax_backward

STRATEGIES = ("cross_attn", "concat_seq", "concat_channel", "learnable_weights", "fixed_mix")


@dataclass
class FusionConfig:
    strategy: str = "cross_attn"
    seed: int = 0
    mlp_hidden: int | None = None
    fixed_weights: list | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy == "fixed_mix" and self.fixed_weights is not None:
            w = np.asarray(self.fixed_weights, dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
                raise ConfigError(f"fixed_mix weights must be nonnegative and sum to 1, got {self.fixed_weights}")

    def validate(self, n_encoders):
        if self.strategy == "fixed_mix" and self.fixed_weights is not None:
            if len(self.fixed_weights) != n_encoders:
                raise ConfigError(
                    f"{len(self.fixed_weights)} fixed weights for {n_encoders} encoders"
                )

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fusion fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class FusionState:
    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    output: np.ndarray
    weights: np.ndarray


def _stack(features):
    if len(features) == 0:
        raise DimensionError("fusion needs at least one encoder")
    shapes = {np.shape(x) for x in features}
    if len(shapes) != 1:
        raise DimensionError(f"features must share one (l, d) shape, got {sorted(shapes)}")
    X = np.stack([np.asarray(x) for x in features])
    if X.ndim != 3:
        raise DimensionError(f"features must be (l, d) matrices, got {X.shape[1:]}")
    return X


def cross_attend_state(Q, features):
    X = _stack(features)
    Q = np.asarray(Q, dtype=X.dtype).reshape(1, -1)
    d = X.shape[2]
    if Q.shape[1] != d:
        raise DimensionError(f"query width {Q.shape[1]} != feature width {d}")
    keys = X.mean(axis=1)
    weights = softmax((Q @ keys.T) / np.sqrt(d), axis=-1)[0]
    O = np.tensordot(weights, X, axes=1)
    return FusionState(query=Q, keys=keys, values=X, output=O, weights=weights)


def cross_attend(Q, features):
    """Return ``(O, weights)`` with ``O = softmax(Q K^T / sqrt(d)) X``.

    ``K`` holds each encoder's tokens averaged over the sequence axis.
    """
    s = cross_attend_state(Q, features)
    return s.output, s.weights


def cross_attend_backward(Q, features, grad_out):
    """Gradients of ``sum(grad_out * O)`` w.r.t. the query and each feature."""
    s = cross_attend_state(Q, features)
    X, w = s.values, s.weights
    n, ell, d = X.shape
    G = np.asarray(grad_out, dtype=X.dtype)
    dw = np.einsum("ld,eld->e", G, X)
    dlogit = softmax_backward(w, dw) / np.sqrt(d)
    dQ = (dlogit @ s.keys)[None, :]
    dX = w[:, None, None] * G[None] + (dlogit[:, None] * s.query / ell)[:, None, :]
    return dQ, list(dX)


def mix(weights, features):
    X = _stack(features)
    w = np.asarray(weights, dtype=X.dtype)
    if w.shape != (X.shape[0],):
        raise DimensionError(f"{w.shape[0] if w.ndim else 0} weights for {X.shape[0]} features")
    return np.tensordot(w, X, axes=1)


class Fuser:
    """A fusion strategy with its learnable parameters."""

    def __init__(self, config, n_encoders, d, params=None, dtype=np.float32):
        config.validate(n_encoders)
        self.config = config
        self.n = n_encoders
        self.d = d
        if params is None:
            rng = np.random.default_rng([config.seed, 0xF05E])
            params = {}
            if config.strategy == "cross_attn":
                params["Q"] = (rng.standard_normal((1, d)) / np.sqrt(d)).astype(dtype)
            elif config.strategy == "learnable_weights":
                params["logits"] = np.zeros(n_encoders, dtype=dtype)
            elif config.strategy == "concat_channel":
                hidden = config.mlp_hidden or d
                params["w1"] = (rng.standard_normal((n_encoders * d, hidden)) / np.sqrt(n_encoders * d)).astype(dtype)
                params["b1"] = np.zeros(hidden, dtype=dtype)
                params["w2"] = (rng.standard_normal((hidden, d)) / np.sqrt(hidden)).astype(dtype)
                params["b2"] = np.zeros(d, dtype=dtype)
        self.params = params

    @property
    def mix_weights(self):
        """Input-independent mixture weights, if the strategy has them."""
        if self.config.strategy == "learnable_weights":
            return softmax(self.params["logits"])
        if self.config.strategy == "fixed_mix":
            w = self.config.fixed_weights
            return np.full(self.n, 1.0 / self.n) if w is None else np.asarray(w, dtype=np.float64)
        return None

    def param_count(self):
        return int(sum(v.size for v in self.params.values()))


def fuse(features, fuser):
    """Fuse N (l, d) features into a token sequence; returns ``(tokens, weights)``.

    ``weights`` is the per-encoder mixture for the additive strategies and
    ``None`` for the concatenations.
    """
    X = _stack(features)
    if X.shape[0] != fuser.n or X.shape[2] != fuser.d:
        raise DimensionError(f"fuser built for {fuser.n} x (l, {fuser.d}), got {X.shape}")
    s = fuser.config.strategy
    if s == "cross_attn":
        return cross_attend(fuser.params["Q"], list(X))
    if s == "concat_seq":
        return X.reshape(-1, X.shape[2]), None
    if s == "concat_channel":
        P = fuser.params
        h = np.concatenate(list(X), axis=1)
        return gelu(h @ P["w1"] + P["b1"]) @ P["w2"] + P["b2"], None
    w = fuser.mix_weights
    return mix(w, list(X)), np.asarray(w, dtype=X.dtype)


# ---------------------------------------------------------------- analysis


def extract_attention_weights(videos, pipeline):
    """Cross-attention weights per video: ``{video_id: length-N array}``."""
    return {vid: np.asarray(pipeline.attention_weights(v)) for vid, v in videos.items()}


def weights_from_features(feature_sets, projector, fuser):
    """Same as :func:`extract_attention_weights` for precomputed encoder features."""
    from .alignment import prefuse_all

    out = {}
    for vid, feats in feature_sets.items():
        _, w = fuse(prefuse_all(feats, projector), fuser)
        out[vid] = w
    return out


def top_videos(table, encoder_index, k):
    """Video ids with the largest weight on one encoder, ties broken by id."""
    ranked = sorted(table, key=lambda vid: (-float(table[vid][encoder_index]), vid))
    return ranked[:k]


def weights_csv(table, encoder_names):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["video_id", *(f"w_{n}" for n in encoder_names), "argmax_encoder"])
    for vid in sorted(table):
        w = np.asarray(table[vid], dtype=np.float64)
        wr.writerow([vid, *(f"{x:.8f}" for x in w), encoder_names[int(np.argmax(w))]])
    return buf.getvalue()
