"""Inference path from raw video to fused visual tokens."""
from dataclasses import dataclass

import numpy as np

from .alignment import Projector, plan_temporal_alignment, prefuse_all
from .encoders import encode, make_mock_encoder, uniform_sample_frames
from .fusion import Fuser, fuse


@dataclass
class Pipeline:
    encoders: list
    projector: Projector
    fuser: Fuser

    @property
    def names(self):
        return [e.profile.name for e in self.encoders]

    def encode(self, video):
        """Per-encoder feature grids, each encoder fed its own uniform frame sample."""
        return {
            e.profile.name: encode(e, uniform_sample_frames(video, e.profile.input_frames))
            for e in self.encoders
        }

    def tokens(self, video):
        return fuse(prefuse_all(self.encode(video), self.projector), self.fuser)

    def attention_weights(self, video):
        _, w = self.tokens(video)
        if w is None:
            raise ValueError(f"strategy {self.fuser.config.strategy!r} has no encoder weights")
        return w


def build_inference_pipeline(profiles, t, projector_cfg, fusion_cfg, seed=0, kinds=None):
    """Mock encoders retimed to ``t`` frames, plus freshly initialized projector and fuser."""
    plan = plan_temporal_alignment(profiles, t)
    kinds = kinds or {}
    encoders = [make_mock_encoder(p, seed, kinds.get(p.name)) for p in plan.profiles]
    projector = Projector(projector_cfg, list(plan.profiles))
    fuser = Fuser(fusion_cfg, len(encoders), projector_cfg.d)
    return Pipeline(encoders, projector, fuser)
