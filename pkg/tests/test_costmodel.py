import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from merv.alignment import ProjectorConfig, count_projector_params
from merv.costmodel import (
    SystemConfig,
    llm_flops,
    paper_scale_config,
    pipeline_cost,
    pool_flops,
    projector_flops,
    projector_flops_breakdown,
)
from merv.encoders import DEFAULT_PROFILES, default_ensemble
from merv.fusion import FusionConfig

NAMES = ["languagebind", "dinov2", "vivit", "siglip"]
LB = DEFAULT_PROFILES["languagebind"]


def test_avg_pool_flops_match_reported():
    cfg = ProjectorConfig(h=8, w=8, d=4096)
    for t, reported in ((8, 2.10e6), (16, 4.19e6)):
        pool = projector_flops_breakdown(cfg, LB.retimed(t), t)["pool"]
        assert pool == t * 16 * 16 * 1024
        assert abs(pool - reported) / reported < 0.05


def test_pool_flops_trivial_case():
    assert pool_flops((1, 5, 7), (1, 1, 1), 1) == 35


def test_pool_flops_overlapping_windows():
    # 14 -> 8 windows [0,2) [1,4) [3,6) [5,7) [7,9) [8,11) [10,13) [12,14): 20 per axis
    assert pool_flops((1, 14, 14), (1, 8, 8), 1) == 20 * 20


def test_llm_flops_examples():
    assert llm_flops(0, 7e9) == 0
    assert llm_flops(1, 7e9) == 1.4e10
    assert llm_flops(4096, 7e9) == 4 * llm_flops(1024, 7e9)
    assert llm_flops(8, 10, attention_term=True, layers=2, width=4) > llm_flops(8, 10)


def test_strategy_ratio_at_full_scale():
    ca = pipeline_cost(paper_scale_config("cross_attn"))
    cs = pipeline_cost(paper_scale_config("concat_seq"))
    assert ca.llm_tokens == 1024 and cs.llm_tokens == 4096
    assert cs.stages["llm"].flops == 4 * ca.stages["llm"].flops
    assert 2.0 <= cs.total_flops / ca.total_flops <= 4.0


def test_strategy_ordering_at_full_scale():
    total = {s: pipeline_cost(paper_scale_config(s)) for s in ("cross_attn", "concat_seq", "concat_channel")}
    ch = total["concat_channel"]
    assert total["concat_seq"].total_flops > total["cross_attn"].total_flops
    assert total["cross_attn"].total_flops >= ch.total_flops - ch.stages["fusion"].flops


def test_dropping_an_encoder_changes_little():
    full = pipeline_cost(paper_scale_config()).total_flops
    for name in NAMES:
        rest = [n for n in NAMES if n != name]
        reduced = pipeline_cost(paper_scale_config(encoders=rest)).total_flops
        assert 0 < (full - reduced) / full < 0.15


def test_single_encoder_full_tokens_cost_more():
    merv = pipeline_cost(paper_scale_config()).total_flops
    for name in NAMES:
        single = pipeline_cost(paper_scale_config(encoders=[name], full_tokens=True))
        assert single.total_flops > merv


def test_zero_encoders_is_llm_only():
    r = pipeline_cost(SystemConfig(profiles=[], text_tokens=32))
    assert r.llm_tokens == 32
    assert r.total_flops == r.stages["llm"].flops == 2 * 32 * 7e9
    assert all(r.stages[s].flops == 0 for s in ("encoder", "projector", "fusion"))


@given(st.integers(0, 3), st.sampled_from(["cross_attn", "concat_seq", "learnable_weights", "fixed_mix"]),
       st.sampled_from(["avg2d", "avg3d", "attn_resampler", "conv3d"]))
def test_adding_an_encoder_never_decreases_a_stage(k, strategy, variant):
    def report(names):
        cfg = SystemConfig(
            profiles=default_ensemble(names),
            projector=ProjectorConfig(variant=variant, h=8, w=8, d=4096),
            fusion=FusionConfig(strategy),
        )
        return pipeline_cost(cfg)

    a, b = report(NAMES[:k]), report(NAMES[: k + 1])
    for s in a.stages:
        assert b.stages[s].params >= a.stages[s].params
        assert b.stages[s].flops >= a.stages[s].flops


@pytest.mark.parametrize("variant", ["avg2d", "avg3d", "attn_resampler", "conv2d", "conv3d"])
def test_report_consistency(variant):
    cfg = paper_scale_config()
    cfg.projector = ProjectorConfig(variant=variant, h=8, w=8, d=4096)
    r = pipeline_cost(cfg)
    assert r.stages["projector"].params == count_projector_params(cfg.projector, default_ensemble())
    assert r.stages["projector"].flops == projector_flops(cfg.projector, [p.retimed(16) for p in default_ensemble()], 16)
    assert r.total_flops == sum(s.flops for s in r.stages.values())
    assert r.total_params == sum(s.params for s in r.stages.values())
    assert all(s.flops >= 0 and s.params >= 0 for s in r.stages.values())


def test_report_serialization():
    r = pipeline_cost(paper_scale_config())
    d = json.loads(r.to_json())
    assert d["total"]["flops"] == r.total_flops
    assert set(d["stages"]) == {"encoder", "projector", "fusion", "llm"}
    table = r.to_table().splitlines()
    assert table[0].split() == ["stage", "params", "flops"]
    assert table[-2].startswith("total")
