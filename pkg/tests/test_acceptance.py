"""默认配置端到端：训练后的行为阈值。耗时数十分钟，用 -m "not slow" 跳过。"""
from __future__ import annotations

import json

import pytest

import pipeline
from eval_harness import StageTrace
from path_config import DEFAULT_CONFIG_PATH
from seed_config import load_config
from selftest import run_selftest


def test_selftest_passes(capsys):
    assert run_selftest()
    assert "✗" not in capsys.readouterr().out


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    cfg = load_config(DEFAULT_CONFIG_PATH).with_overrides(seed=0)
    layout = pipeline.RunLayout(tmp_path_factory.mktemp("default_run"))
    pipeline.run_all(cfg, layout)
    return cfg, layout, json.loads(layout.report.read_text())


def _last(layout, stage: str) -> dict[str, float]:
    trace = StageTrace.model_validate_json(layout.trace(stage).read_text())
    return trace.epochs[-1].metrics


@pytest.mark.slow
def test_backbones_pretrained(default_run):
    _, layout, _ = default_run
    assert _last(layout, "backbones_clip")["i2t_r@1"] >= 0.9
    assert _last(layout, "lm")["heldout_ppl"] <= 2.0


@pytest.mark.slow
def test_stage1_retrieval(default_run):
    _, layout, report = default_run
    assert report["causal_emb_i2t_r@1"] >= 0.6
    assert report["causal_emb_t2i_r@1"] >= 0.6
    losses = StageTrace.model_validate_json(layout.trace("qformer").read_text()).losses
    assert losses[0] > losses[1] > losses[2]


@pytest.mark.slow
def test_stage2_reconstruction(default_run):
    cfg, _, report = default_run
    assert report["codebook_rec_cosine"] >= 0.9
    assert report["codebook_gen_mse"] <= 0.05
    assert report["codebook_perplexity"] >= cfg.vq.codebook_size / 2


@pytest.mark.slow
def test_roundtrip_consistency(default_run):
    _, _, report = default_run
    assert report["roundtrip_mean"] >= 0.7


@pytest.mark.slow
def test_multimodal_behaviour(default_run):
    _, _, report = default_run
    assert report["caption_mean"] >= 0.7
    assert report["t2i_mean"] >= 0.6
