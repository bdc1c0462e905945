from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import pipeline  # noqa: E402
import tensor_core as tc  # noqa: E402
from selftest import tiny_config  # noqa: E402
from synth_data import default_vocab  # noqa: E402


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return tc.init_rng(1234)


@pytest.fixture
def vocab():
    return default_vocab()


@pytest.fixture
def f64():
    with tc.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """极小配置把全部阶段跑一遍（几秒级），供存档 / CLI / 评测测试共享"""
    cfg = tiny_config()
    layout = pipeline.RunLayout(tmp_path_factory.mktemp("tiny_run"))
    pipeline.run_all(cfg, layout)
    return cfg, layout


@pytest.fixture
def tiny_bundle(tiny_cfg, rng, vocab):
    from frozen_backbones import bundle_from_store, init_backbones

    return bundle_from_store(init_backbones(tiny_cfg.backbone, len(vocab), rng.child("bundle")), tiny_cfg.backbone)


@pytest.fixture
def tiny_tokenizer(tiny_cfg, rng, tiny_bundle):
    """未训练的完整分词器（随机参数），只用于形状 / 确定性 / 错误路径"""
    from causal_qformer import CausalQFormer, init_qformer
    from vq_codebook import Codebook, SeedTokenizer, init_stage2_params

    qformer = CausalQFormer(init_qformer(tiny_cfg, rng.child("qformer")), tiny_cfg)
    qformer.store.freeze()
    entries = rng.normal(0.0, 1.0, (tiny_cfg.vq.codebook_size, tiny_cfg.qformer.d))
    store = init_stage2_params(tiny_cfg, rng.child("vq"))
    return SeedTokenizer(tiny_bundle, qformer, Codebook.from_entries(entries), store, tiny_cfg)
