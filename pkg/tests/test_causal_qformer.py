from __future__ import annotations

import math

import numpy as np
import pytest

import tensor_core as tc
from causal_qformer import CausalQFormer, causal_qformer_forward, contrastive_loss, contrastive_loss_from_similarity, init_qformer, train_stage1
from errors import ConfigurationError, EmptyInputError, MissingCheckpointError
from synth_data import build_corpus


@pytest.fixture
def qformer(tiny_cfg, rng):
    return CausalQFormer(init_qformer(tiny_cfg, rng), tiny_cfg)


def test_contrastive_loss_closed_forms(f64):
    sim = tc.constant(np.array([[10.0, -10.0], [-10.0, 10.0]]))
    assert contrastive_loss_from_similarity(sim, 1.0).item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-6)
    flat = tc.constant(np.full((4, 4), 0.3))
    assert contrastive_loss_from_similarity(flat, 0.07).item() == pytest.approx(math.log(4), rel=1e-9)


def test_single_pair_has_zero_loss(rng):
    img = tc.constant(rng.normal(0.0, 1.0, (1, 5)))
    txt = tc.constant(rng.normal(0.0, 1.0, (1, 5)))
    assert contrastive_loss(img, txt, 0.07).item() == pytest.approx(0.0, abs=1e-6)


def test_empty_batch_rejected():
    with pytest.raises(EmptyInputError):
        contrastive_loss(tc.constant(np.zeros((0, 3))), tc.constant(np.zeros((0, 3))), 1.0)


def test_loss_bounded_by_log_batch(rng):
    img = tc.constant(rng.normal(0.0, 1.0, (6, 4)))
    txt = tc.constant(rng.normal(0.0, 1.0, (6, 4)))
    loss = contrastive_loss(img, txt, 1.0).item()
    assert 0.0 <= loss <= math.log(6) + 2.0


def test_forward_shapes(qformer, tiny_cfg, rng):
    feats = rng.normal(0.0, 1.0, (16, tiny_cfg.backbone.d_v))
    out = causal_qformer_forward(feats, qformer)
    assert out.shape == (tiny_cfg.qformer.n_queries, tiny_cfg.qformer.d)
    batch = causal_qformer_forward(np.stack([feats, feats]), qformer)
    assert batch.shape == (2, tiny_cfg.qformer.n_queries, tiny_cfg.qformer.d)


def test_prefix_run_matches_full_run(qformer, tiny_cfg, rng):
    feats = rng.normal(0.0, 1.0, (3, 16, tiny_cfg.backbone.d_v))
    with tc.no_grad():
        full = qformer.forward(feats).data
        for k in range(1, tiny_cfg.qformer.n_queries):
            np.testing.assert_allclose(qformer.forward(feats, n_queries=k).data, full[:, :k], atol=1e-6)


def test_later_queries_do_not_affect_earlier_embeddings(qformer, tiny_cfg, rng):
    feats = rng.normal(0.0, 1.0, (2, 16, tiny_cfg.backbone.d_v))
    queries = qformer.store["qformer.queries"]
    with tc.no_grad():
        base = qformer.forward(feats).data
        queries.data[2:] += 1.0
        moved = qformer.forward(feats).data
    assert np.array_equal(base[:, :2], moved[:, :2])
    assert not np.array_equal(base[:, 2:], moved[:, 2:])


def test_earlier_outputs_have_zero_gradient_wrt_later_queries(tiny_cfg, rng, f64):
    qformer = CausalQFormer(init_qformer(tiny_cfg, rng), tiny_cfg)
    feats = tc.constant(rng.normal(0.0, 1.0, (1, 16, tiny_cfg.backbone.d_v)))
    queries = qformer.store["qformer.queries"]
    out = qformer.forward(feats)
    tc.tsum(out[:, :2]).backward()
    assert np.all(queries.grad[2:] == 0.0)
    assert np.any(queries.grad[:2] != 0.0)


def test_retrieval_vector_is_unit(qformer, tiny_cfg, rng):
    emb = tc.constant(rng.normal(0.0, 1.0, (3, tiny_cfg.qformer.n_queries, tiny_cfg.qformer.d)))
    vec = qformer.retrieval_vector(emb).data
    assert vec.shape == (3, tiny_cfg.backbone.d_txt)
    np.testing.assert_allclose(np.linalg.norm(vec, axis=1), 1.0, rtol=1e-5)


def test_qformer_grad_check(tiny_cfg, rng, f64):
    qformer = CausalQFormer(init_qformer(tiny_cfg, rng), tiny_cfg)
    feats = tc.constant(rng.normal(0.0, 1.0, (2, 16, tiny_cfg.backbone.d_v)))
    txt = tc.constant(rng.normal(0.0, 1.0, (2, tiny_cfg.backbone.d_txt)))

    def loss():
        return contrastive_loss(qformer.retrieval_vector(qformer.forward(feats)), txt, qformer.temperature)

    report = tc.grad_check(loss, qformer.store, max_components=4, rng=rng)
    assert report.passed, report.max_rel_error


def test_train_stage1_keeps_backbones_frozen(tiny_cfg, tiny_bundle, rng):
    train, heldout = build_corpus(48, 8, 1, rng)
    before = tiny_bundle.digest()
    qformer, trace = train_stage1(train, tiny_bundle, tiny_cfg, rng, heldout)
    assert tiny_bundle.digest() == before
    assert len(trace.epochs) == tiny_cfg.qformer.optim.epochs
    assert "i2t_r@1" in trace.epochs[0].metrics
    assert not qformer.store.trainable()
    tau = float(qformer.temperature.data[0])
    assert tiny_cfg.qformer.tau_min <= tau <= tiny_cfg.qformer.tau_max


def test_train_stage1_requires_bundle(tiny_cfg, rng):
    train, _ = build_corpus(8, 2, 0, rng)
    with pytest.raises(MissingCheckpointError, match="vit"):
        train_stage1(train, None, tiny_cfg, rng)


def test_train_stage1_rejects_too_few_pairs(tiny_cfg, tiny_bundle, rng):
    train, _ = build_corpus(8, 2, 0, rng)
    with pytest.raises(ConfigurationError, match=r"train_stage1: need ≥ 16 pairs"):
        train_stage1(train, tiny_bundle, tiny_cfg, rng)
