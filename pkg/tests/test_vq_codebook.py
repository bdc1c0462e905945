from __future__ import annotations

import logging

import numpy as np
import pytest

import tensor_core as tc
import vq_codebook as vq
from errors import CodeIndexError, ConfigurationError, NumericalError
from synth_data import SceneSpec, render_scene


@pytest.fixture
def unit_codebook():
    return vq.Codebook.from_entries(np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_quantize_examples(unit_codebook):
    idx, entry = vq.quantize(np.array([0.9, 0.1]), unit_codebook)
    assert idx == 0
    np.testing.assert_array_equal(entry, [1.0, 0.0])
    assert vq.quantize(np.array([0.5, 0.5]), unit_codebook)[0] == 0
    assert vq.quantize(np.array([0.1, 0.7]), unit_codebook)[0] == 1


def test_quantize_rejects_nan_and_width(unit_codebook):
    with pytest.raises(NumericalError):
        vq.quantize(np.array([np.nan, 0.0]), unit_codebook)
    with pytest.raises(ConfigurationError, match="quantize"):
        vq.quantize(np.zeros(3), unit_codebook)


def test_nearest_indices_match_exhaustive_scan(rng):
    entries = rng.normal(0.0, 1.0, (64, 8))
    vectors = rng.normal(0.0, 1.0, (1000, 8))
    expected = [min(range(64), key=lambda k: (float(np.sum((v - entries[k]) ** 2)), k)) for v in vectors]
    assert vq.nearest_indices(vectors, entries, chunk=128).tolist() == expected


def test_entries_quantize_to_themselves_and_duplicates_pick_first(rng):
    entries = rng.normal(0.0, 1.0, (16, 4))
    entries[9] = entries[3]
    idx = vq.nearest_indices(entries, entries)
    expected = list(range(16))
    expected[9] = 3
    assert idx.tolist() == expected


def test_cosine_metric_ignores_scale():
    entries = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert vq.nearest_indices(np.array([[0.0, 50.0], [3.0, 1.0]]), entries, "cosine").tolist() == [1, 0]


def test_codebook_rejects_bad_codes(unit_codebook):
    with pytest.raises(CodeIndexError):
        unit_codebook.lookup([0, 2])
    with pytest.raises(ConfigurationError):
        vq.Codebook.from_entries(np.zeros((1, 2)))


def test_ema_full_decay_leaves_codebook(unit_codebook, rng):
    new, stats = vq.ema_update(unit_codebook, rng.normal(0.0, 1.0, (5, 2)), np.zeros(5, dtype=int), 1.0)
    assert new.digest() == unit_codebook.digest()
    assert stats.reseeded == []


def test_ema_converges_to_repeated_vector(unit_codebook):
    v = np.array([[0.3, -2.0]] * 4)
    cb = unit_codebook
    for _ in range(300):
        cb, _ = vq.ema_update(cb, v, np.zeros(4, dtype=int), 0.9)
    np.testing.assert_allclose(cb.entries[0], v[0], atol=1e-4)


def test_ema_reseeds_unused_codes(rng):
    entries = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
    cb = vq.Codebook(entries.astype(np.float32), np.array([1.0, 1e-6, 1.0], np.float32), entries.astype(np.float32))
    vectors = rng.normal(0.0, 0.1, (8, 2))
    new, stats = vq.ema_update(cb, vectors, np.zeros(8, dtype=int), 0.99, rng=rng)
    assert stats.reseeded == [1]
    assert any(np.allclose(new.entries[1], v, atol=1e-6) for v in vectors)


def test_ema_without_rng_reports_unreseeded_codes(caplog):
    entries = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
    cb = vq.Codebook(entries.astype(np.float32), np.array([1.0, 1e-6, 1.0], np.float32), entries.astype(np.float32))
    with caplog.at_level(logging.WARNING, logger="vq_codebook"):
        new, stats = vq.ema_update(cb, np.zeros((4, 2)), np.zeros(4, dtype=int), 0.99)
    assert stats.reseeded == []
    assert stats.dead_skipped == [1]
    assert "not reseeded (no rng)" in caplog.text
    assert stats.usage[1] < 1e-3


def test_ema_rejects_bad_decay(unit_codebook):
    with pytest.raises(ConfigurationError, match="ema_update"):
        vq.ema_update(unit_codebook, np.zeros((1, 2)), np.zeros(1, dtype=int), 1.5)


def test_losses_vanish_on_targets(rng):
    x = tc.constant(rng.normal(0.0, 1.0, (2, 3, 4)))
    assert vq.rec_cos_loss(x, x.data).item() == pytest.approx(0.0, abs=1e-6)
    assert vq.gen_mse_loss(x, x.data).item() == 0.0
    assert vq.commit_loss(x, x.data).item() == 0.0


def test_losses_match_direct_formulas(rng, f64, tiny_cfg):
    a = rng.normal(0.0, 1.0, (2, 3))
    b = rng.normal(0.0, 1.0, (2, 3))
    cos = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    assert vq.rec_cos_loss(tc.constant(a), b).item() == pytest.approx(1.0 - cos.mean(), abs=1e-6)
    assert vq.gen_mse_loss(tc.constant(a), b).item() == pytest.approx(((a - b) ** 2).mean(), abs=1e-12)
    assert vq.commit_loss(tc.constant(a), b).item() == pytest.approx(((a - b) ** 2).sum(1).mean(), abs=1e-12)
    losses = vq.stage2_losses(tc.constant(a), b, tc.constant(a), b, tc.constant(a), b, tiny_cfg)
    expected = losses["rec_cos"].item() + tiny_cfg.vq.lambda_gen * losses["gen_mse"].item() + tiny_cfg.vq.beta * losses["commit"].item()
    assert losses["total"].item() == pytest.approx(expected)


def test_straight_through_passes_gradient_to_encoder_output(rng, f64):
    v = tc.Tensor(rng.normal(0.0, 1.0, (3, 2)), requires_grad=True)
    chosen = rng.normal(0.0, 1.0, (3, 2))
    q = tc.straight_through(v, chosen)
    np.testing.assert_array_equal(q.data, chosen)
    tc.tsum(q * tc.constant(np.full((3, 2), 2.0))).backward()
    np.testing.assert_array_equal(v.grad, np.full((3, 2), 2.0))


def test_tokenize_is_deterministic(tiny_tokenizer, tiny_cfg):
    img = render_scene(SceneSpec(1, 4, 8, 0))
    codes = vq.tokenize(img, tiny_tokenizer)
    assert codes.shape == (tiny_cfg.qformer.n_queries,)
    assert codes.min() >= 0 and codes.max() < tiny_cfg.vq.codebook_size
    assert np.array_equal(codes, vq.tokenize(img, tiny_tokenizer))


def test_reconstruct_shape_and_errors(tiny_tokenizer, tiny_cfg):
    n, k = tiny_cfg.qformer.n_queries, tiny_cfg.vq.codebook_size
    rec = vq.reconstruct_embeddings(np.arange(n) % k, tiny_tokenizer)
    assert rec.shape == (n, tiny_cfg.qformer.d)
    with pytest.raises(CodeIndexError):
        tiny_tokenizer.code_inputs(np.full(n, k))
    with pytest.raises(ConfigurationError, match="code_inputs"):
        tiny_tokenizer.code_inputs(np.zeros(n + 1, dtype=int))


def test_code_decoder_grad_check(tiny_cfg, rng, f64):
    store = vq.init_stage2_params(tiny_cfg, rng)
    entries = tc.constant(rng.normal(0.0, 1.0, (2, tiny_cfg.qformer.n_queries, tiny_cfg.qformer.d)))
    upstream = tc.constant(rng.normal(0.0, 1.0, entries.shape))
    dec = store.subset("code_dec")
    report = tc.grad_check(lambda: tc.tsum(vq.decode_codes(vq.with_positions(entries, store), store, tiny_cfg) * upstream), dec, max_components=4, rng=rng)
    assert report.passed, report.max_rel_error


def test_train_stage2_keeps_qformer_frozen(tiny_cfg, tiny_bundle, tiny_tokenizer, rng):
    from synth_data import build_corpus

    train, heldout = build_corpus(48, 8, 1, rng)
    before = tiny_tokenizer.qformer.digest()
    tokenizer, trace = vq.train_stage2(train, tiny_bundle, tiny_tokenizer.qformer, tiny_cfg, rng, heldout)
    assert tokenizer.qformer.digest() == before
    assert tokenizer.codebook.size == tiny_cfg.vq.codebook_size
    assert {"rec_cos", "gen_mse", "commit", "heldout_rec_cosine"} <= set(trace.epochs[-1].metrics)
    assert not tokenizer.store.trainable()
