from __future__ import annotations

import numpy as np
import pytest

import multimodal_lm as mm
import tensor_core as tc
from errors import ConfigurationError, MissingCheckpointError, VocabError
from synth_data import WORDS, SceneSpec, build_corpus, caption_tokens


def _model(cfg, rng, tokenizer=None, *, adapters=True):
    vocab = mm.build_unified_vocab(28, cfg.vq.codebook_size)
    store = mm.init_base_lm(cfg, vocab, rng)
    store.freeze()
    if adapters:
        mm.init_adapters(store, cfg, vocab, rng)
    entries = tokenizer.codebook.entries.copy() if tokenizer is not None else rng.normal(0.0, 1.0, (cfg.vq.codebook_size, cfg.qformer.d))
    return mm.MultimodalLM(store, cfg, vocab, entries, tokenizer)


def _i2t(model, rng, n=2):
    caps = [caption_tokens(SceneSpec.from_index(int(i))) for i in rng.integers(0, 270, n)]
    codes = rng.integers(0, model.vocab.n_codes, (n, model.cfg.qformer.n_queries))
    return mm.build_multimodal_sequences(codes, caps, model.vocab, model.cfg.qformer.n_queries)


def test_unified_vocab_layout():
    v = mm.build_unified_vocab(30, 64)
    assert v.size == 99
    assert v.code_to_id(0) == 30 and v.code_to_id(63) == 93
    assert v.id_to_code(93) == 63
    assert [v.bos, v.eos, v.boi, v.eoi, v.pad] == [94, 95, 96, 97, 98]
    assert v.is_code(np.array([29, 30, 93, 94])).tolist() == [False, True, True, False]
    with pytest.raises(VocabError):
        v.check(np.array([99]))


def test_default_text_vocab_size(vocab):
    assert len(vocab) == 28


def test_compose_sequences(vocab):
    v = mm.build_unified_vocab(len(vocab), 64)
    cap = caption_tokens(SceneSpec(0, 0, 0, 1), vocab)
    ids, mask = mm.compose_sequence("i2t", [5, 6, 7, 8], cap, v, n_queries=4)
    assert len(ids) == 19 and mask.sum() == 9
    assert ids[:2].tolist() == [v.bos, v.boi]
    assert ids[2:6].tolist() == [v.code_to_id(c) for c in (5, 6, 7, 8)]
    assert ids[6] == v.eoi and ids[-1] == v.eos
    assert mask[-9:].all() and not mask[:-9].any()

    ids, mask = mm.compose_sequence("t2i", [5, 6, 7, 8], cap, v, n_queries=4)
    assert len(ids) == 18 and mask.sum() == 5
    assert ids[-6] == v.boi and ids[-1] == v.eoi
    assert mask[-5:].all()


@pytest.mark.parametrize(
    "direction, codes, error",
    [
        ("i2t", [1, 2, 3], ConfigurationError),
        ("i2t", [1, 2, 3, 64], VocabError),
        ("sideways", [1, 2, 3, 4], ConfigurationError),
    ],
)
def test_compose_errors(vocab, direction, codes, error):
    v = mm.build_unified_vocab(len(vocab), 64)
    with pytest.raises(error):
        mm.compose_sequence(direction, codes, [4, 5], v, n_queries=4)


def test_pad_batch_right_pads():
    ids, mask = mm.pad_batch([np.array([1, 2, 3]), np.array([4])], [np.array([0, 1, 1], bool), np.array([1], bool)], 9)
    assert ids.tolist() == [[1, 2, 3], [4, 9, 9]]
    assert mask.tolist() == [[False, True, True], [True, False, False]]


def test_lora_apply_examples(f64):
    eye = tc.constant(np.eye(2))
    x = tc.constant(np.array([1.0, 0.0]))
    out = mm.lora_apply(tc.constant(np.zeros(2)), eye, eye, 2.0, 2, x)
    np.testing.assert_array_equal(out.data, [1.0, 0.0])
    base = tc.constant(np.array([0.25, -3.0]))
    same = mm.lora_apply(base, eye, tc.constant(np.zeros((2, 2))), 8.0, 2, x)
    np.testing.assert_array_equal(same.data, base.data)
    with pytest.raises(ConfigurationError, match="lora_apply"):
        mm.lora_apply(base, eye, eye, 1.0, 3, x)


def test_adapters_are_identity_at_init(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    ids, _ = _i2t(model, rng)["i2t"]
    with tc.no_grad():
        assert np.array_equal(model.logits(ids).data, model.logits(ids, use_lora=False).data)


def test_adapter_names(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    names = model.store.names("lora.")
    assert "lora.blocks.0.attn.q.A" in names and "lora.blocks.0.attn.v.B" in names
    assert not any(".attn.k." in n for n in names)
    assert model.store["lora.blocks.0.attn.q.A"].shape == (tiny_cfg.lm.lora_rank, tiny_cfg.lm.d_lm)


def test_zero_projection_gives_zero_visual_embeddings(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    model.store["proj.in.w"].data[:] = 0.0
    ids, _ = _i2t(model, rng, 1)["i2t"]
    emb = mm.embed_tokens(ids, model.store, model.vocab, model.codebook_entries).data
    code_pos = model.vocab.is_code(ids)
    assert np.all(emb[code_pos] == 0.0)
    assert np.any(emb[~code_pos] != 0.0)


def test_codebook_gets_no_gradient(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    entries = tc.Tensor(model.codebook_entries, requires_grad=True)
    ids, _ = _i2t(model, rng, 1)["i2t"]
    tc.tsum(mm.embed_tokens(ids, model.store, model.vocab, entries)).backward()
    assert entries.grad is None
    assert np.any(model.store["proj.in.w"].grad != 0.0)


def test_visual_ids_need_codebook(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    ids, _ = _i2t(model, rng, 1)["i2t"]
    with pytest.raises(MissingCheckpointError, match="codebook"):
        mm.embed_tokens(ids, model.store, model.vocab, None)


def test_learned_embedding_variant(tiny_cfg, rng):
    cfg = tiny_cfg.model_copy(update={"lm": tiny_cfg.lm.model_copy(update={"visual_input": "learned_embedding"})})
    model = _model(cfg, rng)
    assert "proj.code_emb" in model.store and "proj.in.w" not in model.store
    ids, _ = _i2t(model, rng, 1)["i2t"]
    assert model.logits(ids).shape == (1, ids.shape[1], model.vocab.size)


def test_logits_are_causal(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    ids, _ = _i2t(model, rng, 1)["i2t"]
    other = ids.copy()
    other[0, 10:] = model.vocab.eos
    with tc.no_grad():
        a = model.logits(ids).data
        b = model.logits(other).data
    assert np.array_equal(a[:, :10], b[:, :10])


def test_context_limit(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    with pytest.raises(ConfigurationError, match="context"):
        model.logits(np.full((1, tiny_cfg.lm.context + 1), model.vocab.bos))


def test_unmasked_targets_do_not_affect_loss(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    seqs = _i2t(model, rng, 1)
    ids, mask = mm.pad_batch([seqs["i2t"][0][0], seqs["t2i"][0][0]], [seqs["i2t"][1][0], seqs["t2i"][1][0]], model.vocab.pad)
    assert ids[1, -1] == model.vocab.pad and not mask[1, -1]
    other = ids.copy()
    other[1, -1] = model.vocab.code_to_id(0)
    with tc.no_grad():
        assert model.sequence_loss(ids, mask).item() == model.sequence_loss(other, mask).item()
        changed = ids.copy()
        changed[0, -1] = model.vocab.bos
        assert model.sequence_loss(changed, mask).item() != model.sequence_loss(ids, mask).item()


def test_caption_lm_sequences_have_three_forms(tiny_cfg, vocab):
    v = mm.build_unified_vocab(len(vocab), 8)
    caps = np.stack([caption_tokens(SceneSpec(0, 1, 2, 0), vocab)] * 2)
    ids, mask = mm.caption_lm_sequences(caps, v)
    assert ids.shape == (6, 13)
    assert (ids[:, 0] == v.bos).all()
    assert not mask[:, 0].any()


def test_constrained_caption_generation(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    codes = rng.integers(0, tiny_cfg.vq.codebook_size, (3, tiny_cfg.qformer.n_queries))
    caps = mm.greedy_captions(model, codes)
    assert len(caps) == 3
    for c in caps:
        assert set(c.split()) <= set(WORDS)
    assert caps == mm.greedy_captions(model, codes)


def test_constrained_code_generation(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    caps = np.stack([caption_tokens(SceneSpec.from_index(i)) for i in (0, 100, 200)])
    greedy = mm.generate_codes(model, caps)
    assert greedy.shape == (3, tiny_cfg.qformer.n_queries)
    assert model.vocab.is_code(greedy).all()
    assert np.array_equal(greedy, mm.generate_codes(model, caps))
    a = mm.generate_codes(model, caps, tc.init_rng(5), "sample", 0.7)
    b = mm.generate_codes(model, caps, tc.init_rng(5), "sample", 0.7)
    assert np.array_equal(a, b) and model.vocab.is_code(a).all()
    with pytest.raises(ConfigurationError):
        mm.generate_codes(model, caps, mode="beam")
    with pytest.raises(ConfigurationError):
        mm.generate_codes(model, caps, None, "sample")


def test_generated_ids_feed_detokenizer_unchanged(tiny_cfg, rng, tiny_tokenizer):
    model = _model(tiny_cfg, rng, tiny_tokenizer)
    for i in range(5):
        out = mm.generate_image(caption_tokens(SceneSpec.from_index(i * 50)), model, tc.init_rng(i), "sample")
        assert np.array_equal(out.codes, model.vocab.id_to_code(out.token_ids))
        assert np.array_equal(out.image, tiny_tokenizer.detokenize(out.codes))
    text = mm.generate_image("a small red circle in the top left", model)
    assert text.image.shape == (3, 32, 32)


def test_generation_needs_tokenizer(tiny_cfg, rng):
    model = _model(tiny_cfg, rng)
    with pytest.raises(MissingCheckpointError):
        mm.generate_image("a small red circle in the top left", model)
    with pytest.raises(MissingCheckpointError):
        mm.generate_caption(np.zeros((3, 32, 32)), model)


def test_training_leaves_base_and_codebook_untouched(tiny_cfg, rng, tiny_tokenizer):
    train, heldout = build_corpus(32, 4, 1, rng)
    base, base_trace = mm.pretrain_toy_lm(train.captions, tiny_cfg, rng, heldout.captions)
    assert "heldout_ppl" in base_trace.epochs[-1].metrics
    base_digest = base.base_digest()
    codebook_digest = tiny_tokenizer.codebook.digest()
    model, trace = mm.train_multimodal(train, tiny_tokenizer, base, tiny_cfg, rng, heldout)
    assert model.base_digest() == base_digest
    assert tiny_tokenizer.codebook.digest() == codebook_digest
    assert trace.epochs[0].metrics["warmup"] == 1.0
    assert trace.epochs[-1].metrics["warmup"] == 0.0
    assert {"caption_acc", "next_code_acc"} <= set(trace.epochs[-1].metrics)
    assert not model.store.trainable()
    assert isinstance(mm.generate_caption(heldout.images[0], model), str)


def test_training_needs_upstream_artifacts(tiny_cfg, rng):
    train, _ = build_corpus(8, 2, 0, rng)
    with pytest.raises(MissingCheckpointError, match="codebook"):
        mm.train_multimodal(train, None, None, tiny_cfg, rng)
