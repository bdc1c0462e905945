"""
快速性质自检：因果性、梯度检查、量化器 / 检索 / 逆渲染 oracle、LoRA 恒等、存档格式。
不需要训练好的存档；python cli.py selftest 或 python scripts/smoke_check.py 运行。
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

import tensor_core as tc
from causal_qformer import CausalQFormer, init_qformer
from checkpoint import decode_checkpoint, encode_checkpoint
from eval_harness import inverse_render, recall_at_k
from multimodal_lm import MultimodalLM, build_unified_vocab, init_adapters, init_base_lm, lm_forward, embed_tokens
from path_config import DEFAULT_CONFIG_PATH
from reverse_qformer import reverse_qformer_forward
from seed_config import SeedConfig, load_config, parse_config
from synth_data import all_specs, canonical_renders, default_vocab
from vq_codebook import decode_codes, init_stage2_params, nearest_indices, with_positions

TINY = {
    "seed": 7,
    "log_level": "WARNING",
    "progress": False,
    "data": {"n_train": 96, "n_heldout": 16, "jitter_px": 1, "min_train_samples": 16},
    "backbone": {
        "patch_size": 8, "d_v": 8, "vit_heads": 2, "vit_depth": 1, "d_txt": 8, "txt_hidden": 8,
        "d_g": 8, "m_g": 3, "gen_heads": 2, "gen_depth": 1, "dec_hidden": 16,
        "optim_clip": {"epochs": 1, "batch_size": 16}, "optim_gen": {"epochs": 1, "batch_size": 16},
    },
    "qformer": {"n_queries": 4, "d": 8, "heads": 2, "depth": 1, "optim": {"epochs": 1, "batch_size": 16}},
    "vq": {
        "codebook_size": 8, "decoder_depth": 1, "decoder_heads": 2, "revq_depth": 1, "revq_heads": 2,
        "optim": {"epochs": 1, "batch_size": 16},
    },
    "lm": {
        "d_lm": 8, "heads": 2, "depth": 1, "context": 24, "lora_rank": 2, "lora_alpha": 4.0,
        "optim_pretrain": {"epochs": 1, "batch_size": 16}, "optim_multimodal": {"epochs": 2, "batch_size": 8},
    },
}


def tiny_config(**overrides) -> SeedConfig:
    """极小维度配置（梯度检查 / 单元测试 / 冒烟训练）"""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return parse_config(raw)


def _random_const(rng: tc.Rng, shape) -> tc.Tensor:
    return tc.constant(rng.normal(0.0, 1.0, shape))


def _tiny_lm(cfg: SeedConfig, rng: tc.Rng) -> MultimodalLM:
    vocab = build_unified_vocab(len(default_vocab()), cfg.vq.codebook_size)
    store = init_base_lm(cfg, vocab, rng)
    init_adapters(store, cfg, vocab, rng)
    entries = rng.normal(0.0, 1.0, (vocab.n_codes, cfg.qformer.d)).astype(tc.get_dtype())
    return MultimodalLM(store, cfg, vocab, entries)


def _random_ids(model: MultimodalLM, rng: tc.Rng, length: int, batch: int = 1) -> np.ndarray:
    return rng.integers(0, model.vocab.size, size=(batch, length))


# -------- 检查项 --------


def check_rng() -> str:
    a = tc.init_rng(42).normal(size=100)
    b = tc.init_rng(42).normal(size=100)
    c = tc.init_rng(43).normal(size=100)
    assert np.array_equal(a, b), "same seed gave different draws"
    assert not np.array_equal(a, c), "different seeds gave identical draws"
    m = float(tc.init_rng(42).normal(size=10_000).mean())
    assert abs(m) <= 0.05, f"normal mean {m}"
    return f"mean of 10^4 draws {m:+.4f}"


def check_autodiff() -> str:
    with tc.precision(np.float64):
        x = tc.Tensor(np.array(3.0), requires_grad=True)
        value, grads = tc.forward_backward(lambda t: t * t, x)
        assert value == 9.0 and grads[0] == 6.0
        logits = tc.Tensor(np.zeros((1, 4)), requires_grad=True)
        value, grads = tc.forward_backward(lambda t: tc.cross_entropy(t, np.array([0])), logits)
        assert abs(value - math.log(4)) < 1e-12
        assert np.allclose(grads[0], [[-0.75, 0.25, 0.25, 0.25]])
        v = tc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        up = np.array([0.3, 0.7])
        _, grads = tc.forward_backward(lambda t: tc.tsum(tc.straight_through(t, np.array([5.0, 5.0])) * tc.constant(up)), v)
        assert np.array_equal(grads[0], up)
    return "x·x, cross-entropy, straight-through"


def _grad_check(name: str, fn: Callable[[], tc.Tensor], store: tc.ParamStore, rng: tc.Rng) -> float:
    report = tc.grad_check(fn, store, max_components=4, rng=rng)
    bad = [n for n, p in report.per_param.items() if not p.passed]
    assert report.passed, f"{name}: failing parameters {bad[:5]}"
    return report.max_rel_error


def check_grad_layer_norm() -> str:
    with tc.precision(np.float64):
        rng = tc.init_rng(1)
        store = tc.ParamStore()
        x = store.add("x", rng.normal(0.0, 1.0, 8))
        w = _random_const(rng, 8)
        report = tc.grad_check(lambda: tc.tsum(tc.layer_norm(x) * w), store)
    assert report.passed and report.max_rel_error <= 1e-6, f"max rel err {report.max_rel_error:.2e}"
    return f"max rel err {report.max_rel_error:.2e}"


def check_grad_blocks() -> str:
    """Q-Former、码解码器、Reverse Q-Former、LM 块 + LoRA + 投影"""
    worst = {}
    with tc.precision(np.float64):
        cfg = tiny_config()
        rng = tc.init_rng(2)
        b, t_v = 2, (32 // cfg.backbone.patch_size) ** 2

        qf = CausalQFormer(init_qformer(cfg, rng), cfg)
        feats = _random_const(rng, (b, t_v, cfg.backbone.d_v))
        weights = _random_const(rng, (b, cfg.qformer.n_queries, cfg.qformer.d))
        weights_r = _random_const(rng, (b, cfg.backbone.d_txt))
        worst["qformer"] = _grad_check(
            "qformer",
            lambda: tc.tsum(qf.forward(feats) * weights) + tc.tsum(qf.retrieval_vector(qf.forward(feats)) * weights_r),
            qf.store, rng,
        )

        store = init_stage2_params(cfg, rng)
        codes_in = _random_const(rng, (b, cfg.qformer.n_queries, cfg.qformer.d))
        p_dec = _random_const(rng, (b, cfg.qformer.n_queries, cfg.qformer.d))
        p_gen = _random_const(rng, (b, cfg.backbone.m_g, cfg.backbone.d_g))

        def stage2_fn():
            x = with_positions(codes_in, store)
            return tc.tsum(decode_codes(x, store, cfg) * p_dec) + tc.tsum(reverse_qformer_forward(x, store, cfg) * p_gen)

        worst["code_dec+revq"] = _grad_check("stage2", stage2_fn, store, rng)

        model = _tiny_lm(cfg, rng)
        for name, t in model.store.items("lora."):
            if name.endswith(".B"):
                t.data = rng.normal(0.0, 0.5, t.data.shape)
        head = model.store["proj.code_head.w"]
        head.data = rng.normal(0.0, 0.5, head.data.shape)
        v = model.vocab
        ids = np.array([[v.bos, v.boi, v.code_to_id(1), v.code_to_id(3), v.code_to_id(0), v.code_to_id(5), v.eoi, 5, 9, v.eos]])
        p_lm = _random_const(rng, (1, ids.shape[1], v.size))
        worst["lm+lora+proj"] = _grad_check("lm", lambda: tc.tsum(model.logits(ids) * p_lm), model.store, rng)
    return ", ".join(f"{k} {e:.1e}" for k, e in worst.items())


def check_qformer_causality(trials: int = 20) -> str:
    cfg = tiny_config()
    rng = tc.init_rng(3)
    store = init_qformer(cfg, rng)
    qf = CausalQFormer(store, cfg)
    entries = rng.normal(0.0, 1.0, (cfg.vq.codebook_size, cfg.qformer.d)).astype(np.float32)
    feats = rng.normal(0.0, 1.0, (1, 16, cfg.backbone.d_v)).astype(np.float32)
    n = cfg.qformer.n_queries
    with tc.no_grad():
        base = qf.forward(feats).data
    base_codes = nearest_indices(base, entries)
    queries = store["qformer.queries"]
    original = queries.data.copy()
    for _ in range(trials):
        j = int(rng.integers(1, n))
        queries.data = original.copy()
        queries.data[j:] += rng.normal(0.0, 1.0, queries.data[j:].shape).astype(np.float32)
        with tc.no_grad():
            out = qf.forward(feats).data
        assert np.array_equal(out[:, :j], base[:, :j]), f"embedding < {j} changed"
        assert np.array_equal(nearest_indices(out, entries)[:, :j], base_codes[:, :j]), f"code < {j} changed"
    queries.data = original
    return f"{trials} trials bit-exact"


def check_lm_causality(trials: int = 20) -> str:
    cfg = tiny_config()
    rng = tc.init_rng(4)
    model = _tiny_lm(cfg, rng)
    length = cfg.lm.context
    for _ in range(trials):
        ids = _random_ids(model, rng, length)
        t = int(rng.integers(0, length - 1))
        other = ids.copy()
        other[0, t + 1:] = rng.integers(0, model.vocab.size, size=length - t - 1)
        with tc.no_grad():
            a = model.logits(ids).data
            b = model.logits(other).data
        assert np.array_equal(a[:, : t + 1], b[:, : t + 1]), f"logits at ≤ {t} changed"
    return f"{trials} trials bit-exact"


def check_quantizer(n_books: int = 100, per_book: int = 100) -> str:
    rng = tc.init_rng(5)
    for _ in range(n_books):
        k, d = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        entries = rng.normal(0.0, 1.0, (k, d))
        vectors = rng.normal(0.0, 1.0, (per_book, d))
        got = nearest_indices(vectors, entries)
        for v, g in zip(vectors, got):
            dist = [float(((v - e) ** 2).sum()) for e in entries]
            assert g == dist.index(min(dist)), "disagrees with exhaustive scan"
        assert np.array_equal(nearest_indices(entries, entries), np.arange(k)), "quantizing an entry must return it"
    tie = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert int(nearest_indices(np.array([[1.0, 0.0]]), tie)[0]) == 0, "tie must pick the lower index"
    return f"{n_books * per_book} instances, ties, idempotence"


def check_lora_identity(n: int = 100) -> str:
    cfg = tiny_config()
    rng = tc.init_rng(6)
    model = _tiny_lm(cfg, rng)
    for _ in range(n):
        ids = _random_ids(model, rng, int(rng.integers(2, cfg.lm.context + 1)))
        with tc.no_grad():
            emb = embed_tokens(ids, model.store, model.vocab, model.codebook_entries)
            base = lm_forward(emb, model.store, cfg, model.vocab).data
            adapted = model.logits(ids).data
        assert np.array_equal(base, adapted), "B=0 adapter changed the output"
    return f"{n} sequences bit-exact"


def check_recall_oracle(n: int = 100) -> str:
    rng = tc.init_rng(7)
    for _ in range(n):
        sim = rng.normal(0.0, 1.0, (10, 10))
        rep = recall_at_k(sim, (1, 5, 10))
        for k in (1, 5, 10):
            for matrix, got in ((sim, rep.i2t[k]), (sim.T, rep.t2i[k])):
                ranks = [int(np.flatnonzero(np.argsort(-row, kind="stable") == i)[0]) for i, row in enumerate(matrix)]
                assert got == float(np.mean([r < k for r in ranks])), "recall disagrees with brute force"
    ident = recall_at_k(np.eye(10), (1, 5, 10))
    assert all(v == 1.0 for v in [*ident.i2t.values(), *ident.t2i.values()])
    return f"{n} random matrices + identity"


def check_inverse_render() -> str:
    renders = canonical_renders()
    specs = all_specs()
    hits = sum(inverse_render(img) == s for img, s in zip(renders, specs))
    assert hits == len(specs), f"{hits}/{len(specs)} recovered"
    return f"{hits}/{len(specs)} specs recovered"


def check_checkpoint_format() -> str:
    rng = tc.init_rng(8)
    arrays = {"b.w": rng.normal(0.0, 1.0, (3, 2)).astype(np.float32), "a.x": rng.normal(0.0, 1.0, 4)}
    buf = encode_checkpoint(arrays)
    back = decode_checkpoint(buf)
    assert list(back) == sorted(arrays) and all(np.array_equal(back[k], arrays[k]) for k in arrays)
    assert back["a.x"].dtype == np.float64 and back["b.w"].dtype == np.float32
    assert encode_checkpoint(back) == buf, "re-encoding changed the bytes"
    return f"{len(buf)} bytes, stable"


def check_default_config() -> str:
    cfg = load_config(DEFAULT_CONFIG_PATH)
    return f"N_q={cfg.qformer.n_queries}, K={cfg.vq.codebook_size}, grid {cfg.n_grid}×{cfg.n_grid}"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("rng determinism", check_rng),
    ("autodiff primitives", check_autodiff),
    ("grad check: layer norm", check_grad_layer_norm),
    ("grad check: trainable blocks", check_grad_blocks),
    ("causal Q-Former prefix invariance", check_qformer_causality),
    ("LM causality", check_lm_causality),
    ("quantizer vs exhaustive scan", check_quantizer),
    ("LoRA identity at B=0", check_lora_identity),
    ("recall@k vs brute force", check_recall_oracle),
    ("inverse render oracle", check_inverse_render),
    ("SEEDCKPT format", check_checkpoint_format),
    ("default config", check_default_config),
]


def run_selftest() -> bool:
    print("=== SEED selftest ===\n")
    failed = 0
    start = time.perf_counter()
    for i, (name, check) in enumerate(CHECKS, 1):
        try:
            detail = check()
        except Exception as e:  # 逐项汇报，不中断
            failed += 1
            print(f"{i:2d}. {name}\n    ✗ {type(e).__name__}: {e}")
        else:
            print(f"{i:2d}. {name}\n    ✓ {detail}")
    print(f"\n{len(CHECKS) - failed}/{len(CHECKS)} passed in {time.perf_counter() - start:.1f}s")
    return failed == 0


if __name__ == "__main__":
    raise SystemExit(0 if run_selftest() else 1)
