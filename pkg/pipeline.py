"""
阶段编排：运行目录布局、各阶段训练 + 存档、从存档恢复、评测。

<run_dir>/
  data/train.seeddata, data/heldout.seeddata
  ckpt/backbones.seedckpt  vit.* txt.* gen_txt.* img_dec.*
  ckpt/qformer.seedckpt    qformer.*
  ckpt/vq.seedckpt         codebook.* code_dec.* revq.*（联合微调时另含 qformer.*）
  ckpt/lm.seedckpt         lm.*
  ckpt/lm_mm.seedckpt      lora.* proj.*
  traces/<stage>.json
  report.json

每个训练阶段只读上游存档，只写自己的存档；随机流按阶段名从 seed 派生。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import tensor_core as tc
from causal_qformer import CausalQFormer, encode_corpus, train_stage1
from checkpoint import load_checkpoint, load_sections, save_checkpoint, save_store
from errors import ConfigurationError, MissingCheckpointError
from eval_harness import StageTrace, caption_report, codebook_stats, consistency_report, cosine_matrix, merge_report, recall_at_k
from frozen_backbones import SECTIONS as BACKBONE_SECTIONS
from frozen_backbones import FrozenBundle, bundle_from_store, pretrain_backbones
from multimodal_lm import MultimodalLM, build_unified_vocab, generate_codes, greedy_captions, pretrain_toy_lm, train_multimodal
from path_config import resolve_run_dir
from seed_config import SeedConfig
from synth_data import Dataset, build_corpus, default_vocab, read_dataset, write_dataset
from vq_codebook import Codebook, SeedTokenizer, stage2_metrics, train_stage2

logger = logging.getLogger(__name__)

EVAL_KINDS = ("retrieval", "consistency", "caption", "codebook")


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @classmethod
    def for_config(cls, cfg: SeedConfig, out: str | Path | None = None) -> "RunLayout":
        return cls(Path(out) if out is not None else resolve_run_dir(cfg.paths.run_dir))

    @property
    def ckpt_dir(self) -> Path:
        return self.root / "ckpt"

    def ckpt(self, name: str) -> Path:
        return self.ckpt_dir / f"{name}.seedckpt"

    @property
    def train_data(self) -> Path:
        return self.root / "data" / "train.seeddata"

    @property
    def heldout_data(self) -> Path:
        return self.root / "data" / "heldout.seeddata"

    def trace(self, stage: str) -> Path:
        return self.root / "traces" / f"{stage}.json"

    @property
    def report(self) -> Path:
        return self.root / "report.json"


def stage_rng(cfg: SeedConfig, stage: str) -> tc.Rng:
    return tc.init_rng(cfg.seed).child(stage)


def _save_traces(layout: RunLayout, traces: list[StageTrace]) -> None:
    for t in traces:
        t.save(layout.trace(t.stage))


# -------- 数据 --------


def gen_data(cfg: SeedConfig, layout: RunLayout) -> tuple[Dataset, Dataset]:
    d = cfg.data
    train, heldout = build_corpus(d.n_train, d.n_heldout, d.jitter_px, stage_rng(cfg, "data"))
    write_dataset(layout.train_data, train)
    write_dataset(layout.heldout_data, heldout)
    logger.info("wrote %d train / %d held-out samples to %s", len(train), len(heldout), layout.root / "data")
    return train, heldout


def load_data(layout: RunLayout) -> tuple[Dataset, Dataset]:
    for p in (layout.train_data, layout.heldout_data):
        if not p.exists():
            raise MissingCheckpointError("data", str(p))
    return read_dataset(layout.train_data), read_dataset(layout.heldout_data)


# -------- 阶段 --------


def run_pretrain_backbones(cfg: SeedConfig, layout: RunLayout) -> FrozenBundle:
    train, heldout = load_data(layout)
    bundle, traces = pretrain_backbones(train, cfg, stage_rng(cfg, "backbones"), heldout)
    save_store(layout.ckpt("backbones"), bundle.store)
    _save_traces(layout, traces)
    return bundle


def load_bundle(cfg: SeedConfig, layout: RunLayout) -> FrozenBundle:
    store = load_sections(layout.ckpt("backbones"), BACKBONE_SECTIONS)
    return bundle_from_store(store, cfg.backbone)


def run_train_qformer(cfg: SeedConfig, layout: RunLayout) -> CausalQFormer:
    bundle = load_bundle(cfg, layout)
    train, heldout = load_data(layout)
    qformer, trace = train_stage1(train, bundle, cfg, stage_rng(cfg, "qformer"), heldout)
    save_store(layout.ckpt("qformer"), qformer.store)
    _save_traces(layout, [trace])
    return qformer


def load_qformer(cfg: SeedConfig, layout: RunLayout) -> CausalQFormer:
    return CausalQFormer(load_sections(layout.ckpt("qformer"), ["qformer"]), cfg)


def run_train_vq(cfg: SeedConfig, layout: RunLayout) -> SeedTokenizer:
    bundle = load_bundle(cfg, layout)
    qformer = load_qformer(cfg, layout)
    train, heldout = load_data(layout)
    tokenizer, trace = train_stage2(train, bundle, qformer, cfg, stage_rng(cfg, "vq"), heldout)
    arrays = dict(tokenizer.codebook.to_arrays())
    arrays.update({n: t.data for n, t in tokenizer.store.items()})
    if cfg.vq.tune_qformer:
        arrays.update({n: t.data for n, t in qformer.store.items()})
    save_checkpoint(layout.ckpt("vq"), arrays)
    _save_traces(layout, [trace])
    return tokenizer


def load_tokenizer(cfg: SeedConfig, layout: RunLayout) -> SeedTokenizer:
    path = layout.ckpt("vq")
    if not path.exists():
        raise MissingCheckpointError("codebook", str(path))
    arrays = load_checkpoint(path)
    codebook = Codebook.from_arrays(arrays)
    bundle = load_bundle(cfg, layout)
    if any(n.startswith("qformer.") for n in arrays):
        qformer = CausalQFormer(load_sections(path, ["qformer"]), cfg)
    else:
        qformer = load_qformer(cfg, layout)
    store = load_sections(path, ["code_dec", "revq"])
    return SeedTokenizer(bundle, qformer, codebook, store, cfg)


def run_train_lm(cfg: SeedConfig, layout: RunLayout) -> MultimodalLM:
    tokenizer = load_tokenizer(cfg, layout)
    train, heldout = load_data(layout)
    base, base_trace = pretrain_toy_lm(train.captions, cfg, stage_rng(cfg, "lm"), heldout.captions)
    save_store(layout.ckpt("lm"), base.store)
    model, mm_trace = train_multimodal(train, tokenizer, base, cfg, stage_rng(cfg, "lm_mm"), heldout)
    save_store(layout.ckpt("lm_mm"), model.store, ["lora.", "proj."])
    _save_traces(layout, [base_trace, mm_trace])
    return model


def load_lm(cfg: SeedConfig, layout: RunLayout, tokenizer: SeedTokenizer | None = None) -> MultimodalLM:
    tokenizer = tokenizer or load_tokenizer(cfg, layout)
    store = load_sections(layout.ckpt("lm"), ["lm"])
    load_sections(layout.ckpt("lm_mm"), ["lora", "proj"], store=store)
    vocab = build_unified_vocab(len(default_vocab()), tokenizer.codebook.size)
    return MultimodalLM(store, cfg, vocab, tokenizer.codebook.entries.copy(), tokenizer)


STAGES = {
    "pretrain-backbones": run_pretrain_backbones,
    "train-qformer": run_train_qformer,
    "train-vq": run_train_vq,
    "train-lm": run_train_lm,
}


def run_all(cfg: SeedConfig, layout: RunLayout) -> dict[str, float]:
    """全部阶段依次执行，最后写 report.json"""
    gen_data(cfg, layout)
    for run in STAGES.values():
        run(cfg, layout)
    if layout.report.exists():
        layout.report.unlink()
    return run_eval(cfg, layout, EVAL_KINDS)


# -------- 评测 --------


def _batched(fn, xs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([fn(xs[s:s + batch_size]) for s in range(0, len(xs), batch_size)])


def eval_retrieval(cfg: SeedConfig, layout: RunLayout, heldout: Dataset) -> dict[str, float]:
    """留出集检索：最后一个因果嵌入（causal_emb）与由码重建的最后一个嵌入（causal_code）"""
    bundle = load_bundle(cfg, layout)
    qformer = load_qformer(cfg, layout)
    feats, texts = encode_corpus(bundle, heldout)
    ks = tuple(k for k in (1, 5, 10) if k <= len(heldout))
    with tc.no_grad():
        emb = _batched(lambda f: qformer.forward(f).data, feats)
        vec = qformer.retrieval_vector(tc.constant(emb)).data
    out = recall_at_k(cosine_matrix(vec, texts), ks).as_metrics("causal_emb_")
    if layout.ckpt("vq").exists():
        tokenizer = load_tokenizer(cfg, layout)
        with tc.no_grad():
            emb = _batched(lambda f: tokenizer.qformer.forward(f).data, feats)
            rec = tokenizer.reconstruct(tokenizer.quantize_embeddings(emb))
            vec = tokenizer.qformer.retrieval_vector(tc.constant(rec)).data
        out.update(recall_at_k(cosine_matrix(vec, texts), ks).as_metrics("causal_code_"))
    return out


def eval_consistency(cfg: SeedConfig, layout: RunLayout, heldout: Dataset) -> dict[str, float]:
    tokenizer = load_tokenizer(cfg, layout)
    codes = tokenizer.tokenize(heldout.images)
    images = [tokenizer.detokenize(c) for c in codes]
    out = consistency_report(images, heldout.specs).as_metrics("roundtrip_")
    if layout.ckpt("lm_mm").exists():
        model = load_lm(cfg, layout, tokenizer)
        gen = model.vocab.id_to_code(generate_codes(model, heldout.captions))
        out.update(consistency_report([tokenizer.detokenize(c) for c in gen], heldout.specs).as_metrics("t2i_"))
    return out


def eval_caption(cfg: SeedConfig, layout: RunLayout, heldout: Dataset) -> dict[str, float]:
    model = load_lm(cfg, layout)
    captions = greedy_captions(model, model.tokenizer.tokenize(heldout.images))
    return caption_report(captions, heldout.specs).as_metrics("caption_")


def eval_codebook(cfg: SeedConfig, layout: RunLayout, heldout: Dataset) -> dict[str, float]:
    tokenizer = load_tokenizer(cfg, layout)
    out = codebook_stats(tokenizer.tokenize(heldout.images), tokenizer.codebook.size).as_metrics("codebook_")
    m = stage2_metrics(tokenizer, heldout)
    out["codebook_rec_cosine"] = m["rec_cosine"]
    out["codebook_gen_mse"] = m["gen_mse"]
    return out


EVALS = {
    "retrieval": eval_retrieval,
    "consistency": eval_consistency,
    "caption": eval_caption,
    "codebook": eval_codebook,
}


def run_eval(cfg: SeedConfig, layout: RunLayout, kinds, report_path: Path | None = None) -> dict[str, float]:
    """按类别评测并合并写入 report.json（键排序）；返回本次评测的指标"""
    _, heldout = load_data(layout)
    metrics: dict[str, float] = {}
    for kind in kinds:
        if kind not in EVALS:
            raise ConfigurationError("eval", f"unknown eval kind {kind!r}; choose from {', '.join(EVAL_KINDS)}")
        logger.info("eval %s on %d held-out samples", kind, len(heldout))
        metrics.update(EVALS[kind](cfg, layout, heldout))
    merge_report(report_path or layout.report, metrics)
    return dict(sorted(metrics.items()))
