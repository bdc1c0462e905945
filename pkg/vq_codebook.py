"""
Stage II：把因果嵌入离散成因果视觉码，并做双重重建。

- quantize：最近邻（L2，可选余弦），并列取较小下标
- 码解码器 code_dec.*：码本条目 + 位置 → 多层 transformer → N_q × d 连续嵌入
- 损失：rec_cos + λ_gen·gen_mse + β·commit；量化处梯度直通
- 码本用 EMA 更新，使用占比过低的码从当前 batch 向量里重新播种
- SeedTokenizer：tokenize / reconstruct / detokenize 的一站式封装
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

import nn_blocks as nb
import reverse_qformer as rq
import tensor_core as tc
from causal_qformer import CausalQFormer, encode_corpus
from errors import CodeIndexError, ConfigurationError, EmptyInputError, MissingCheckpointError, NumericalError
from eval_harness import StageTrace, codebook_stats
from frozen_backbones import FrozenBundle
from seed_config import SeedConfig
from synth_data import Dataset, shuffled_batches
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)

CODEBOOK = "codebook"
DECODER = "code_dec"
EMA_EPS = 1e-8


# -------- 码本 --------


@dataclass
class Codebook:
    entries: np.ndarray
    cluster_size: np.ndarray
    cluster_sum: np.ndarray

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ConfigurationError("Codebook", f"need K >= 2 entries, got shape {self.entries.shape}")
        if not np.isfinite(self.entries).all():
            raise NumericalError("codebook has non-finite entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def from_entries(cls, entries: np.ndarray) -> "Codebook":
        e = np.array(entries, dtype=np.float32)
        return cls(e, np.ones(len(e), dtype=np.float32), e.copy())

    def check_codes(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.size):
            bad = codes[(codes < 0) | (codes >= self.size)][0]
            raise CodeIndexError(f"code index {bad} outside [0, {self.size})")
        return codes

    def lookup(self, codes) -> np.ndarray:
        return self.entries[self.check_codes(codes)]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            f"{CODEBOOK}.entries": self.entries,
            f"{CODEBOOK}.cluster_size": self.cluster_size,
            f"{CODEBOOK}.cluster_sum": self.cluster_sum,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Codebook":
        try:
            return cls(
                np.asarray(arrays[f"{CODEBOOK}.entries"], dtype=np.float32),
                np.asarray(arrays[f"{CODEBOOK}.cluster_size"], dtype=np.float32),
                np.asarray(arrays[f"{CODEBOOK}.cluster_sum"], dtype=np.float32),
            )
        except KeyError:
            raise MissingCheckpointError(CODEBOOK) from None

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.cluster_size.copy(), self.cluster_sum.copy())

    def digest(self) -> str:
        store = ParamStore()
        for name, arr in self.to_arrays().items():
            store.add(name, arr, frozen=True)
        return store.digest()


def nearest_indices(vectors: np.ndarray, entries: np.ndarray, metric: str = "l2", chunk: int = 1024) -> np.ndarray:
    """(..., d) → (...,) 最近码下标；直接做差求距离，相等时 argmin 取第一个"""
    v = np.asarray(vectors, dtype=np.float64)
    if not np.isfinite(v).all():
        raise NumericalError("quantize: non-finite input vector")
    lead = v.shape[:-1]
    flat = v.reshape(-1, v.shape[-1])
    e = np.asarray(entries, dtype=np.float64)
    if flat.shape[1] != e.shape[1]:
        raise ConfigurationError("quantize", f"vector width {flat.shape[1]} != codebook width {e.shape[1]}")
    out = np.empty(len(flat), dtype=np.int64)
    if metric == "cosine":
        en = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    for s in range(0, len(flat), chunk):
        block = flat[s:s + chunk]
        if metric == "cosine":
            bn = block / np.maximum(np.linalg.norm(block, axis=1, keepdims=True), 1e-12)
            out[s:s + chunk] = np.argmax(bn @ en.T, axis=1)
        else:
            diff = block[:, None, :] - e[None, :, :]
            out[s:s + chunk] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return out.reshape(lead)


def quantize(vector: np.ndarray, codebook: Codebook, metric: str = "l2") -> tuple[int, np.ndarray]:
    idx = int(nearest_indices(np.asarray(vector)[None], codebook.entries, metric)[0])
    return idx, codebook.entries[idx]


def init_codebook(vectors: np.ndarray, k: int, rng: Rng) -> Codebook:
    """数据相关初始化：从训练向量里随机取 K 个"""
    flat = np.asarray(vectors, dtype=np.float32).reshape(-1, vectors.shape[-1])
    if len(flat) == 0:
        raise EmptyInputError("init_codebook: no vectors")
    pick = rng.choice(len(flat), size=k, replace=len(flat) < k)
    entries = flat[pick].copy()
    if len(flat) < k:
        entries += rng.normal(0.0, 1e-3, entries.shape).astype(np.float32)
    return Codebook.from_entries(entries)


@dataclass
class EmaStats:
    reseeded: list[int] = field(default_factory=list)
    # 低于阈值但没有 rng（或 batch 为空）而未重新播种的码
    dead_skipped: list[int] = field(default_factory=list)
    usage: np.ndarray | None = None
    batch_counts: np.ndarray | None = None


def ema_update(
    codebook: Codebook,
    vectors: np.ndarray,
    assignments: np.ndarray,
    gamma: float,
    *,
    rng: Rng | None = None,
    dead_threshold: float = 1e-3,
) -> tuple[Codebook, EmaStats]:
    """
    N_k ← γN_k + (1−γ)n_k；m_k ← γm_k + (1−γ)Σv；e_k ← m_k/(N_k+ε)。
    使用占比 N_k/ΣN 低于阈值的码从本 batch 随机向量重新播种；不给 rng 时不播种，记入 dead_skipped 并告警。
    γ=1 时原样返回。
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError("ema_update", f"decay {gamma} outside [0, 1]")
    if gamma == 1.0:
        return codebook.copy(), EmaStats(usage=codebook.cluster_size / max(codebook.cluster_size.sum(), EMA_EPS))
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, codebook.dim)
    a = codebook.check_codes(assignments).reshape(-1)
    k = codebook.size
    counts = np.bincount(a, minlength=k).astype(np.float64)
    sums = np.zeros((k, codebook.dim))
    np.add.at(sums, a, v)

    size = gamma * codebook.cluster_size.astype(np.float64) + (1.0 - gamma) * counts
    total = gamma * codebook.cluster_sum.astype(np.float64) + (1.0 - gamma) * sums
    entries = total / (size[:, None] + EMA_EPS)

    usage = size / max(size.sum(), EMA_EPS)
    reseeded: list[int] = []
    skipped: list[int] = []
    dead = np.flatnonzero(usage < dead_threshold)
    if dead.size and (rng is None or not len(v)):
        skipped = [int(c) for c in dead]
        logger.warning("ema_update: %d code(s) below usage %.3g not reseeded (%s)", dead.size, dead_threshold, "no rng" if rng is None else "empty batch")
    elif dead.size:
        picks = rng.choice(len(v), size=dead.size, replace=len(v) < dead.size)
        mean_size = size.sum() / k
        for code, pick in zip(dead, picks):
            entries[code] = v[pick]
            size[code] = mean_size
            total[code] = mean_size * v[pick]
            reseeded.append(int(code))
        usage = size / max(size.sum(), EMA_EPS)
    new = Codebook(entries.astype(np.float32), size.astype(np.float32), total.astype(np.float32))
    return new, EmaStats(reseeded=reseeded, dead_skipped=skipped, usage=usage, batch_counts=counts)


# -------- 码解码器 --------


def decoder_spec(cfg: SeedConfig) -> nb.StackSpec:
    return nb.StackSpec(cfg.vq.decoder_depth, cfg.qformer.d, cfg.vq.decoder_heads)


def init_stage2_params(cfg: SeedConfig, rng: Rng) -> ParamStore:
    store = ParamStore()
    dec = store.scope(DECODER)
    dec.add("pos", tc.init_normal(rng, (cfg.qformer.n_queries, cfg.qformer.d), 0.1))
    nb.init_stack(dec, decoder_spec(cfg), rng)
    rq.init_reverse_qformer(store, cfg, rng)
    return store


def with_positions(entries: Tensor, store: ParamStore) -> Tensor:
    """码侧输入：条目 + code_dec.pos（码解码器与 Reverse Q-Former 共用）"""
    pos = store[f"{DECODER}.pos"]
    return entries + pos[: entries.shape[-2]]


def decode_codes(code_inputs: Tensor, store: ParamStore, cfg: SeedConfig) -> Tensor:
    """(B, N_q, d) 带位置的条目 → (B, N_q, d) 重建的因果嵌入"""
    n = code_inputs.shape[-2]
    kind = "causal" if cfg.vq.decoder_causal else "full"
    return nb.transformer_stack(code_inputs, store.scope(DECODER), decoder_spec(cfg), nb.build_attention_mask(n, n, kind))


# -------- 损失 --------


def rec_cos_loss(decoded: Tensor, targets) -> Tensor:
    """1 − 平均余弦"""
    return 1.0 - tc.cosine_similarity(decoded, tc.as_tensor(targets)).mean()


def gen_mse_loss(gen_emb: Tensor, targets) -> Tensor:
    return tc.mse(gen_emb, tc.as_tensor(targets))


def commit_loss(pre_quant: Tensor, entries: np.ndarray) -> Tensor:
    """平均 ‖v − sg(e)‖²"""
    diff = pre_quant - tc.constant(entries)
    return (diff * diff).sum(axis=-1).mean()


def stage2_losses(
    decoded: Tensor,
    causal_targets,
    gen_emb: Tensor,
    gen_targets,
    pre_quant: Tensor,
    entries: np.ndarray,
    cfg: SeedConfig,
) -> dict[str, Tensor]:
    rec = rec_cos_loss(decoded, causal_targets)
    gen = gen_mse_loss(gen_emb, gen_targets)
    commit = commit_loss(pre_quant, entries)
    total = rec + tc.scale(gen, cfg.vq.lambda_gen) + tc.scale(commit, cfg.vq.beta)
    return {"rec_cos": rec, "gen_mse": gen, "commit": commit, "total": total}


# -------- 封装 --------


@dataclass
class SeedTokenizer:
    """冻结骨干 + Causal Q-Former + 码本 + 码解码器 + Reverse Q-Former"""

    bundle: FrozenBundle
    qformer: CausalQFormer
    codebook: Codebook
    store: ParamStore
    cfg: SeedConfig

    @property
    def n_queries(self) -> int:
        return self.cfg.qformer.n_queries

    def causal_embeddings(self, images: np.ndarray) -> np.ndarray:
        with tc.no_grad():
            return self.qformer.forward(self.bundle.vit_encode(images)).data

    def quantize_embeddings(self, embeddings: np.ndarray) -> np.ndarray:
        return nearest_indices(embeddings, self.codebook.entries, self.cfg.vq.metric)

    def tokenize(self, images: np.ndarray) -> np.ndarray:
        """(3,32,32) → (N_q,)；批量 (B,3,32,32) → (B, N_q)"""
        return self.quantize_embeddings(self.causal_embeddings(images))

    def code_inputs(self, codes) -> Tensor:
        codes = self.codebook.check_codes(codes)
        if codes.shape[-1] != self.n_queries:
            raise ConfigurationError("code_inputs", f"expected {self.n_queries} codes, got {codes.shape[-1]}")
        return with_positions(tc.constant(self.codebook.entries[codes]), self.store)

    def reconstruct(self, codes) -> np.ndarray:
        with tc.no_grad():
            return decode_codes(self.code_inputs(codes), self.store, self.cfg).data

    def generation_embeddings(self, codes) -> np.ndarray:
        with tc.no_grad():
            x = self.code_inputs(codes)
            if self.cfg.vq.revq_input == "reconstructed":
                x = decode_codes(x, self.store, self.cfg)
            return rq.reverse_qformer_forward(x, self.store, self.cfg).data

    def detokenize(self, codes) -> np.ndarray:
        return self.bundle.decode_image(self.generation_embeddings(codes))

    def digest(self) -> str:
        return self.codebook.digest() + self.store.digest()


def tokenize(image: np.ndarray, tokenizer: SeedTokenizer) -> np.ndarray:
    return tokenizer.tokenize(image)


def reconstruct_embeddings(codes, tokenizer: SeedTokenizer) -> np.ndarray:
    return tokenizer.reconstruct(codes)


def detokenize(codes, tokenizer: SeedTokenizer) -> np.ndarray:
    """码序列 → 生成嵌入 → 冻结解码器 → 3×32×32"""
    return tokenizer.detokenize(codes)


# -------- 训练 --------


def stage2_metrics(tokenizer: SeedTokenizer, data: Dataset, batch_size: int = 256) -> dict[str, float]:
    """留出集：重建余弦、生成嵌入 MSE、码本困惑度"""
    cos, mse, codes = [], [], []
    images, captions = data.images, data.captions
    for s in range(0, len(data), batch_size):
        emb = tokenizer.causal_embeddings(images[s:s + batch_size])
        c = tokenizer.quantize_embeddings(emb)
        rec = tokenizer.reconstruct(c)
        with tc.no_grad():
            target = tokenizer.bundle.gen_text_encode(captions[s:s + batch_size]).data
        gen = tokenizer.generation_embeddings(c)
        num = (rec * emb).sum(-1)
        den = np.linalg.norm(rec, axis=-1) * np.linalg.norm(emb, axis=-1) + 1e-8
        cos.append((num / den).reshape(-1))
        mse.append(((gen - target) ** 2).reshape(-1))
        codes.append(c)
    stats = codebook_stats(np.concatenate(codes), tokenizer.codebook.size)
    return {
        "rec_cosine": float(np.concatenate(cos).mean()),
        "gen_mse": float(np.concatenate(mse).mean()),
        "perplexity": stats.perplexity,
        "dead_codes": float(stats.dead_count),
    }


def train_stage2(
    train: Dataset,
    bundle: FrozenBundle | None,
    qformer: CausalQFormer | None,
    cfg: SeedConfig,
    rng: Rng,
    heldout: Dataset | None = None,
) -> tuple[SeedTokenizer, StageTrace]:
    """码本（EMA）+ 码解码器 + Reverse Q-Former 联合训练；Causal Q-Former 默认冻结"""
    if bundle is None:
        raise MissingCheckpointError("vit")
    if qformer is None:
        raise MissingCheckpointError("qformer")
    if len(train) == 0:
        raise EmptyInputError("train_stage2: empty dataset")
    vq = cfg.vq
    store = init_stage2_params(cfg, rng.child("vq.init"))
    feats, _ = encode_corpus(bundle, train)
    captions = train.captions
    with tc.no_grad():
        causal = np.concatenate([qformer.forward(feats[s:s + 256]).data for s in range(0, len(feats), 256)])
        gen_targets = np.concatenate([bundle.gen_text_encode(captions[s:s + 256]).data for s in range(0, len(captions), 256)])
    codebook = init_codebook(causal, vq.codebook_size, rng.child("vq.codebook"))
    tokenizer = SeedTokenizer(bundle, qformer, codebook, store, cfg)

    trainable = ParamStore().merge(store)
    if vq.tune_qformer:
        qformer.store.unfreeze()
        trainable.merge(qformer.store)
    o = vq.optim
    opt = tc.Adam(trainable, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    trace = StageTrace(stage="vq")
    brng = rng.child("vq.batches")
    ema_rng = rng.child("vq.ema")
    for epoch in range(o.epochs):
        parts = {"rec_cos": [], "gen_mse": [], "commit": [], "total": []}
        reseeded = 0
        for idx in tqdm(shuffled_batches(len(train), o.batch_size, brng), desc=f"vq {epoch + 1}", disable=not cfg.progress, leave=False):
            v = qformer.forward(feats[idx]) if vq.tune_qformer else tc.constant(causal[idx])
            codes = nearest_indices(v.data, tokenizer.codebook.entries, vq.metric)
            chosen = tokenizer.codebook.entries[codes]
            q = tc.straight_through(v, chosen)
            x = with_positions(q, store)
            decoded = decode_codes(x, store, cfg)
            gen = rq.reverse_qformer_forward(decoded if vq.revq_input == "reconstructed" else x, store, cfg)
            losses = stage2_losses(decoded, v.detach(), gen, gen_targets[idx], v, chosen, cfg)
            losses["total"].backward()
            opt.step()
            tokenizer.codebook, stats = ema_update(
                tokenizer.codebook, v.data, codes, vq.gamma, rng=ema_rng, dead_threshold=vq.dead_threshold,
            )
            reseeded += len(stats.reseeded)
            for k, t in losses.items():
                parts[k].append(t.item())
        extra = stage2_metrics(tokenizer, heldout) if heldout is not None else {}
        means = {k: float(np.mean(vs)) for k, vs in parts.items()}
        entry = trace.log(epoch + 1, means.pop("total"), **means, reseeded=reseeded, **{f"heldout_{k}": v for k, v in extra.items()})
        logger.info("stage II epoch %d loss %.4f %s", epoch + 1, entry.loss, entry.metrics)
    store.freeze()
    qformer.store.freeze()
    return tokenizer, trace
