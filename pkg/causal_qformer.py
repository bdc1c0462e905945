"""
Stage I：Causal Q-Former。
N_q 个可学习 query 之间用因果自注意力，对冻结 ViT 特征用全量交叉注意力，
输出 N_q × d 的因果嵌入；只有最后一个嵌入参与与标题特征的对称 InfoNCE。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

import nn_blocks as nb
import tensor_core as tc
from errors import ConfigurationError, EmptyInputError, MissingCheckpointError
from eval_harness import StageTrace, cosine_matrix, recall_at_k
from frozen_backbones import FrozenBundle
from seed_config import SeedConfig
from synth_data import Dataset, distinct_spec_batches
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)

SECTION = "qformer"


# -------- 对比损失 --------


def contrastive_loss_from_similarity(sim: Tensor, temperature) -> Tensor:
    """sim: B×B 余弦相似度；图→文与文→图交叉熵的平均"""
    b = sim.shape[0]
    if b == 0:
        raise EmptyInputError("contrastive_loss: empty batch")
    logits = sim / temperature
    labels = np.arange(b)
    return tc.scale(tc.cross_entropy(logits, labels) + tc.cross_entropy(logits.T, labels), 0.5)


def contrastive_loss(final_embeds: Tensor, text_feats: Tensor, temperature) -> Tensor:
    """对称 InfoNCE；两侧先 L2 归一化"""
    if final_embeds.shape[0] == 0:
        raise EmptyInputError("contrastive_loss: empty batch")
    sim = tc.matmul(tc.l2_normalize(final_embeds), tc.l2_normalize(text_feats).T)
    return contrastive_loss_from_similarity(sim, temperature)


# -------- 模型 --------


@dataclass
class CausalQFormer:
    store: ParamStore
    cfg: SeedConfig

    @property
    def n_queries(self) -> int:
        return self.cfg.qformer.n_queries

    @property
    def spec(self) -> nb.StackSpec:
        q = self.cfg.qformer
        return nb.StackSpec(q.depth, q.d, q.heads, d_cross=self.cfg.backbone.d_v)

    def forward(self, image_features: Tensor | np.ndarray, n_queries: int | None = None) -> Tensor:
        """(T_v, d_v) → (N_q, d)；批量 (B, T_v, d_v) → (B, N_q, d)。n_queries < N_q 时只跑前缀"""
        feats = tc.as_tensor(image_features)
        single = feats.ndim == 2
        if single:
            feats = feats.reshape((1,) + feats.shape)
        n = n_queries or self.n_queries
        scope = self.store.scope(SECTION)
        q = tc.expand_batch(scope["queries"][:n], feats.shape[0])
        out = nb.transformer_stack(
            q, scope, self.spec, nb.build_attention_mask(n, n, "causal"), feats,
            cross_mask=nb.build_attention_mask(n, feats.shape[1], "full"),
        )
        return out.reshape(out.shape[1:]) if single else out

    def retrieval_vector(self, embeddings: Tensor) -> Tensor:
        """最后一个因果嵌入 → 对比空间单位向量"""
        last = embeddings[..., -1, :]
        single = last.ndim == 1
        if single:
            last = last.reshape(1, last.shape[0])
        out = tc.l2_normalize(nb.linear(last, self.store.scope(SECTION), "proj"))
        return out.reshape(out.shape[-1]) if single else out

    @property
    def temperature(self) -> Tensor:
        return self.store[f"{SECTION}.tau"]

    def clamp_temperature(self) -> None:
        q = self.cfg.qformer
        tau = self.temperature
        tau.data = np.clip(tau.data, q.tau_min, q.tau_max).astype(tau.data.dtype)

    def digest(self) -> str:
        return self.store.digest(SECTION + ".")


def init_qformer(cfg: SeedConfig, rng: Rng) -> ParamStore:
    q = cfg.qformer
    store = ParamStore()
    scope = store.scope(SECTION)
    scope.add("queries", tc.init_normal(rng, (q.n_queries, q.d), 1.0))
    nb.init_stack(scope, nb.StackSpec(q.depth, q.d, q.heads, d_cross=cfg.backbone.d_v), rng)
    tc.init_linear(scope, "proj", q.d, cfg.backbone.d_txt, rng)
    scope.add("tau", np.full(1, q.tau_init, dtype=tc.get_dtype()))
    return store


def causal_qformer_forward(image_features: np.ndarray, qformer: CausalQFormer) -> np.ndarray:
    with tc.no_grad():
        return qformer.forward(image_features).data


# -------- 训练 --------


def encode_corpus(bundle: FrozenBundle, data: Dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """冻结侧特征只算一次：(N, T_v, d_v) 图像特征、(N, d_txt) 标题特征"""
    feats, texts = [], []
    images, captions = data.images, data.captions
    with tc.no_grad():
        for s in range(0, len(data), batch_size):
            feats.append(bundle.vit_encode(images[s:s + batch_size]).data)
            texts.append(bundle.text_encode(captions[s:s + batch_size]).data)
    return np.concatenate(feats), np.concatenate(texts)


def retrieval_vectors(qformer: CausalQFormer, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with tc.no_grad():
        for s in range(0, len(features), batch_size):
            out.append(qformer.retrieval_vector(qformer.forward(features[s:s + batch_size])).data)
    return np.concatenate(out)


def heldout_recall(qformer: CausalQFormer, bundle: FrozenBundle, heldout: Dataset) -> dict[str, float]:
    feats, texts = encode_corpus(bundle, heldout)
    rep = recall_at_k(cosine_matrix(retrieval_vectors(qformer, feats), texts), ks=(1,))
    return {"i2t_r@1": rep.i2t[1], "t2i_r@1": rep.t2i[1]}


def train_stage1(
    train: Dataset,
    bundle: FrozenBundle | None,
    cfg: SeedConfig,
    rng: Rng,
    heldout: Dataset | None = None,
) -> tuple[CausalQFormer, StageTrace]:
    """只更新 qformer.*；ViT 与文本编码器保持冻结"""
    if bundle is None:
        raise MissingCheckpointError("vit")
    if len(train) == 0:
        raise EmptyInputError("train_stage1: empty dataset")
    if len(train) < cfg.data.min_train_samples:
        raise ConfigurationError(
            "train_stage1", f"need ≥ {cfg.data.min_train_samples} pairs (data.min_train_samples), got {len(train)}"
        )
    store = init_qformer(cfg, rng.child("qformer.init"))
    qformer = CausalQFormer(store, cfg)
    feats, texts = encode_corpus(bundle, train)
    spec_idx = train.spec_indices
    opt_cfg = cfg.qformer.optim
    opt = tc.Adam(store, lr=opt_cfg.lr, beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps)
    trace = StageTrace(stage="qformer")
    brng = rng.child("qformer.batches")
    for epoch in range(opt_cfg.epochs):
        losses = []
        for idx in tqdm(distinct_spec_batches(spec_idx, opt_cfg.batch_size, brng), desc=f"qformer {epoch + 1}", disable=not cfg.progress, leave=False):
            emb = qformer.forward(feats[idx])
            loss = contrastive_loss(qformer.retrieval_vector(emb), tc.constant(texts[idx]), qformer.temperature)
            loss.backward()
            opt.step()
            qformer.clamp_temperature()
            losses.append(loss.item())
        extra = heldout_recall(qformer, bundle, heldout) if heldout is not None else {}
        entry = trace.log(epoch + 1, float(np.mean(losses)), tau=float(qformer.temperature.data[0]), **extra)
        logger.info("stage I epoch %d loss %.4f %s", epoch + 1, entry.loss, entry.metrics)
    store.freeze()
    return qformer, trace
