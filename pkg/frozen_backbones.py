"""
冻结骨干的桌面级替身，仓库内预训练一次后冻结：
- vit.*     ViT 图像编码器（patch 嵌入 + 位置 + transformer），vit.proj 投到对比空间
- txt.*     对比文本编码器：词嵌入 + 位置，非 PAD 取平均，MLP，L2 归一化
- gen_txt.* 生成空间文本编码器：M_g 个 query 交叉注意词嵌入
- img_dec.* 条件图像解码器：生成嵌入平均池化 → MLP → sigmoid，截断到 [0,1]
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

import nn_blocks as nb
import tensor_core as tc
from errors import ConfigurationError, EmptyInputError
from eval_harness import StageTrace, cosine_matrix, inverse_render, attribute_hits, recall_at_k
from seed_config import BackboneConfig, SeedConfig
from synth_data import IMAGE_SIZE, Dataset, TextVocab, default_vocab, distinct_spec_batches, shuffled_batches
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)

SECTIONS = ("vit", "txt", "gen_txt", "img_dec")
MAX_TEXT_LEN = 16


def vit_spec(cfg: BackboneConfig) -> nb.StackSpec:
    return nb.StackSpec(cfg.vit_depth, cfg.d_v, cfg.vit_heads)


def gen_spec(cfg: BackboneConfig) -> nb.StackSpec:
    return nb.StackSpec(cfg.gen_depth, cfg.d_g, cfg.gen_heads, d_cross=cfg.d_g)


def n_patches(cfg: BackboneConfig) -> int:
    return (IMAGE_SIZE // cfg.patch_size) ** 2


def init_backbones(cfg: BackboneConfig, vocab_size: int, rng: Rng) -> ParamStore:
    store = ParamStore()
    p = cfg.patch_size
    vit = store.scope("vit")
    tc.init_linear(vit, "patch", 3 * p * p, cfg.d_v, rng)
    vit.add("pos", tc.init_normal(rng, (n_patches(cfg), cfg.d_v), 0.02))
    nb.init_stack(vit, vit_spec(cfg), rng)
    tc.init_linear(vit, "proj", cfg.d_v, cfg.d_txt, rng)

    txt = store.scope("txt")
    txt.add("emb", tc.init_normal(rng, (vocab_size, cfg.txt_hidden), 0.5))
    txt.add("pos", tc.init_normal(rng, (MAX_TEXT_LEN, cfg.txt_hidden), 0.5))
    tc.init_linear(txt, "fc1", cfg.txt_hidden, cfg.txt_hidden, rng)
    tc.init_linear(txt, "fc2", cfg.txt_hidden, cfg.d_txt, rng)

    gen = store.scope("gen_txt")
    gen.add("emb", tc.init_normal(rng, (vocab_size, cfg.d_g), 0.5))
    gen.add("pos", tc.init_normal(rng, (MAX_TEXT_LEN, cfg.d_g), 0.5))
    gen.add("queries", tc.init_normal(rng, (cfg.m_g, cfg.d_g), 0.5))
    nb.init_stack(gen, gen_spec(cfg), rng)

    dec = store.scope("img_dec")
    tc.init_linear(dec, "fc1", cfg.d_g, cfg.dec_hidden, rng)
    tc.init_linear(dec, "fc2", cfg.dec_hidden, 3 * IMAGE_SIZE * IMAGE_SIZE, rng, std=0.01)
    return store


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B,3,32,32) → (B, T_v, 3·p·p)，光栅顺序：第 p 个 patch ↔ 网格 (p // g, p % g)"""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ConfigurationError("vit_encode", f"expected images of shape (B, 3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {images.shape}")
    b = images.shape[0]
    g = IMAGE_SIZE // patch
    x = images.reshape(b, 3, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, 3 * patch * patch)


@dataclass
class FrozenBundle:
    """四个冻结部件 + 它们的配置；所有方法对批量输入工作"""

    store: ParamStore
    cfg: BackboneConfig
    vocab: TextVocab

    # ---- 图像侧 ----
    def vit_encode(self, images: np.ndarray) -> Tensor:
        single = np.asarray(images).ndim == 3
        batch = np.asarray(images)[None] if single else images
        vit = self.store.scope("vit")
        x = tc.constant(patchify(batch, self.cfg.patch_size).astype(tc.get_dtype()))
        h = nb.linear(x, vit, "patch") + vit["pos"]
        t = h.shape[1]
        h = nb.transformer_stack(h, vit, vit_spec(self.cfg), nb.build_attention_mask(t, t, "full"))
        return h.reshape(t, self.cfg.d_v) if single else h

    def image_vector(self, features: Tensor) -> Tensor:
        """ViT 特征平均池化 → vit.proj → 单位向量"""
        single = features.ndim == 2
        feats = features.reshape((1,) + features.shape) if single else features
        out = tc.l2_normalize(nb.linear(feats.mean(axis=-2), self.store.scope("vit"), "proj"))
        return out.reshape(out.shape[-1]) if single else out

    # ---- 文本侧 ----
    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        self.vocab.check_ids(ids)
        if ids.shape[-1] > MAX_TEXT_LEN:
            raise ConfigurationError("text_encode", f"caption longer than {MAX_TEXT_LEN} tokens")
        return ids

    def text_encode(self, caption_ids: np.ndarray) -> Tensor:
        ids = self._check_ids(caption_ids)
        single = ids.ndim == 1
        ids = ids[None] if single else ids
        txt = self.store.scope("txt")
        L = ids.shape[1]
        h = tc.embedding(txt["emb"], ids) + txt["pos"][:L]
        keep = (ids != self.vocab.pad_id).astype(tc.get_dtype())
        weights = keep / np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
        pooled = (h * tc.constant(weights[..., None])).sum(axis=1)
        out = tc.l2_normalize(nb.linear(tc.gelu(nb.linear(pooled, txt, "fc1")), txt, "fc2"))
        return out.reshape(out.shape[-1]) if single else out

    def gen_text_encode(self, caption_ids: np.ndarray) -> Tensor:
        """(M_g, d_g) 生成空间文本特征"""
        ids = self._check_ids(caption_ids)
        single = ids.ndim == 1
        ids = ids[None] if single else ids
        gen = self.store.scope("gen_txt")
        B, L = ids.shape
        words = tc.embedding(gen["emb"], ids) + gen["pos"][:L]
        q = tc.expand_batch(gen["queries"], B)
        m = self.cfg.m_g
        out = nb.transformer_stack(
            q, gen, gen_spec(self.cfg), nb.build_attention_mask(m, m, "full"), words,
            cross_mask=nb.build_attention_mask(m, L, "full"),
        )
        return out.reshape(m, self.cfg.d_g) if single else out

    # ---- 解码 ----
    def decode_image_tensor(self, gen_emb: Tensor) -> Tensor:
        if gen_emb.shape[-2:] != (self.cfg.m_g, self.cfg.d_g):
            raise ConfigurationError("decode_image", f"expected (.., {self.cfg.m_g}, {self.cfg.d_g}), got {gen_emb.shape}")
        single = gen_emb.ndim == 2
        x = gen_emb.reshape((1,) + gen_emb.shape) if single else gen_emb
        dec = self.store.scope("img_dec")
        h = tc.gelu(nb.linear(x.mean(axis=-2), dec, "fc1"))
        pix = tc.sigmoid(nb.linear(h, dec, "fc2"))
        img = pix.reshape(pix.shape[:-1] + (3, IMAGE_SIZE, IMAGE_SIZE))
        return img.reshape(3, IMAGE_SIZE, IMAGE_SIZE) if single else img

    def decode_image(self, gen_emb: Tensor | np.ndarray) -> np.ndarray:
        with tc.no_grad():
            out = self.decode_image_tensor(tc.as_tensor(gen_emb))
        return np.clip(out.data, 0.0, 1.0)

    def digest(self) -> str:
        return "".join(self.store.digest(s + ".") for s in SECTIONS)


def vit_encode(image: np.ndarray, bundle: FrozenBundle) -> np.ndarray:
    with tc.no_grad():
        return bundle.vit_encode(image).data


def text_encode(caption_ids: np.ndarray, bundle: FrozenBundle) -> np.ndarray:
    with tc.no_grad():
        return bundle.text_encode(caption_ids).data


def gen_text_encode(caption_ids: np.ndarray, bundle: FrozenBundle) -> np.ndarray:
    with tc.no_grad():
        return bundle.gen_text_encode(caption_ids).data


def decode_image(gen_emb: np.ndarray, bundle: FrozenBundle) -> np.ndarray:
    return bundle.decode_image(gen_emb)


# -------- 预训练 --------


def _clip_metrics(bundle: FrozenBundle, data: Dataset) -> dict[str, float]:
    with tc.no_grad():
        img = bundle.image_vector(bundle.vit_encode(data.images)).data
        txt = bundle.text_encode(data.captions).data
    rep = recall_at_k(cosine_matrix(img, txt), ks=(1,))
    return {"i2t_r@1": rep.i2t[1], "t2i_r@1": rep.t2i[1]}


def _gen_metrics(bundle: FrozenBundle, data: Dataset) -> dict[str, float]:
    with tc.no_grad():
        imgs = bundle.decode_image(bundle.gen_text_encode(data.captions))
    mse = float(((imgs - data.canonical_images()) ** 2).mean())
    hits = [attribute_hits(inverse_render(im), s) for im, s in zip(imgs, data.specs)]
    acc = float(np.mean([sum(h.values()) / 4 for h in hits]))
    return {"decoder_mse": mse, "attribute_acc": acc}


def pretrain_backbones(
    train: Dataset,
    cfg: SeedConfig,
    rng: Rng,
    heldout: Dataset | None = None,
) -> tuple[FrozenBundle, list[StageTrace]]:
    """(a) ViT + 文本编码器对比训练；(b) 生成文本编码器 + 解码器像素 MSE；最后全部冻结"""
    from causal_qformer import contrastive_loss

    if len(train) == 0:
        raise EmptyInputError("pretrain_backbones: empty dataset")
    if len(train) < cfg.data.min_train_samples:
        raise ConfigurationError(
            "pretrain_backbones", f"need ≥ {cfg.data.min_train_samples} samples (data.min_train_samples), got {len(train)}"
        )
    bcfg = cfg.backbone
    vocab = default_vocab()
    store = init_backbones(bcfg, len(vocab), rng.child("init"))
    bundle = FrozenBundle(store, bcfg, vocab)
    images, captions, spec_idx = train.images, train.captions, train.spec_indices
    targets = train.canonical_images()

    # (a) 对比
    clip_trace = StageTrace(stage="backbones_clip")
    store.freeze("gen_txt.")
    store.freeze("img_dec.")
    opt = tc.Adam(store, lr=bcfg.optim_clip.lr, beta1=bcfg.optim_clip.beta1, beta2=bcfg.optim_clip.beta2, eps=bcfg.optim_clip.eps)
    brng = rng.child("clip")
    for epoch in range(bcfg.optim_clip.epochs):
        losses = []
        batches = distinct_spec_batches(spec_idx, bcfg.optim_clip.batch_size, brng)
        for idx in tqdm(batches, desc=f"clip {epoch + 1}", disable=not cfg.progress, leave=False):
            img_vec = bundle.image_vector(bundle.vit_encode(images[idx]))
            txt_vec = bundle.text_encode(captions[idx])
            loss = contrastive_loss(img_vec, txt_vec, bcfg.temperature)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        extra = _clip_metrics(bundle, heldout) if heldout is not None else {}
        entry = clip_trace.log(epoch + 1, float(np.mean(losses)), **extra)
        logger.info("backbones clip epoch %d loss %.4f %s", epoch + 1, entry.loss, entry.metrics)

    # (b) 生成
    gen_trace = StageTrace(stage="backbones_gen")
    store.freeze()
    store.unfreeze("gen_txt.")
    store.unfreeze("img_dec.")
    opt = tc.Adam(store, lr=bcfg.optim_gen.lr, beta1=bcfg.optim_gen.beta1, beta2=bcfg.optim_gen.beta2, eps=bcfg.optim_gen.eps)
    grng = rng.child("gen")
    for epoch in range(bcfg.optim_gen.epochs):
        losses = []
        for idx in tqdm(shuffled_batches(len(train), bcfg.optim_gen.batch_size, grng), desc=f"gen {epoch + 1}", disable=not cfg.progress, leave=False):
            pred = bundle.decode_image_tensor(bundle.gen_text_encode(captions[idx]))
            loss = tc.mse(pred, tc.constant(targets[idx]))
            loss.backward()
            opt.step()
            losses.append(loss.item())
        extra = _gen_metrics(bundle, heldout) if heldout is not None else {}
        entry = gen_trace.log(epoch + 1, float(np.mean(losses)), **extra)
        logger.info("backbones gen epoch %d loss %.5f %s", epoch + 1, entry.loss, entry.metrics)

    store.freeze()
    logger.info("backbones frozen, digest %s", bundle.digest()[:16])
    return bundle, [clip_trace, gen_trace]


def bundle_from_store(store: ParamStore, cfg: BackboneConfig) -> FrozenBundle:
    store.freeze()
    return FrozenBundle(store, cfg, default_vocab())
