"""
多模态自回归：统一词表上的玩具 decoder-only LM。

统一词表：文本 [0, V_t)，视觉码 [V_t, V_t+K)，之后依次 BOS, EOS, BOI, EOI, PAD。
- 基座 lm.*：词嵌入（文本 + 5 个特殊符号）、因果 transformer、覆盖全词表的输出头；预训练后冻结
- lora.*：Q / V 投影上的低秩增量，B 初始化为 0
- proj.*：视觉输入投影（码本条目 → d_lm）与视觉码输出增量 code_head
- 生成：图→文贪心解码只在文本词 + EOS 中选；文→图固定解码 N_q 个视觉码
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

import nn_blocks as nb
import tensor_core as tc
from errors import ConfigurationError, EmptyInputError, MissingCheckpointError, VocabError
from eval_harness import StageTrace, caption_report, consistency_report
from seed_config import SeedConfig
from synth_data import PREFIX_I2T, PREFIX_T2I, Dataset, TextVocab, default_vocab, shuffled_batches
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)

SPECIAL_NAMES = ("bos", "eos", "boi", "eoi", "pad")


# -------- 统一词表 --------


@dataclass(frozen=True)
class UnifiedVocab:
    n_text: int
    n_codes: int

    def __post_init__(self):
        if self.n_text < 1 or self.n_codes < 1:
            raise ConfigurationError("build_unified_vocab", "vocabulary sizes must be >= 1")

    @property
    def size(self) -> int:
        return self.n_text + self.n_codes + len(SPECIAL_NAMES)

    def special(self, name: str) -> int:
        return self.n_text + self.n_codes + SPECIAL_NAMES.index(name)

    @property
    def bos(self) -> int:
        return self.special("bos")

    @property
    def eos(self) -> int:
        return self.special("eos")

    @property
    def boi(self) -> int:
        return self.special("boi")

    @property
    def eoi(self) -> int:
        return self.special("eoi")

    @property
    def pad(self) -> int:
        return self.special("pad")

    def code_to_id(self, code) -> np.ndarray | int:
        return np.asarray(code, dtype=np.int64) + self.n_text if not np.isscalar(code) else int(code) + self.n_text

    def id_to_code(self, token_id) -> np.ndarray | int:
        return np.asarray(token_id, dtype=np.int64) - self.n_text if not np.isscalar(token_id) else int(token_id) - self.n_text

    def is_code(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        return (ids >= self.n_text) & (ids < self.n_text + self.n_codes)

    def table_rows(self, ids: np.ndarray) -> np.ndarray:
        """文本 / 特殊 id → lm.emb 行号（视觉码位置给 0，由调用方屏蔽）"""
        ids = np.asarray(ids, dtype=np.int64)
        special = ids >= self.n_text + self.n_codes
        rows = np.where(special, ids - self.n_codes, ids)
        return np.where(self.is_code(ids), 0, rows)

    def check(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise VocabError(f"token id outside unified vocabulary [0, {self.size})")
        return ids


def build_unified_vocab(n_text: int, n_codes: int) -> UnifiedVocab:
    return UnifiedVocab(n_text, n_codes)


# -------- 序列构造 --------


def prefix_ids(words: tuple[str, ...], text_vocab: TextVocab | None = None) -> list[int]:
    text_vocab = text_vocab or default_vocab()
    return [text_vocab.stoi[w] for w in words]


def compose_sequence(
    direction: str,
    codes,
    caption_ids,
    vocab: UnifiedVocab,
    n_queries: int | None = None,
    text_vocab: TextVocab | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    i2t: [BOS][BOI] c₁..c_N [EOI] a photo of caption [EOS]，损失只在 caption + EOS
    t2i: [BOS] generate an image caption [BOI] c₁..c_N [EOI]，损失只在 codes + EOI
    """
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    caption = [int(c) for c in np.asarray(caption_ids).reshape(-1)]
    if n_queries is not None and codes.size != n_queries:
        raise ConfigurationError("compose_sequence", f"expected {n_queries} codes, got {codes.size}")
    if codes.size == 0:
        raise ConfigurationError("compose_sequence", "empty code sequence")
    if codes.min() < 0 or codes.max() >= vocab.n_codes:
        raise VocabError(f"code outside [0, {vocab.n_codes})")
    visual = [int(c) for c in vocab.code_to_id(codes)]
    parts: list[tuple[list[int], bool]]
    if direction == "i2t":
        parts = [
            ([vocab.bos, vocab.boi] + visual + [vocab.eoi], False),
            (prefix_ids(PREFIX_I2T, text_vocab), False),
            (caption + [vocab.eos], True),
        ]
    elif direction == "t2i":
        parts = [
            ([vocab.bos] + prefix_ids(PREFIX_T2I, text_vocab) + caption + [vocab.boi], False),
            (visual + [vocab.eoi], True),
        ]
    else:
        raise ConfigurationError("compose_sequence", f"unknown direction {direction!r}")
    ids = np.asarray([t for seg, _ in parts for t in seg], dtype=np.int64)
    mask = np.asarray([flag for seg, flag in parts for _ in seg], dtype=bool)
    return ids, mask


def pad_batch(seqs: list[np.ndarray], masks: list[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """右侧补 PAD；因果掩码下补位不影响前面位置，损失掩码为 False"""
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), pad_id, dtype=np.int64)
    m = np.zeros((len(seqs), length), dtype=bool)
    for i, (s, k) in enumerate(zip(seqs, masks)):
        ids[i, : len(s)] = s
        m[i, : len(k)] = k
    return ids, m


# -------- 参数 --------


def lm_spec(cfg: SeedConfig) -> nb.StackSpec:
    return nb.StackSpec(cfg.lm.depth, cfg.lm.d_lm, cfg.lm.heads)


def init_base_lm(cfg: SeedConfig, vocab: UnifiedVocab, rng: Rng) -> ParamStore:
    store = ParamStore()
    lm = store.scope("lm")
    d = cfg.lm.d_lm
    lm.add("emb", tc.init_normal(rng, (vocab.n_text + len(SPECIAL_NAMES), d), 1.0))
    nb.init_stack(lm, lm_spec(cfg), rng)
    tc.init_linear(lm, "head", d, vocab.size, rng)
    return store


def init_adapters(store: ParamStore, cfg: SeedConfig, vocab: UnifiedVocab, rng: Rng) -> None:
    """lora.* 与 proj.*（写进同一个 store）"""
    d, r = cfg.lm.d_lm, cfg.lm.lora_rank
    for i in range(cfg.lm.depth):
        for t in cfg.lm.lora_targets:
            base = f"lora.blocks.{i}.attn.{t}"
            store.add(f"{base}.A", tc.init_normal(rng, (r, d), 1.0 / np.sqrt(d)))
            store.add(f"{base}.B", np.zeros((d, r), dtype=tc.get_dtype()))
    proj = store.scope("proj")
    if cfg.lm.visual_input == "codebook_fc":
        tc.init_linear(proj, "in", cfg.qformer.d, d, rng)
    else:
        proj.add("code_emb", tc.init_normal(rng, (vocab.n_codes, d), 1.0))
    proj.add("code_head.w", np.zeros((d, vocab.n_codes), dtype=tc.get_dtype()))


# -------- LoRA --------


def lora_apply(base_out: Tensor, A: Tensor, B: Tensor, alpha: float, r: int, x: Tensor) -> Tensor:
    """adapted(x) = base(x) + (α/r)·B·(A·x)"""
    if r < 1 or A.shape[0] != r or B.shape[1] != r:
        raise ConfigurationError("lora_apply", f"rank {r} vs A {A.shape}, B {B.shape}")
    x = tc.as_tensor(x)
    if x.shape[-1] != A.shape[1]:
        raise ConfigurationError("lora_apply", f"input width {x.shape[-1]} != A width {A.shape[1]}")
    single = x.ndim == 1
    xx = x.reshape(1, x.shape[0]) if single else x
    delta = tc.matmul(tc.matmul(xx, A.T), B.T)
    if single:
        delta = delta.reshape(delta.shape[-1])
    return tc.as_tensor(base_out) + tc.scale(delta, alpha / r)


def make_lora_adapter(store: ParamStore, cfg: SeedConfig) -> nb.Adapter:
    targets = set(cfg.lm.lora_targets)
    r, alpha = cfg.lm.lora_rank, cfg.lm.lora_alpha

    def adapter(name: str, x: Tensor, base: Tensor) -> Tensor:
        parts = name.split(".")
        if parts[0] != "lm" or parts[-2] != "attn" or parts[-1] not in targets:
            return base
        key = "lora." + ".".join(parts[1:])
        return lora_apply(base, store[f"{key}.A"], store[f"{key}.B"], alpha, r, x)

    return adapter


# -------- 前向 --------


def embed_tokens(
    ids: np.ndarray,
    store: ParamStore,
    vocab: UnifiedVocab,
    codebook_entries: np.ndarray | Tensor | None = None,
    visual_input: str = "codebook_fc",
) -> Tensor:
    """文本 / 特殊 id 查表；视觉 id 走 proj（码本条目不回传梯度）"""
    ids = vocab.check(ids)
    is_code = vocab.is_code(ids)
    text = tc.embedding(store["lm.emb"], vocab.table_rows(ids))
    if not is_code.any():
        return text
    codes = np.where(is_code, ids - vocab.n_text, 0)
    proj = store.scope("proj")
    if visual_input == "codebook_fc":
        if codebook_entries is None:
            raise MissingCheckpointError("codebook")
        table = codebook_entries.data if isinstance(codebook_entries, Tensor) else np.asarray(codebook_entries)
        visual = nb.linear(tc.constant(table[codes]), proj, "in")
    else:
        visual = tc.embedding(proj["code_emb"], codes)
    m = is_code[..., None].astype(tc.get_dtype())
    return text * tc.constant(1.0 - m) + visual * tc.constant(m)


def lm_forward(
    embeddings: Tensor,
    store: ParamStore,
    cfg: SeedConfig,
    vocab: UnifiedVocab,
    adapter: nb.Adapter | None = None,
) -> Tensor:
    """(B, L, d_lm) → (B, L, |V|)；位置 t 只看 ≤ t"""
    x = embeddings
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    L = x.shape[1]
    if L > cfg.lm.context:
        raise ConfigurationError("lm_forward", f"sequence length {L} exceeds context {cfg.lm.context}")
    x = x + tc.constant(nb.sinusoidal_positions(L, cfg.lm.d_lm))
    lm = store.scope("lm")
    x = nb.transformer_stack(x, lm, lm_spec(cfg), nb.build_attention_mask(L, L, "causal"), adapter=adapter)
    logits = nb.linear(x, lm, "head")
    if "proj.code_head.w" in store:
        delta = tc.matmul(x, store["proj.code_head.w"])
        b = x.shape[0]
        left = tc.constant(np.zeros((b, L, vocab.n_text), dtype=tc.get_dtype()))
        right = tc.constant(np.zeros((b, L, len(SPECIAL_NAMES)), dtype=tc.get_dtype()))
        logits = logits + tc.concat([left, delta, right], axis=-1)
    return logits.reshape(logits.shape[1:]) if single else logits


@dataclass
class MultimodalLM:
    store: ParamStore
    cfg: SeedConfig
    vocab: UnifiedVocab
    codebook_entries: np.ndarray | None = None
    tokenizer: object | None = None  # SeedTokenizer，生成图像时需要

    @property
    def has_adapters(self) -> bool:
        return bool(self.store.names("lora."))

    def logits(self, ids: np.ndarray, *, use_lora: bool = True) -> Tensor:
        emb = embed_tokens(ids, self.store, self.vocab, self.codebook_entries, self.cfg.lm.visual_input)
        adapter = make_lora_adapter(self.store, self.cfg) if use_lora and self.has_adapters else None
        return lm_forward(emb, self.store, self.cfg, self.vocab, adapter)

    def sequence_loss(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """下一 token 交叉熵，只在 mask[:, 1:] 为真的目标上计"""
        logits = self.logits(ids[:, :-1])
        return tc.cross_entropy(logits, ids[:, 1:], mask[:, 1:])

    def base_digest(self) -> str:
        return self.store.digest("lm.")


# -------- 预训练基座 --------


def caption_lm_sequences(captions: np.ndarray, vocab: UnifiedVocab) -> tuple[np.ndarray, np.ndarray]:
    """每条标题三种形式：裸标题 / "a photo of" 前缀 / "generate an image" 前缀"""
    seqs, masks = [], []
    for cap in np.asarray(captions):
        cap = [int(c) for c in cap]
        for prefix in ((), PREFIX_I2T, PREFIX_T2I):
            ids = [vocab.bos] + prefix_ids(prefix) + cap + [vocab.eos]
            seqs.append(np.asarray(ids, dtype=np.int64))
            masks.append(np.asarray([False] + [True] * (len(ids) - 1)))
    return pad_batch(seqs, masks, vocab.pad)


def caption_perplexity(model: MultimodalLM, captions: np.ndarray) -> float:
    """[BOS] c [EOS] 上 9 个预测位置的平均 NLL 取 exp"""
    v = model.vocab
    ids = np.asarray([[v.bos] + [int(c) for c in cap] + [v.eos] for cap in captions], dtype=np.int64)
    mask = np.ones_like(ids, dtype=bool)
    with tc.no_grad():
        nll = model.sequence_loss(ids, mask).item()
    return float(np.exp(nll))


def pretrain_toy_lm(
    captions: np.ndarray,
    cfg: SeedConfig,
    rng: Rng,
    heldout_captions: np.ndarray | None = None,
) -> tuple[MultimodalLM, StageTrace]:
    captions = np.asarray(captions)
    if captions.size == 0:
        raise EmptyInputError("pretrain_toy_lm: empty caption corpus")
    vocab = build_unified_vocab(len(default_vocab()), cfg.vq.codebook_size)
    store = init_base_lm(cfg, vocab, rng.child("lm.init"))
    model = MultimodalLM(store, cfg, vocab)
    ids, mask = caption_lm_sequences(captions, vocab)
    o = cfg.lm.optim_pretrain
    opt = tc.Adam(store, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    trace = StageTrace(stage="lm")
    brng = rng.child("lm.batches")
    for epoch in range(o.epochs):
        losses = []
        for idx in tqdm(shuffled_batches(len(ids), o.batch_size, brng), desc=f"lm {epoch + 1}", disable=not cfg.progress, leave=False):
            loss = model.sequence_loss(ids[idx], mask[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        extra = {"heldout_ppl": caption_perplexity(model, heldout_captions)} if heldout_captions is not None else {}
        entry = trace.log(epoch + 1, float(np.mean(losses)), **extra)
        logger.info("base LM epoch %d loss %.4f %s", epoch + 1, entry.loss, entry.metrics)
    store.freeze()
    return model, trace


# -------- 生成 --------


def _masked_logits(last: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    out = np.where(allowed[None, :], last.astype(np.float64), -np.inf)
    return out


def text_candidates(vocab: UnifiedVocab, text_vocab: TextVocab | None = None) -> np.ndarray:
    """文本词 + EOS；视觉码、其它特殊符号、文本词表自带的特殊符号全部屏蔽"""
    text_vocab = text_vocab or default_vocab()
    allowed = np.zeros(vocab.size, dtype=bool)
    allowed[: vocab.n_text] = True
    for sid in text_vocab.special_ids:
        allowed[sid] = False
    allowed[vocab.eos] = True
    return allowed


def code_candidates(vocab: UnifiedVocab) -> np.ndarray:
    allowed = np.zeros(vocab.size, dtype=bool)
    allowed[vocab.n_text: vocab.n_text + vocab.n_codes] = True
    return allowed


def greedy_captions(model: MultimodalLM, codes: np.ndarray, *, use_lora: bool = True) -> list[str]:
    """codes (B, N_q) → 每张图一条标题；遇 EOS 或达到上限停止"""
    v = model.vocab
    text_vocab = default_vocab()
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    prefix = [v.bos, v.boi]
    rows = [prefix + [int(t) for t in v.code_to_id(c)] + [v.eoi] + prefix_ids(PREFIX_I2T) for c in codes]
    ids = np.asarray(rows, dtype=np.int64)
    allowed = text_candidates(v, text_vocab)
    steps = min(model.cfg.lm.max_caption_tokens, model.cfg.lm.context - ids.shape[1] + 1)
    out: list[list[int]] = [[] for _ in range(len(ids))]
    done = np.zeros(len(ids), dtype=bool)
    with tc.no_grad():
        for _ in range(steps):
            last = model.logits(ids, use_lora=use_lora).data[:, -1, :]
            nxt = np.argmax(_masked_logits(last, allowed), axis=-1)
            for i, t in enumerate(nxt):
                if done[i]:
                    continue
                if t == v.eos:
                    done[i] = True
                else:
                    out[i].append(int(t))
            if done.all() or ids.shape[1] >= model.cfg.lm.context:
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return [text_vocab.decode(o) for o in out]


def generate_caption(images: np.ndarray, model: MultimodalLM) -> list[str] | str:
    """图像 → 标题（单张返回 str，批量返回 list）"""
    if model.tokenizer is None:
        raise MissingCheckpointError("codebook")
    images = np.asarray(images)
    single = images.ndim == 3
    codes = model.tokenizer.tokenize(images[None] if single else images)
    caps = greedy_captions(model, codes)
    return caps[0] if single else caps


@dataclass
class GeneratedImage:
    token_ids: np.ndarray
    codes: np.ndarray
    image: np.ndarray


def generate_codes(
    model: MultimodalLM,
    captions: np.ndarray,
    rng: Rng | None = None,
    mode: str = "greedy",
    temperature: float = 1.0,
) -> np.ndarray:
    """captions (B, L) → 视觉 token id (B, N_q)，候选限制在视觉码区间"""
    if mode not in ("greedy", "sample"):
        raise ConfigurationError("generate_image", f"unknown mode {mode!r}")
    if mode == "sample" and (rng is None or temperature <= 0):
        raise ConfigurationError("generate_image", "sampling needs an rng and temperature > 0")
    v = model.vocab
    caps = np.atleast_2d(np.asarray(captions, dtype=np.int64))
    ids = np.asarray([[v.bos] + prefix_ids(PREFIX_T2I) + [int(t) for t in c] + [v.boi] for c in caps], dtype=np.int64)
    allowed = code_candidates(v)
    n = model.cfg.qformer.n_queries
    emitted = np.zeros((len(ids), n), dtype=np.int64)
    with tc.no_grad():
        for step in range(n):
            last = _masked_logits(model.logits(ids).data[:, -1, :], allowed)
            if mode == "greedy":
                nxt = np.argmax(last, axis=-1)
            else:
                z = last / temperature
                z = z - z.max(axis=-1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=-1, keepdims=True)
                nxt = np.asarray([rng.choice(v.size, p=row) for row in p], dtype=np.int64)
            emitted[:, step] = nxt
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return emitted


def generate_image(
    caption,
    model: MultimodalLM,
    rng: Rng | None = None,
    mode: str = "greedy",
    temperature: float = 1.0,
) -> GeneratedImage:
    """标题（文本或 id）→ N_q 个视觉 token → 去 token 化成图像"""
    if model.tokenizer is None:
        raise MissingCheckpointError("revq")
    ids = np.asarray(default_vocab().encode(caption) if isinstance(caption, str) else caption, dtype=np.int64)
    token_ids = generate_codes(model, ids[None], rng, mode, temperature)[0]
    codes = model.vocab.id_to_code(token_ids)
    return GeneratedImage(token_ids, codes, model.tokenizer.detokenize(codes))


# -------- 多模态训练 --------


def build_multimodal_sequences(
    codes: np.ndarray,
    captions: np.ndarray,
    vocab: UnifiedVocab,
    n_queries: int,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for direction in ("i2t", "t2i"):
        pairs = [compose_sequence(direction, c, cap, vocab, n_queries) for c, cap in zip(codes, captions)]
        out[direction] = pad_batch([p[0] for p in pairs], [p[1] for p in pairs], vocab.pad)
    return out


def next_code_accuracy(model: MultimodalLM, ids: np.ndarray, mask: np.ndarray) -> float:
    """t2i teacher forcing：视觉码位置上，限制在码区间内的 top-1 命中率"""
    allowed = code_candidates(model.vocab)
    with tc.no_grad():
        logits = model.logits(ids[:, :-1]).data
    targets = ids[:, 1:]
    pos = mask[:, 1:] & model.vocab.is_code(targets)
    pred = np.argmax(np.where(allowed, logits, -np.inf), axis=-1)
    return float((pred[pos] == targets[pos]).mean())


def multimodal_metrics(model: MultimodalLM, data: Dataset, codes: np.ndarray, with_images: bool = False) -> dict[str, float]:
    seqs = build_multimodal_sequences(codes, data.captions, model.vocab, model.cfg.qformer.n_queries)
    caps = greedy_captions(model, codes)
    out = {
        "caption_acc": caption_report(caps, data.specs).mean,
        "next_code_acc": next_code_accuracy(model, *seqs["t2i"]),
    }
    if with_images and model.tokenizer is not None:
        gen = model.vocab.id_to_code(generate_codes(model, data.captions))
        images = [model.tokenizer.detokenize(c) for c in gen]
        out["t2i_consistency"] = consistency_report(images, data.specs).mean
    return out


def train_multimodal(
    train: Dataset,
    tokenizer,
    base: MultimodalLM | None,
    cfg: SeedConfig,
    rng: Rng,
    heldout: Dataset | None = None,
) -> tuple[MultimodalLM, StageTrace]:
    """只训练 lora.* 与 proj.*；基座与码本逐位不变。预热轮只做 i2t，之后每个 batch 两个方向各半"""
    if tokenizer is None:
        raise MissingCheckpointError("codebook")
    if base is None:
        raise MissingCheckpointError("lm")
    if len(train) == 0:
        raise EmptyInputError("train_multimodal: empty dataset")
    base.store.freeze()
    store = ParamStore().merge(base.store)
    vocab = base.vocab
    init_adapters(store, cfg, vocab, rng.child("mm.init"))
    model = MultimodalLM(store, cfg, vocab, tokenizer.codebook.entries.copy(), tokenizer)
    n_q = cfg.qformer.n_queries

    codes = np.concatenate([tokenizer.tokenize(train.images[s:s + 256]) for s in range(0, len(train), 256)])
    seqs = build_multimodal_sequences(codes, train.captions, vocab, n_q)
    held_codes = tokenizer.tokenize(heldout.images) if heldout is not None else None

    o = cfg.lm.optim_multimodal
    opt = tc.Adam(store, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    trace = StageTrace(stage="lm_mm")
    brng = rng.child("mm.batches")
    for epoch in range(o.epochs):
        warmup = epoch < cfg.lm.warmup_epochs
        losses = []
        for idx in tqdm(shuffled_batches(len(train), o.batch_size, brng), desc=f"mm {epoch + 1}", disable=not cfg.progress, leave=False):
            if warmup or len(idx) < 2:
                ids, mask = seqs["i2t"][0][idx], seqs["i2t"][1][idx]
            else:
                half = len(idx) // 2
                a_ids, a_mask = seqs["i2t"][0][idx[:half]], seqs["i2t"][1][idx[:half]]
                b_ids, b_mask = seqs["t2i"][0][idx[half:]], seqs["t2i"][1][idx[half:]]
                ids, mask = pad_batch(list(a_ids) + list(b_ids), list(a_mask) + list(b_mask), vocab.pad)
            loss = model.sequence_loss(ids, mask)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        extra = multimodal_metrics(model, heldout, held_codes) if heldout is not None else {}
        entry = trace.log(epoch + 1, float(np.mean(losses)), warmup=float(warmup), **extra)
        logger.info("multimodal epoch %d loss %.4f %s", epoch + 1, entry.loss, entry.metrics)
    store.freeze("lora.")
    store.freeze("proj.")
    return model, trace
