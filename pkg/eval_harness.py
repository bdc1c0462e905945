"""
评测协议（纯函数，不依赖训练状态）：
- recall_at_k：图→文 / 文→图 R@K 与 R@mean，严格排序，并列时列号小者优先
- inverse_render：对 270 个标准渲染做模板匹配，精确的语义一致性判定
- semantic_consistency / caption_attribute_accuracy：四个属性逐一比对
- codebook_stats：码使用直方图、困惑度、死码数
- 报告 / 训练轨迹的 pydantic 结构，report.json 合并写出
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field

from errors import ConfigurationError, EmptyInputError
from synth_data import COLORS, COL_WORDS, ROW_WORDS, SHAPES, SIZES, SceneSpec, canonical_renders

ATTRIBUTES = ("shape", "color", "cell", "size")
CHANCE_CONSISTENCY = (1 / 3 + 1 / 5 + 1 / 9 + 1 / 2) / 4
INVERSE_TIE_TOL = 1e-12


# -------- 检索 --------


class RetrievalReport(BaseModel):
    i2t: dict[int, float] = Field(..., description="图→文 R@k")
    t2i: dict[int, float] = Field(..., description="文→图 R@k")
    r_mean: float = Field(..., description="六个 recall 的平均")
    n: int

    def as_metrics(self, prefix: str = "") -> dict[str, float]:
        out = {f"{prefix}i2t_r@{k}": v for k, v in self.i2t.items()}
        out.update({f"{prefix}t2i_r@{k}": v for k, v in self.t2i.items()})
        out[f"{prefix}r_mean"] = self.r_mean
        return out


def true_ranks(sim: np.ndarray) -> np.ndarray:
    """第 i 行真列 i 的名次（0 起）：严格更大者 + 相等且列号更小者"""
    sim = np.asarray(sim, dtype=np.float64)
    diag = np.diag(sim)[:, None]
    n = sim.shape[0]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    return ((sim > diag) | ((sim == diag) & lower)).sum(axis=1)


def recall_at_k(sim: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> RetrievalReport:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] == 0:
        raise ConfigurationError("recall_at_k", f"need a non-empty square matrix, got {sim.shape}")
    n = sim.shape[0]
    for k in ks:
        if not 1 <= k <= n:
            raise ConfigurationError("recall_at_k", f"k={k} outside [1, {n}]")
    r_i2t = true_ranks(sim)
    r_t2i = true_ranks(sim.T)
    i2t = {int(k): float((r_i2t < k).mean()) for k in ks}
    t2i = {int(k): float((r_t2i < k).mean()) for k in ks}
    r_mean = float(np.mean(list(i2t.values()) + list(t2i.values())))
    return RetrievalReport(i2t=i2t, t2i=t2i, r_mean=r_mean, n=n)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return a @ b.T


# -------- 语义一致性 --------


def inverse_render(image: np.ndarray) -> SceneSpec:
    """像素 MSE 最近的标准渲染；差距在 1e-12 以内的并列取枚举序最小者"""
    img = np.asarray(image, dtype=np.float64).reshape(1, -1)
    refs = canonical_renders().reshape(len(canonical_renders()), -1).astype(np.float64)
    mse = ((refs - img) ** 2).mean(axis=1)
    best = int(np.flatnonzero(mse <= mse.min() + INVERSE_TIE_TOL)[0])
    return SceneSpec.from_index(best)


# 全灰图像的匹配结果（最小面积形状 + 离灰最近的颜色 + 第 0 格 + small）
ALL_GRAY_SPEC = SceneSpec(shape=SHAPES.index("triangle"), color=COLORS.index("purple"), cell=0, size=0)


def attribute_hits(pred: SceneSpec, truth: SceneSpec) -> dict[str, bool]:
    return {
        "shape": pred.shape == truth.shape,
        "color": pred.color == truth.color,
        "cell": pred.cell == truth.cell,
        "size": pred.size == truth.size,
    }


def semantic_consistency(image: np.ndarray, truth: SceneSpec) -> float:
    return sum(attribute_hits(inverse_render(image), truth).values()) / 4


class ConsistencyReport(BaseModel):
    scores: list[float] = Field(default_factory=list, description="逐样本得分 ∈ {0, .25, .5, .75, 1}")
    mean: float = 0.0
    per_attribute: dict[str, float] = Field(default_factory=dict)

    def as_metrics(self, prefix: str = "") -> dict[str, float]:
        out = {f"{prefix}mean": self.mean}
        out.update({f"{prefix}{k}": v for k, v in self.per_attribute.items()})
        return out


def _report_from_hits(hits: list[dict[str, bool]]) -> ConsistencyReport:
    if not hits:
        raise EmptyInputError("no samples to score")
    scores = [sum(h.values()) / 4 for h in hits]
    per_attr = {a: float(np.mean([h[a] for h in hits])) for a in ATTRIBUTES}
    return ConsistencyReport(scores=scores, mean=float(np.mean(scores)), per_attribute=per_attr)


def consistency_report(images: Iterable[np.ndarray], truths: Sequence[SceneSpec]) -> ConsistencyReport:
    return _report_from_hits([attribute_hits(inverse_render(img), t) for img, t in zip(images, truths)])


# -------- 标题属性 --------

_SLOTS = {1: ("size", SIZES), 2: ("color", COLORS), 3: ("shape", SHAPES)}


def parse_caption(text: str) -> dict[str, int | None]:
    """按模板位置取槽位；缺失或不认识的槽位为 None"""
    words = text.lower().split()
    out: dict[str, int | None] = {a: None for a in ATTRIBUTES}
    for pos, (attr, options) in _SLOTS.items():
        if len(words) > pos and words[pos] in options:
            out[attr] = options.index(words[pos])
    if len(words) > 7 and words[6] in ROW_WORDS and words[7] in COL_WORDS:
        out["cell"] = ROW_WORDS.index(words[6]) * 3 + COL_WORDS.index(words[7])
    return out


def caption_attribute_accuracy(text: str, truth: SceneSpec) -> dict[str, bool]:
    slots = parse_caption(text)
    return {a: slots[a] is not None and slots[a] == getattr(truth, a) for a in ATTRIBUTES}


def caption_report(texts: Sequence[str], truths: Sequence[SceneSpec]) -> ConsistencyReport:
    return _report_from_hits([caption_attribute_accuracy(t, s) for t, s in zip(texts, truths)])


# -------- 码本诊断 --------


class CodebookStats(BaseModel):
    histogram: list[int]
    perplexity: float = Field(..., description="exp(使用分布的熵)，∈ [1, K]")
    dead_count: int = Field(..., description="从未被使用的码数")
    n_codes: int

    def as_metrics(self, prefix: str = "") -> dict[str, float]:
        return {
            f"{prefix}perplexity": self.perplexity,
            f"{prefix}dead_count": float(self.dead_count),
            f"{prefix}used": float(self.n_codes - self.dead_count),
        }


def codebook_stats(code_sequences: Sequence[Sequence[int]] | np.ndarray, n_codes: int) -> CodebookStats:
    flat = np.concatenate([np.asarray(s, dtype=np.int64).reshape(-1) for s in code_sequences]) if len(code_sequences) else np.zeros(0, np.int64)
    if flat.size == 0:
        raise EmptyInputError("codebook_stats needs at least one code")
    if flat.min() < 0 or flat.max() >= n_codes:
        raise ConfigurationError("codebook_stats", f"code outside [0, {n_codes})")
    hist = np.bincount(flat, minlength=n_codes)
    p = hist[hist > 0] / flat.size
    entropy = float(-(p * np.log(p)).sum())
    return CodebookStats(
        histogram=hist.tolist(),
        perplexity=math.exp(entropy),
        dead_count=int((hist == 0).sum()),
        n_codes=n_codes,
    )


# -------- 训练轨迹 / 报告 --------


class EpochLog(BaseModel):
    epoch: int
    loss: float
    metrics: dict[str, float] = Field(default_factory=dict)


class StageTrace(BaseModel):
    stage: str
    epochs: list[EpochLog] = Field(default_factory=list)

    def log(self, epoch: int, loss: float, **metrics: float) -> EpochLog:
        entry = EpochLog(epoch=epoch, loss=float(loss), metrics={k: float(v) for k, v in metrics.items()})
        self.epochs.append(entry)
        return entry

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path


def format_report(metrics: Mapping[str, float]) -> str:
    """固定顺序的制表符分隔报告"""
    return "\n".join(f"{k}\t{v:.6f}" for k, v in metrics.items())


def merge_report(path: Path | str, metrics: Mapping[str, float]) -> dict[str, float]:
    """合并写入 report.json（键排序，多次评测累加）"""
    path = Path(path)
    report: dict[str, float] = {}
    if path.exists():
        report = json.loads(path.read_text(encoding="utf-8"))
    report.update({k: float(v) for k, v in metrics.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
