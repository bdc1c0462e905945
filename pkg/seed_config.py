"""
运行配置：单个 JSON 文件 + pydantic 校验。
玩具规模与大尺寸都只是配置值（configs/default_seed_config.json / configs/full_scale.json）。
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError
from synth_data import CAPTION_LEN, IMAGE_SIZE, PREFIX_I2T

logger = logging.getLogger(__name__)


def _raise_all(checks: list[tuple[str, str, bool]]) -> None:
    """一个校验器里的全部违反项一次抛出，每行 `字段: 说明`"""
    problems = [f"{field}: {msg}" for field, msg, violated in checks if violated]
    if problems:
        raise ValueError("\n".join(problems))


class _Section(BaseModel):
    model_config = ConfigDict(extra="ignore")


class OptimSettings(_Section):
    """单阶段 Adam 设置（常数学习率）"""

    lr: float = Field(1e-3, gt=0, description="学习率")
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(10, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class DataConfig(_Section):
    n_train: int = Field(2048, ge=1, description="训练样本数")
    n_heldout: int = Field(128, ge=1, le=270, description="留出样本数（spec 互不相同）")
    jitter_px: int = Field(1, ge=0, le=2, description="中心抖动像素，0 = 关闭")
    min_train_samples: int = Field(512, ge=1, description="骨干预训练与 Stage I 的最少样本数")


class BackboneConfig(_Section):
    """冻结骨干的替身：ViT、对比文本编码器、生成空间文本编码器、图像解码器"""

    patch_size: int = Field(8, ge=1, description="8 → 4×4 网格；2 → 16×16")
    d_v: int = Field(48, ge=1)
    vit_heads: int = Field(4, ge=1)
    vit_depth: int = Field(1, ge=0)
    d_txt: int = Field(32, ge=1, description="对比空间宽度")
    txt_hidden: int = Field(64, ge=1)
    d_g: int = Field(32, ge=1, description="生成空间宽度")
    m_g: int = Field(16, ge=1, description="生成 token 数（大尺寸配置 77）")
    gen_heads: int = Field(4, ge=1)
    gen_depth: int = Field(1, ge=1, description="至少 1 层，否则输出与标题无关")
    dec_hidden: int = Field(256, ge=1)
    temperature: float = Field(0.07, gt=0, description="骨干对比预训练温度（固定）")
    optim_clip: OptimSettings = Field(default_factory=lambda: OptimSettings(lr=3e-3, epochs=15))
    optim_gen: OptimSettings = Field(default_factory=lambda: OptimSettings(lr=3e-3, epochs=30))

    @field_validator("patch_size")
    @classmethod
    def _patch_divides(cls, v: int) -> int:
        if IMAGE_SIZE % v:
            raise ValueError(f"patch size must divide the image size {IMAGE_SIZE}")
        return v

    @model_validator(mode="after")
    def _heads_divide(self):
        _raise_all([
            ("d_v", "must be divisible by vit_heads", self.d_v % self.vit_heads != 0),
            ("d_g", "must be divisible by gen_heads", self.d_g % self.gen_heads != 0),
        ])
        return self


class QFormerConfig(_Section):
    n_queries: int = Field(8, description="因果 query 数 N_q（大尺寸配置 32）")
    d: int = Field(32, ge=1, description="因果嵌入 / 码本宽度")
    heads: int = Field(4, ge=1)
    depth: int = Field(2, ge=0)
    tau_init: float = Field(0.07, gt=0)
    tau_min: float = Field(0.01, gt=0)
    tau_max: float = Field(1.0, gt=0)
    optim: OptimSettings = Field(default_factory=lambda: OptimSettings(lr=2e-3, epochs=12))

    @field_validator("n_queries")
    @classmethod
    def _two_queries(cls, v: int) -> int:
        if v < 2:
            raise ValueError("number of queries must be ≥ 2")
        return v

    @model_validator(mode="after")
    def _ranges(self):
        _raise_all([
            ("d", "must be divisible by heads", self.d % self.heads != 0),
            ("tau_init", "must lie in [tau_min, tau_max]", not self.tau_min <= self.tau_init <= self.tau_max),
        ])
        return self


class VQConfig(_Section):
    codebook_size: int = Field(64, description="码本大小 K")
    beta: float = Field(0.25, ge=0, description="commitment 权重")
    gamma: float = Field(0.99, ge=0, le=1, description="EMA 衰减")
    lambda_gen: float = Field(1.0, ge=0)
    dead_threshold: float = Field(1e-3, ge=0, description="EMA 使用占比低于此值的码重新播种")
    metric: Literal["l2", "cosine"] = "l2"
    decoder_depth: int = Field(2, ge=0)
    decoder_heads: int = Field(4, ge=1)
    decoder_causal: bool = True
    revq_depth: int = Field(2, ge=1)
    revq_heads: int = Field(4, ge=1)
    revq_input: Literal["entries", "reconstructed"] = "entries"
    tune_qformer: bool = False
    optim: OptimSettings = Field(default_factory=lambda: OptimSettings(lr=2e-3, epochs=15))

    @field_validator("codebook_size")
    @classmethod
    def _two_codes(cls, v: int) -> int:
        if v < 2:
            raise ValueError("codebook size must be ≥ 2")
        return v


class LmConfig(_Section):
    d_lm: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    depth: int = Field(2, ge=0)
    context: int = Field(32, ge=1, description="最大序列长度")
    lora_rank: int = Field(4, ge=1)
    lora_alpha: float = Field(8.0, gt=0)
    lora_targets: list[Literal["q", "k", "v", "o"]] = Field(default_factory=lambda: ["q", "v"])
    visual_input: Literal["codebook_fc", "learned_embedding"] = "codebook_fc"
    warmup_epochs: int = Field(1, ge=0, description="只训练 i2t 的预热轮数")
    max_caption_tokens: int = Field(16, ge=1)
    optim_pretrain: OptimSettings = Field(default_factory=lambda: OptimSettings(lr=3e-3, epochs=10))
    optim_multimodal: OptimSettings = Field(default_factory=lambda: OptimSettings(lr=2e-3, batch_size=32, epochs=12))

    @model_validator(mode="after")
    def _ranges(self):
        _raise_all([
            ("d_lm", "must be divisible by heads", self.d_lm % self.heads != 0),
            ("lora_rank", "must not exceed d_lm", self.lora_rank > self.d_lm),
        ])
        return self


class PathsConfig(_Section):
    run_dir: str = Field("runs/default", description="运行目录（相对仓库根），SEED_RUN_DIR 可覆盖")


class SeedConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    progress: bool = Field(True, description="是否显示 tqdm 进度条")
    data: DataConfig = Field(default_factory=DataConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    qformer: QFormerConfig = Field(default_factory=QFormerConfig)
    vq: VQConfig = Field(default_factory=VQConfig)
    lm: LmConfig = Field(default_factory=LmConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _cross_section(self):
        need = multimodal_context(self.qformer.n_queries)
        _raise_all([
            ("qformer.d", "must be divisible by vq.decoder_heads", self.qformer.d % self.vq.decoder_heads != 0),
            ("backbone.d_g", "must be divisible by vq.revq_heads", self.backbone.d_g % self.vq.revq_heads != 0),
            ("lm.context", f"must be ≥ {need} to hold one image-to-text sequence", self.lm.context < need),
        ])
        return self

    @property
    def n_grid(self) -> int:
        return IMAGE_SIZE // self.backbone.patch_size

    def with_overrides(self, *, seed: int | None = None, run_dir: str | Path | None = None) -> "SeedConfig":
        cfg = self
        if seed is not None:
            cfg = cfg.model_copy(update={"seed": int(seed)})
        if run_dir is not None:
            cfg = cfg.model_copy(update={"paths": cfg.paths.model_copy(update={"run_dir": str(run_dir)})})
        return cfg


def multimodal_context(n_queries: int) -> int:
    """i2t 序列长度：[BOS][BOI] codes [EOI] 前缀 标题 [EOS]"""
    return 3 + n_queries + len(PREFIX_I2T) + CAPTION_LEN + 1


def _unknown_keys(raw: Any, model: type[BaseModel], prefix: str = "") -> list[str]:
    if not isinstance(raw, dict):
        return []
    out = []
    for key, value in raw.items():
        path = f"{prefix}{key}"
        info = model.model_fields.get(key)
        if info is None:
            out.append(path)
            continue
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            out.extend(_unknown_keys(value, ann, path + "."))
    return out


def _format_errors(err: dict) -> list[str]:
    loc = ".".join(str(p) for p in err.get("loc", ()))
    msg = str(err.get("msg", ""))
    for prefix in ("Value error, ", "Assertion failed, "):
        if msg.startswith(prefix):
            msg = msg[len(prefix):]
    if err.get("type") != "value_error" or ": " not in msg:
        return [f"{loc or '<root>'}: {msg}"]
    # 模型级校验器的多行消息已带字段名，补上所在段
    return [f"{loc}.{line}" if loc else line for line in msg.splitlines()]


def parse_config(raw: dict) -> SeedConfig:
    unknown = _unknown_keys(raw, SeedConfig)
    if unknown:
        logger.warning("unknown config keys ignored: %s", ", ".join(unknown))
    try:
        return SeedConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError("invalid config", [m for err in e.errors() for m in _format_errors(err)]) from None


def load_config(path: Path | str) -> SeedConfig:
    """读取并校验；缺文件 / 解析失败 / 约束违反 各自报错"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error in {path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config parse error in {path}: top level must be an object")
    return parse_config(raw)
