"""
Reverse Q-Former 与去 token 化。
M_g 个可学习 query 之间全量自注意力（非因果），交叉注意码本条目（+ code_dec.pos 位置），
输出对齐冻结生成空间文本特征的 M_g × d_g 生成嵌入，再交给冻结图像解码器。
另含 P6 PPM 图像读写。
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

import nn_blocks as nb
import tensor_core as tc
from errors import ConfigurationError, ImageFormatError
from seed_config import SeedConfig
from tensor_core import ParamStore, Rng, Tensor

SECTION = "revq"


def revq_spec(cfg: SeedConfig) -> nb.StackSpec:
    b = cfg.backbone
    return nb.StackSpec(cfg.vq.revq_depth, b.d_g, cfg.vq.revq_heads, d_cross=cfg.qformer.d)


def init_reverse_qformer(store: ParamStore, cfg: SeedConfig, rng: Rng) -> None:
    scope = store.scope(SECTION)
    scope.add("queries", tc.init_normal(rng, (cfg.backbone.m_g, cfg.backbone.d_g), 1.0))
    nb.init_stack(scope, revq_spec(cfg), rng)


def reverse_qformer_forward(code_inputs: Tensor, store: ParamStore, cfg: SeedConfig) -> Tensor:
    """(N_q, d) 或 (B, N_q, d) 条目向量（已含位置）→ (.., M_g, d_g)"""
    x = tc.as_tensor(code_inputs)
    if x.shape[-1] != cfg.qformer.d:
        raise ConfigurationError("reverse_qformer_forward", f"code width {x.shape[-1]} != {cfg.qformer.d}")
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    scope = store.scope(SECTION)
    m = cfg.backbone.m_g
    q = tc.expand_batch(scope["queries"], x.shape[0])
    out = nb.transformer_stack(
        q, scope, revq_spec(cfg), nb.build_attention_mask(m, m, "full"), x,
        cross_mask=nb.build_attention_mask(m, x.shape[1], "full"),
    )
    return out.reshape(out.shape[1:]) if single else out


# -------- PPM --------


def write_ppm(path: Path | str, image: np.ndarray) -> Path:
    """3×H×W [0,1] → 二进制 P6，8 位，行优先 RGB 交错"""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ConfigurationError("write_ppm", f"expected (3, H, W), got {img.shape}")
    _, h, w = img.shape
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def _ppm_header(buf: bytes, path: Path) -> tuple[list[bytes], int]:
    """读 magic、宽、高、maxval 四个字段；返回字段与最后一个字段之后的位置"""
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageFormatError(path, "truncated header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(path, "truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
        if len(fields) == 1 and fields[0] != b"P6":
            raise ImageFormatError(path, f"bad magic {fields[0][:8]!r}, only binary P6 is supported")
    return fields, pos


def read_ppm(path: Path | str) -> np.ndarray:
    """二进制 P6（8 位）→ 3×H×W [0,1]；任何格式问题都抛 ImageFormatError"""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(path, "file not found")
    buf = path.read_bytes()
    fields, pos = _ppm_header(buf, path)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(path, f"bad header {b' '.join(fields)!r}") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise ImageFormatError(path, f"bad header: need positive size and maxval 255, got {w}x{h} maxval {maxval}")
    need = w * h * 3
    found = len(buf) - (pos + 1)
    if found < need:
        raise ImageFormatError(path, f"truncated pixel data: expected {need} bytes, found {max(found, 0)}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos + 1)
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)
