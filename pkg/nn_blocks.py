"""
Transformer 部件：任意掩码的多头注意力、交叉注意力、pre-norm 残差块、堆叠。

参数命名（相对 scope）：
  ln1.{g,b}  attn.{q,k,v,o}.{w,b}
  ln_c.{g,b} cross.{q,k,v,o}.{w,b}      （仅带交叉注意力的块）
  ln2.{g,b}  ffn.{fc1,fc2}.{w,b}
  堆叠：blocks.<i>.*，depth ≥ 1 时末尾 ln_f.{g,b}
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

import tensor_core as tc
from errors import ConfigurationError, NumericalError
from tensor_core import ParamScope, Rng, Tensor

# adapter(投影参数全名, 投影输入, 基础投影输出) → 调整后输出；LoRA 通过它挂到 Q/V 上
Adapter = Callable[[str, Tensor, Tensor], Tensor]


@dataclass(frozen=True)
class AttentionMask:
    """allowed[i, j] = True ⇔ query i 可以看 key j"""

    allowed: np.ndarray

    @property
    def n_q(self) -> int:
        return self.allowed.shape[0]

    @property
    def n_kv(self) -> int:
        return self.allowed.shape[1]


def build_attention_mask(n_q: int, n_kv: int, kind: str = "full") -> AttentionMask:
    if n_q < 1 or n_kv < 1:
        raise ConfigurationError("build_attention_mask", f"need n_q, n_kv >= 1, got ({n_q}, {n_kv})")
    if kind == "causal":
        if n_q != n_kv:
            raise ConfigurationError("build_attention_mask", f"causal mask needs n_q == n_kv, got ({n_q}, {n_kv})")
        allowed = np.tril(np.ones((n_q, n_kv), dtype=bool))
    elif kind == "full":
        allowed = np.ones((n_q, n_kv), dtype=bool)
    else:
        raise ConfigurationError("build_attention_mask", f"unknown mask kind {kind!r}")
    return AttentionMask(allowed)


@dataclass(frozen=True)
class StackSpec:
    """一组块的形状：深度 / 宽度 / 头数 / 交叉输入宽度（None = 无交叉注意力）"""

    depth: int
    d: int
    n_heads: int
    d_cross: int | None = None
    ffn_mult: int = 4

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigurationError("StackSpec", f"depth must be >= 0, got {self.depth}")
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigurationError("StackSpec", f"width {self.d} not divisible by {self.n_heads} heads")

    @property
    def has_cross(self) -> bool:
        return self.d_cross is not None


# -------- 初始化 --------


def _init_norm(scope: ParamScope, name: str, d: int) -> None:
    scope.add(f"{name}.g", np.ones(d, dtype=tc.get_dtype()))
    scope.add(f"{name}.b", np.zeros(d, dtype=tc.get_dtype()))


def init_attention(scope: ParamScope, d: int, d_kv: int, rng: Rng) -> None:
    tc.init_linear(scope, "q", d, d, rng)
    tc.init_linear(scope, "k", d_kv, d, rng)
    tc.init_linear(scope, "v", d_kv, d, rng)
    tc.init_linear(scope, "o", d, d, rng, std=1.0 / math.sqrt(2.0 * d))


def init_block(scope: ParamScope, spec: StackSpec, rng: Rng) -> None:
    _init_norm(scope, "ln1", spec.d)
    init_attention(scope.scope("attn"), spec.d, spec.d, rng)
    if spec.has_cross:
        _init_norm(scope, "ln_c", spec.d)
        init_attention(scope.scope("cross"), spec.d, spec.d_cross, rng)
    _init_norm(scope, "ln2", spec.d)
    hidden = spec.ffn_mult * spec.d
    tc.init_linear(scope, "ffn.fc1", spec.d, hidden, rng)
    tc.init_linear(scope, "ffn.fc2", hidden, spec.d, rng, std=1.0 / math.sqrt(2.0 * hidden))


def init_stack(scope: ParamScope, spec: StackSpec, rng: Rng) -> None:
    for i in range(spec.depth):
        init_block(scope.scope(f"blocks.{i}"), spec, rng)
    if spec.depth:
        _init_norm(scope, "ln_f", spec.d)


# -------- 前向 --------


def linear(x: Tensor, scope: ParamScope, name: str) -> Tensor:
    out = tc.matmul(x, scope[f"{name}.w"])
    b = f"{name}.b"
    return out + scope[b] if b in scope else out


def norm(x: Tensor, scope: ParamScope, name: str) -> Tensor:
    return tc.layer_norm(x) * scope[f"{name}.g"] + scope[f"{name}.b"]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 3:
        raise ConfigurationError("attention", f"expected (n, d) or (B, n, d), got {x.shape}")
    return x, False


def attention(
    queries: Tensor,
    keys_values: Tensor,
    scope: ParamScope,
    mask: AttentionMask,
    n_heads: int,
    *,
    adapter: Adapter | None = None,
    return_weights: bool = False,
):
    """缩放点积多头注意力；被屏蔽位置 softmax 前加 −1e9"""
    xq, squeeze = _batched(queries)
    xkv, _ = _batched(keys_values)
    if xq.shape[0] != xkv.shape[0]:
        raise ConfigurationError("attention", f"batch {xq.shape[0]} vs {xkv.shape[0]}")
    B, n_q, _ = xq.shape
    n_kv = xkv.shape[1]
    if mask.allowed.shape != (n_q, n_kv):
        raise ConfigurationError("attention", f"mask {mask.allowed.shape} vs inputs ({n_q}, {n_kv})")
    if not mask.allowed.any(axis=1).all():
        raise NumericalError("attention: a query row has no allowed keys")
    w_q = scope["q.w"]
    if xq.shape[-1] != w_q.shape[0] or xkv.shape[-1] != scope["k.w"].shape[0]:
        raise ConfigurationError(
            "attention", f"input widths ({xq.shape[-1]}, {xkv.shape[-1]}) vs params ({w_q.shape[0]}, {scope['k.w'].shape[0]})"
        )
    d = w_q.shape[1]
    dh = d // n_heads

    def project(x: Tensor, name: str) -> Tensor:
        out = linear(x, scope, name)
        if adapter is not None:
            out = adapter(f"{scope.prefix}.{name}", x, out)
        return out

    def heads(t: Tensor, n: int) -> Tensor:
        return t.reshape(B, n, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(project(xq, "q"), n_q)
    k = heads(project(xkv, "k"), n_kv)
    v = heads(project(xkv, "v"), n_kv)
    scores = tc.scale(tc.matmul(q, k.T), 1.0 / math.sqrt(dh))
    weights = tc.softmax(tc.add_attention_mask(scores, mask.allowed), axis=-1)
    ctx = tc.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, n_q, d)
    out = project(ctx, "o")
    if squeeze:
        out = out.reshape(n_q, d)
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, scope: ParamScope) -> Tensor:
    return linear(tc.gelu(linear(x, scope, "fc1")), scope, "fc2")


def transformer_block(
    x: Tensor,
    scope: ParamScope,
    spec: StackSpec,
    self_mask: AttentionMask,
    cross_inputs: Tensor | None = None,
    cross_mask: AttentionMask | None = None,
    adapter: Adapter | None = None,
) -> Tensor:
    """pre-norm：x += SelfAttn(LN x)；[x += CrossAttn(LN x, c)]；x += FFN(LN x)"""
    h = norm(x, scope, "ln1")
    x = x + attention(h, h, scope.scope("attn"), self_mask, spec.n_heads, adapter=adapter)
    if cross_inputs is not None:
        h = norm(x, scope, "ln_c")
        x = x + attention(h, cross_inputs, scope.scope("cross"), cross_mask, spec.n_heads, adapter=adapter)
    h = norm(x, scope, "ln2")
    return x + feed_forward(h, scope.scope("ffn"))


def transformer_stack(
    inputs: Tensor,
    scope: ParamScope,
    spec: StackSpec,
    self_mask: AttentionMask,
    cross_inputs: Tensor | None = None,
    *,
    cross_mask: AttentionMask | None = None,
    adapter: Adapter | None = None,
) -> Tensor:
    """depth 个块 + ln_f；depth 0 原样返回输入（接线校验照做）"""
    if inputs.shape[-1] != spec.d:
        raise ConfigurationError("transformer_stack", f"input width {inputs.shape[-1]} != {spec.d}")
    n = inputs.shape[-2]
    if (self_mask.n_q, self_mask.n_kv) != (n, n):
        raise ConfigurationError("transformer_stack", f"self mask {self_mask.n_q}x{self_mask.n_kv} does not fit {n} positions")
    if spec.has_cross != (cross_inputs is not None):
        raise ConfigurationError("transformer_stack", "cross inputs must be given exactly when the stack has cross-attention")
    if cross_inputs is not None:
        if cross_inputs.shape[-1] != spec.d_cross:
            raise ConfigurationError("transformer_stack", f"cross width {cross_inputs.shape[-1]} != {spec.d_cross}")
        if cross_mask is None:
            cross_mask = build_attention_mask(n, cross_inputs.shape[-2], "full")
    if spec.depth == 0:
        return inputs
    x = inputs
    for i in range(spec.depth):
        x = transformer_block(x, scope.scope(f"blocks.{i}"), spec, self_mask, cross_inputs, cross_mask, adapter)
    return norm(x, scope, "ln_f")


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """无参数位置编码 (n, d)"""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(tc.get_dtype())
