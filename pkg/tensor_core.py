"""
计算核心：numpy 上的最小稠密张量 + reverse-mode 自动微分。

- Tensor：数据 + 梯度 + 反向闭包；运算结果只有在某个输入需要梯度时才记录计算图
- 训练精度 float32，梯度检查精度 float64（precision 上下文切换）
- Rng：唯一随机源，显式传入每个随机调用
- ParamStore：命名参数 + 冻结标记；冻结参数永远不会被优化器改动
- Adam：β1=0.9, β2=0.999, ε=1e-8，每个阶段常数学习率
- grad_check：中心差分 (f(x+h)-f(x-h))/2h 对比解析梯度
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field

from errors import ConfigurationError, GradCheckRefused

_STATE: dict = {"dtype": np.float32, "grad_enabled": True}

MASK_NEG = -1e9  # 注意力里的 −∞


def get_dtype() -> type:
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """切换默认精度（float64 = 梯度检查模式）"""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


def grad_enabled() -> bool:
    return bool(_STATE["grad_enabled"])


# -------- Tensor --------


class Tensor:
    """稠密 n 维数组 + 反向传播"""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str = "custom",
    ) -> "Tensor":
        """自定义原语：backward(g) 按 parents 顺序返回各输入梯度（None = 不传）"""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        t.requires_grad = needs
        t._parents = tuple(parents) if needs else ()
        t._backward = backward if needs else None
        return t

    # ---- 基本属性 ----
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data, t.grad, t.requires_grad, t.op, t._parents, t._backward = self.data, None, False, "detach", (), None
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ---- 运算符 ----
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    # ---- 反向 ----
    def backward(self, grad: np.ndarray | None = None) -> None:
        """从标量（或给定上游梯度）反传，叶子节点累加到 .grad"""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError("backward", f"implicit grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def forward_backward(fn: Callable[..., Tensor], *inputs: Tensor) -> tuple[float, dict[int, np.ndarray | None]]:
    """求值并反传；返回 (标量值, {输入序号: 梯度})，冻结输入的梯度为 None"""
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    return out.item(), {i: (t.grad.copy() if t.grad is not None else None) for i, t in enumerate(inputs)}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(op, f"shapes {a.shape} and {b.shape} do not broadcast") from None


# -------- 逐元素 / 广播 --------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div",
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor.from_op(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh 近似 GELU"""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor.from_op(y.astype(x.dtype, copy=False), (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor.from_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * y,), "exp")


def straight_through(x: Tensor, quantized: np.ndarray) -> Tensor:
    """y = st(x)：前向取 quantized，反向把下游梯度原样交给 x"""
    q = np.asarray(quantized, dtype=x.data.dtype)
    if q.shape != x.shape:
        raise ConfigurationError("straight_through", f"quantized shape {q.shape} != input shape {x.shape}")
    return Tensor.from_op(q.copy(), (x,), lambda g: (g,), "straight_through")


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


# -------- 形状 --------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError("matmul", f"cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError("reshape", f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor.from_op(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)  # 重复索引累加
        return (full,)

    return Tensor.from_op(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ConfigurationError("concat", str(e)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def expand_batch(a: Tensor, batch: int) -> Tensor:
    """(n, d) → (batch, n, d)，反向对 batch 求和"""
    return add(constant(np.zeros((batch,) + (1,) * a.ndim, dtype=a.data.dtype)), a)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return Tensor.from_op(np.asarray(out, dtype=a.data.dtype), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -------- 归一化 / 概率 --------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor.from_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return Tensor.from_op(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """最后一维归一化（不含仿射）"""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor.from_op(xhat, (a,), backward, "layer_norm")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
    y = x / norm
    return Tensor.from_op(y, (a,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,), "l2_normalize")


def add_attention_mask(scores: Tensor, allowed: np.ndarray) -> Tensor:
    """被屏蔽位置加 MASK_NEG（softmax 后为精确 0），梯度直通"""
    allowed = np.asarray(allowed, dtype=bool)
    if scores.shape[-2:] != allowed.shape:
        raise ConfigurationError("add_attention_mask", f"mask {allowed.shape} vs scores {scores.shape}")
    bias = np.where(allowed, 0.0, MASK_NEG).astype(scores.data.dtype)
    return Tensor.from_op(scores.data + bias, (scores,), lambda g: (g,), "mask_add")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigurationError("embedding", f"ids out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor.from_op(table.data[ids], (table,), backward, "embedding")


# -------- 损失 --------


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError("mse", f"shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).mean(), dtype=a.data.dtype)
    return Tensor.from_op(out, (a, b), lambda g: (g * 2.0 * d / n, -g * 2.0 * d / n), "mse")


def cosine_similarity(a: Tensor, b, axis: int = -1, eps: float = 1e-8) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError("cosine_similarity", f"shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)) + eps
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True)) + eps
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return ga, gb

    return Tensor.from_op(np.squeeze(c, axis=axis), (a, b), backward, "cosine_similarity")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """整数目标交叉熵；weights（0/1 损失掩码）下按权重平均"""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ConfigurationError("cross_entropy", f"logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ConfigurationError("cross_entropy", f"target out of range [0, {v})")
    w = np.ones(targets.shape, dtype=logits.data.dtype) if weights is None else np.asarray(weights, dtype=logits.data.dtype)
    total = w.sum()
    if total <= 0:
        raise ConfigurationError("cross_entropy", "no positions carry loss weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray((nll * w).sum() / total, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (w / total)[..., None],)

    return Tensor.from_op(out, (logits,), backward, "cross_entropy")


# -------- Rng --------


class Rng:
    """确定性随机流（numpy PCG64）；同 seed 同序列"""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, std=1.0, size=None):
        return self.generator.normal(loc, std, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def child(self, tag: str) -> "Rng":
        """按名字派生子流（各阶段互不干扰）"""
        h = hashlib.sha256(f"{self.seed}:{tag}".encode()).hexdigest()
        return Rng(int(h[:16], 16))


def init_rng(seed: int) -> Rng:
    return Rng(seed)


# -------- ParamStore --------


class ParamStore:
    """命名参数表：name → Tensor，附冻结标记"""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array, *, frozen: bool = False) -> Tensor:
        t = Tensor(array, requires_grad=not frozen)
        self._params[name] = t
        return t

    def put(self, name: str, tensor: Tensor) -> None:
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"parameter not found: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._params if n.startswith(prefix))

    def items(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names(prefix)]

    def is_frozen(self, name: str) -> bool:
        return not self._params[name].requires_grad

    def freeze(self, prefix: str = "") -> None:
        for _, t in self.items(prefix):
            t.requires_grad = False
            t.grad = None

    def unfreeze(self, prefix: str = "") -> None:
        for _, t in self.items(prefix):
            t.requires_grad = True

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def merge(self, other: "ParamStore") -> "ParamStore":
        for n, t in other.items():
            self._params[n] = t
        return self

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for n, t in self.items(prefix):
            out.put(n, t)
        return out

    def cast(self, dtype) -> "ParamStore":
        """拷贝到指定精度（梯度检查用），冻结标记保留"""
        out = ParamStore()
        with precision(dtype):
            for n, t in self.items():
                out.add(n, t.data, frozen=not t.requires_grad)
        return out

    def digest(self, prefix: str = "") -> str:
        """SHA-256(name, dtype, shape, bytes)，冻结性校验用"""
        h = hashlib.sha256()
        for n, t in self.items(prefix):
            h.update(n.encode())
            h.update(str(t.data.dtype).encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


class ParamScope(Mapping[str, Tensor]):
    """带前缀的只读视图：scope["w"] == store[f"{prefix}.w"]"""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._full(name)]

    def __contains__(self, name) -> bool:
        return self._full(name) in self.store

    def __iter__(self):
        p = self.prefix + "." if self.prefix else ""
        return iter(n[len(p):] for n in self.store.names(p))

    def __len__(self) -> int:
        return len(self.store.names(self.prefix + "." if self.prefix else ""))

    def scope(self, name: str) -> "ParamScope":
        return ParamScope(self.store, self._full(name))

    def add(self, name: str, array, *, frozen: bool = False) -> Tensor:
        return self.store.add(self._full(name), array, frozen=frozen)


def init_normal(rng: Rng, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, shape).astype(get_dtype())


def init_linear(scope: ParamScope, name: str, d_in: int, d_out: int, rng: Rng, *, bias: bool = True, std: float | None = None) -> None:
    std = std if std is not None else 1.0 / math.sqrt(d_in)
    scope.add(f"{name}.w", init_normal(rng, (d_in, d_out), std))
    if bias:
        scope.add(f"{name}.b", np.zeros(d_out, dtype=get_dtype()))


# -------- Adam --------


@dataclass
class Adam:
    """Adam；只更新 requires_grad 的参数，冻结参数逐位不变"""

    store: ParamStore
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.store.trainable():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        self.store.zero_grad()


# -------- 梯度检查 --------


class ParamCheck(BaseModel):
    max_rel_error: float = Field(..., description="该参数各分量相对误差最大值")
    max_abs_error: float = Field(..., description="该参数各分量绝对误差最大值")
    n_checked: int = Field(..., description="检查的分量数")
    passed: bool


class GradCheckReport(BaseModel):
    max_rel_error: float = Field(..., description="所有参数的最大相对误差")
    passed: bool
    per_param: dict[str, ParamCheck] = Field(default_factory=dict)


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | ParamStore,
    *,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    atol: float = 1e-9,
    max_components: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """
    中心差分梯度检查。
    相对误差 = |a-n| / max(|a|, |n|, 1e-8)；分量通过 = 相对误差 ≤ tolerance 或 绝对误差 ≤ atol。
    """
    if get_dtype() is not np.float64:
        raise GradCheckRefused("grad_check requires 64-bit mode (use precision(np.float64))")
    items = params.items() if isinstance(params, ParamStore) else list(params.items())
    items = [(n, t) for n, t in items if t.requires_grad]
    if not items:
        raise GradCheckRefused("no trainable parameters to check")
    for _, t in items:
        if t.data.dtype != np.float64:
            raise GradCheckRefused("parameters must be float64 in check mode")

    with no_grad():
        v1 = fn().item()
        v2 = fn().item()
    if v1 != v2 and not (math.isnan(v1) and math.isnan(v2)):
        raise GradCheckRefused(f"operation is not deterministic ({v1!r} != {v2!r})")

    for _, t in items:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in items}

    per_param: dict[str, ParamCheck] = {}
    overall = 0.0
    for name, t in items:
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            idxs = (rng or Rng(0)).choice(flat.size, size=max_components, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst_rel = worst_abs = 0.0
        ok = True
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = float(a_flat[i])
            abs_err = abs(a - num)
            rel = abs_err / max(abs(a), abs(num), 1e-8)
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, abs_err)
            if rel > tolerance and abs_err > atol:
                ok = False
        per_param[name] = ParamCheck(max_rel_error=worst_rel, max_abs_error=worst_abs, n_checked=len(idxs), passed=ok)
        overall = max(overall, worst_rel)
    for _, t in items:
        t.grad = None
    return GradCheckReport(max_rel_error=overall, passed=all(p.passed for p in per_param.values()), per_param=per_param)
