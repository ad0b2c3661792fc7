"""
autodiff - 最小的稠密張量反向自動微分
------------------------------------------------------------
▸ Tensor：numpy 陣列 + requires_grad + grad（預設 float32）
▸ Tape：以 `with Tape() as tape:` 記錄運算節點，`tape.backward(loss)` 反傳一次後失效
▸ 梯度對 leaf 累加，需以 zero_grad() 明確清除
▸ 有限差分檢查可改用 float64（ops 保留輸入精度）
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DomainError, ShapeError, TapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_local = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------- #
#                           Tensor
# ---------------------------------------------------------- #
class Tensor:
    """稠密張量；data 以 row-major numpy 陣列保存。"""

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.requires_grad = False
        out.grad = None
        out._leaf = False
        return out

    # ------------------------ 屬性 ------------------------ #
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------ 運算子 ------------------------ #
    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(other, self, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(other, self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(other, self, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __rtruediv__(self, other):
        return elementwise(other, self, "div")

    def __neg__(self):
        return map_unary(self, "neg")

    def __matmul__(self, other):
        return matmul(self, _lift(other, self))

    # ------------------------ 便捷方法 ------------------------ #
    def sum(self, axes=None) -> "Tensor":
        return reduce(self, "sum", axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce(self, "mean", axes)

    def tanh(self) -> "Tensor":
        return map_unary(self, "tanh")

    def sigmoid(self) -> "Tensor":
        return map_unary(self, "sigmoid")

    def exp(self) -> "Tensor":
        return map_unary(self, "exp")

    def log(self) -> "Tensor":
        return map_unary(self, "log")

    def square(self) -> "Tensor":
        return map_unary(self, "square")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value: ArrayLike, like: Tensor) -> Tensor:
    """常數轉成與 like 同精度、不需梯度的 Tensor。"""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype))


# ---------------------------------------------------------- #
#                            Tape
# ---------------------------------------------------------- #
@dataclass
class _Node:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """運算紀錄；節點依拓撲順序追加，僅能反傳一次。"""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("Tape 已被消耗，不能再記錄運算")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


@contextmanager
def no_grad():
    """在此區塊內的運算不記錄到任何 tape。"""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(_Node(inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape) -> None:
    """將 ∂loss/∂leaf 累加到所有 requires_grad 的 leaf.grad。"""
    if tape.consumed:
        raise TapeError("Tape 已被消耗，無法再次反向傳播")
    if loss.ndim != 0:
        raise ShapeError(f"backward 需要純量 loss，收到 shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g_in in zip(node.inputs, node.backward_fn(g_out)):
            if g_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + g_in if key in grads else g_in
            if inp.is_leaf:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    tape.consumed = True
    tape.nodes.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------- #
#                            Ops
# ---------------------------------------------------------- #
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m×k] · [k×n] → [m×n]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul 維度不符：{a.shape} × {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g):
        return g @ b_data.T, a_data.T @ g

    return _result(a_data @ b_data, (a, b), _backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _unary_tanh(x):
    y = np.tanh(x)
    return y, lambda g: g * (1 - y * y)


def _unary_sigmoid(x):
    y = _sigmoid(x)
    return y, lambda g: g * y * (1 - y)


def _unary_exp(x):
    y = np.exp(x)
    return y, lambda g: g * y


def _unary_log(x):
    if np.any(x <= 0):
        raise DomainError(f"log 需要嚴格正的輸入，最小值為 {float(np.min(x))}")
    return np.log(x), lambda g: g / x


def _unary_square(x):
    return x * x, lambda g: g * 2 * x


def _unary_neg(x):
    return -x, lambda g: -g


def _unary_softplus(x):
    return np.logaddexp(x.dtype.type(0), x), lambda g: g * _sigmoid(x)


def _unary_relu(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), lambda g: g * mask


_UNARY = {
    "tanh": _unary_tanh,
    "sigmoid": _unary_sigmoid,
    "exp": _unary_exp,
    "log": _unary_log,
    "square": _unary_square,
    "neg": _unary_neg,
    "softplus": _unary_softplus,
    "relu": _unary_relu,
}


def map_unary(x: Tensor, f: str) -> Tensor:
    """逐元素套用 f ∈ {tanh, sigmoid, exp, log, square, neg, softplus, relu}。"""
    if f not in _UNARY:
        raise ValueError(f"未知的一元運算：{f}")
    y, grad_fn = _UNARY[f](x.data)
    y = np.asarray(y, dtype=x.dtype)
    return _result(y, (x,), lambda g: (grad_fn(g),))


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"無法廣播的 shape：{a.shape} 與 {b.shape}") from None


def elementwise(a: ArrayLike, b: ArrayLike, op: str) -> Tensor:
    """逐元素二元運算 op ∈ {add, sub, mul, div, min, max}，支援由右對齊的廣播。"""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("elementwise 至少需要一個 Tensor")
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a) if not isinstance(b, Tensor) else b
    _broadcast_shape(a, b)
    x, y = a.data, b.data

    if op == "add":
        out = x + y
        grads = lambda g: (g, g)
    elif op == "sub":
        out = x - y
        grads = lambda g: (g, -g)
    elif op == "mul":
        out = x * y
        grads = lambda g: (g * y, g * x)
    elif op == "div":
        if np.any(y == 0):
            raise DomainError("除數含 0")
        out = x / y
        grads = lambda g: (g / y, -g * x / (y * y))
    elif op in ("max", "min"):
        mask = (x >= y) if op == "max" else (x <= y)
        out = np.where(mask, x, y)
        grads = lambda g: (g * mask, g * ~mask)
    else:
        raise ValueError(f"未知的二元運算：{op}")

    a_shape, b_shape = a.shape, b.shape

    def _backward(g):
        ga, gb = grads(g)
        return _unbroadcast(ga, a_shape), _unbroadcast(gb, b_shape)

    return _result(np.asarray(out), (a, b), _backward)


def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"軸 {ax} 超出維度 {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"重複的軸：{list(axes)}")
    return tuple(sorted(norm))


def reduce(x: Tensor, op: str, axes=None) -> Tensor:
    """sum / mean 歸約；axes=None 表示全部軸。"""
    if op not in ("sum", "mean"):
        raise ValueError(f"未知的歸約：{op}")
    ax = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    out = np.sum(x.data, axis=ax)
    if op == "mean":
        out = out / x.dtype.type(count)
    in_shape = x.shape

    def _backward(g):
        g = np.broadcast_to(np.expand_dims(g, ax), in_shape)
        if op == "mean":
            g = g / g.dtype.type(count)
        return (np.array(g),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), _backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """逐元素截斷到 [lo, hi]；邊界處梯度視為 1。"""
    if lo > hi:
        raise ValueError(f"clamp 需要 lo ≤ hi，收到 lo={lo}, hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * inside,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"無法把 {x.shape} reshape 成 {tuple(shape)}") from None
    in_shape = x.shape
    return _result(out, (x,), lambda g: (g.reshape(in_shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat 需要至少一個 Tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat 維度不符：{[t.shape for t in tensors]}") from e
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tuple(tensors), _backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack 需要至少一個 Tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack 需要相同 shape，收到 {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# 常用別名
def tanh(x: Tensor) -> Tensor:
    return map_unary(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return map_unary(x, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    return map_unary(x, "softplus")


def relu(x: Tensor) -> Tensor:
    return map_unary(x, "relu")


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise(a, b, "max")


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise(a, b, "min")



def numeric_grad(fn, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """中央差分梯度；fn 接收與 x 同形狀的陣列並回傳純量。x 會被暫時改寫後還原。"""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = fn(x)
        x[i] = old - eps
        lo = fn(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "zero_grad",
    "matmul",
    "map_unary",
    "elementwise",
    "reduce",
    "clamp",
    "reshape",
    "concat",
    "stack",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "maximum",
    "minimum",
    "numeric_grad",
]
