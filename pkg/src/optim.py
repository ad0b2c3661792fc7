"""
optim - Adam 最佳化器與梯度工具
參數以有序 (name, Tensor) 列表表示，順序即 checkpoint / 通訊的標準順序。
"""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from autodiff import Tensor
from errors import ProtocolError

NamedParams = Sequence[Tuple[str, Tensor]]


class Adam:
    """一階/二階動量累積的梯度下降；學習率於每步傳入（配合自適應排程）。"""

    def __init__(self, params: NamedParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            update = (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)
            p.data -= update


def grad_norm(params: NamedParams) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: NamedParams, max_norm: float) -> float:
    """把整體梯度範數縮放到 ≤ max_norm，回傳縮放前的範數。"""
    norm = grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-6)
        for _, p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.data.dtype, copy=False)
    return norm


# ---------------------------------------------------------- #
#                    扁平化（通訊用）
# ---------------------------------------------------------- #
def parameter_count(params: NamedParams) -> int:
    return int(sum(p.size for _, p in params))


def flatten_params(params: NamedParams) -> np.ndarray:
    if not params:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([p.data.reshape(-1).astype(np.float32) for _, p in params])


def assign_flat_params(params: NamedParams, flat: np.ndarray) -> None:
    if flat.size != parameter_count(params):
        raise ProtocolError(f"參數長度不符：收到 {flat.size}，需要 {parameter_count(params)}")
    offset = 0
    for _, p in params:
        n = p.size
        p.data[...] = flat[offset:offset + n].reshape(p.shape)
        offset += n


def flatten_grads(params: NamedParams) -> np.ndarray:
    parts = []
    for _, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(g.reshape(-1).astype(np.float32))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


def assign_flat_grads(params: NamedParams, flat: np.ndarray) -> None:
    if flat.size != parameter_count(params):
        raise ProtocolError(f"梯度長度不符：收到 {flat.size}，需要 {parameter_count(params)}")
    offset = 0
    for _, p in params:
        n = p.size
        p.grad = flat[offset:offset + n].reshape(p.shape).astype(p.data.dtype)
        offset += n


__all__ = [
    "Adam",
    "grad_norm",
    "clip_grad_norm",
    "parameter_count",
    "flatten_params",
    "assign_flat_params",
    "flatten_grads",
    "assign_flat_grads",
]
