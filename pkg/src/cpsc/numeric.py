"""Dense float64 substrate: activations, divergences, optimizers, gradient oracle.

Arrays are plain ``numpy.ndarray`` in float64. Batched helpers operate on the
last axis so the same function serves single vectors and ``(B, K)`` matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

EPS_KL = 1e-12


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise DimensionError("log_softmax of an empty vector")
    z = v - v.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_div(p, q) -> float:
    """KL(p || q) for probability vectors, with q (and p inside the log) clamped at EPS_KL."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    pm = p[mask]
    val = float(np.sum(pm * (np.log(np.maximum(pm, EPS_KL)) - np.log(np.maximum(q[mask], EPS_KL)))))
    return max(val, 0.0)


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return -math.log(max(float(probs[label]), EPS_KL))


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class Param:
    """A trainable block: value, accumulated gradient, optimizer slots."""

    value: np.ndarray
    grad: np.ndarray = None
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError("grad shape must equal value shape")

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class OptimizerKind:
    name: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float | None = None
    weight_decay: float = 0.0

    def __post_init__(self):
        self.name = self.name.lower()
        if self.name not in ("sgd", "adam", "adagrad"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be strictly positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.eps is None:
            self.eps = 1e-10 if self.name == "adagrad" else 1e-8


def step(params: Mapping[str, Param], kind: OptimizerKind) -> None:
    """Apply one optimizer update in place. Grads are left for the caller to zero."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}; step aborted")
    for p in params.values():
        g = p.grad
        if kind.weight_decay:
            g = g + kind.weight_decay * p.value
        if kind.name == "sgd":
            if kind.momentum:
                buf = p.state.get("momentum")
                buf = g.copy() if buf is None else kind.momentum * buf + g
                p.state["momentum"] = buf
                g = buf
            p.value -= kind.lr * g
        elif kind.name == "adam":
            t = p.state.get("t", 0) + 1
            m = p.state.get("m", np.zeros_like(g))
            v = p.state.get("v", np.zeros_like(g))
            m = kind.beta1 * m + (1 - kind.beta1) * g
            v = kind.beta2 * v + (1 - kind.beta2) * g * g
            p.state.update(t=t, m=m, v=v)
            m_hat = m / (1 - kind.beta1**t)
            v_hat = v / (1 - kind.beta2**t)
            p.value -= kind.lr * m_hat / (np.sqrt(v_hat) + kind.eps)
        else:
            acc = p.state.get("sum_sq", np.zeros_like(g)) + g * g
            p.state["sum_sq"] = acc
            p.value -= kind.lr * g / (np.sqrt(acc) + kind.eps)


def finite_diff_grad(
    loss_fn: Callable[[Mapping[str, Param]], float],
    params: Mapping[str, Param],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every entry of every block."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)
            flat[i] = orig - h
            down = loss_fn(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Blockwise ||a - b|| / max(||a||, ||b||, floor)."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den
