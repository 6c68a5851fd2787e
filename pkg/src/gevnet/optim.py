"""Adam with decoupled weight decay, and the softmax cross-entropy loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas=(BETA1, BETA2), eps: float = EPS) -> None:
    """In-place Adam update of every array in ``params``."""
    if set(params) != set(grads):
        raise ShapeMismatchError("parameter and gradient names differ")
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            step = step + weight_decay * p
        p -= lr * step


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, soft_labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``-sum y log softmax(logits)`` over the batch, and its gradient."""
    if logits.shape != soft_labels.shape:
        raise ShapeMismatchError("logits and labels differ in shape")
    ls = log_softmax(logits)
    n = logits.shape[0]
    loss = float(-(soft_labels * ls).sum() / n)
    grad = (np.exp(ls) * soft_labels.sum(axis=-1, keepdims=True) - soft_labels) / n
    return loss, grad
