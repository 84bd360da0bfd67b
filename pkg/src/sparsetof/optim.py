"""RMSprop and Adam over lists of parameter tensors, plus the cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def cosine_lr(rho0: float, t: float, total: float) -> float:
    """rho0 * (1 + cos(pi * t / T)) / 2 for 0 <= t <= T."""
    if total <= 0:
        raise ValueError("schedule length must be positive")
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside the schedule [0, {total}]")
    return rho0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def _check(params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")


@dataclass
class RMSprop:
    decay: float = 0.9
    eps: float = 1e-8

    def init(self, params: Sequence[Tensor]) -> dict:
        return {"sq": [np.zeros(p.shape, np.float32) for p in params]}

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict, lr: float) -> None:
        _check(params, grads)
        if len(state["sq"]) != len(params):
            raise ShapeError("optimizer state does not match the parameter list")
        a = np.float32(self.decay)
        for p, g, sq in zip(params, grads, state["sq"]):
            g = np.asarray(g, np.float32)
            sq *= a
            sq += (np.float32(1) - a) * g * g
            p.data = (p.data - np.float32(lr) * g / (np.sqrt(sq) + np.float32(self.eps))).astype(np.float32)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def init(self, params: Sequence[Tensor]) -> dict:
        return {
            "t": 0,
            "m": [np.zeros(p.shape, np.float32) for p in params],
            "v": [np.zeros(p.shape, np.float32) for p in params],
        }

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict, lr: float) -> None:
        _check(params, grads)
        if len(state["m"]) != len(params):
            raise ShapeError("optimizer state does not match the parameter list")
        state["t"] += 1
        t = state["t"]
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            g = np.asarray(g, np.float32)
            m *= b1
            m += (np.float32(1) - b1) * g
            v *= b2
            v += (np.float32(1) - b2) * g * g
            m_hat = m / np.float32(c1)
            v_hat = v / np.float32(c2)
            p.data = (p.data - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(self.eps))).astype(np.float32)


def make_optimizer(name: str):
    name = name.lower()
    if name == "rmsprop":
        return RMSprop()
    if name == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {name!r}")
