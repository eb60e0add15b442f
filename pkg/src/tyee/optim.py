"""Optimizers and learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeMismatch


class SGD:
    """Momentum SGD; weight decay is folded into the gradient (coupled)."""

    kind = "sgd"

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: list[np.ndarray] | None = None
        self.step_count = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        if len(params) != len(grads) or len(params) != len(self.velocity):
            raise ShapeMismatch("parameter/gradient count mismatch")
        for p, g, v in zip(params, grads, self.velocity):
            g = g + self.weight_decay * p if self.weight_decay else g
            v *= self.momentum
            v += g
            p -= self.lr * v
        self.step_count += 1

    def state_arrays(self) -> dict[str, list[np.ndarray]]:
        return {"velocity": self.velocity or []}

    def state_meta(self) -> dict:
        return {"kind": self.kind, "step_count": self.step_count}

    def load_state(self, meta: dict, arrays: dict[str, list[np.ndarray]]) -> None:
        self.step_count = int(meta["step_count"])
        self.velocity = [a.copy() for a in arrays.get("velocity", [])] or None


class Adam:
    """Adam with bias correction; coupled weight decay like SGD."""

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.step_count = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(grads):
            raise ShapeMismatch("parameter/gradient count mismatch")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g + self.weight_decay * p if self.weight_decay else g
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, list[np.ndarray]]:
        return {"m": self.m or [], "v": self.v or []}

    def state_meta(self) -> dict:
        return {"kind": self.kind, "step_count": self.step_count}

    def load_state(self, meta: dict, arrays: dict[str, list[np.ndarray]]) -> None:
        self.step_count = int(meta["step_count"])
        self.m = [a.copy() for a in arrays.get("m", [])] or None
        self.v = [a.copy() for a in arrays.get("v", [])] or None


def build_optimizer(kind: str, lr: float, **kwargs):
    if kind == "sgd":
        return SGD(lr, momentum=kwargs.get("momentum", 0.0),
                   weight_decay=kwargs.get("weight_decay", 0.0))
    if kind == "adam":
        return Adam(lr, beta1=kwargs.get("beta1", 0.9), beta2=kwargs.get("beta2", 0.999),
                    eps=kwargs.get("eps", 1e-8), weight_decay=kwargs.get("weight_decay", 0.0))
    raise ValueError(f"unknown optimizer kind {kind!r}")


def scheduler_lr(spec: dict, base_lr: float, epoch: int) -> float:
    """Learning rate for one epoch under the configured schedule."""
    kind = spec.get("kind", "none")
    if kind == "none":
        return base_lr
    if kind == "step":
        return base_lr * spec["gamma"] ** (epoch // spec["step_size"])
    if kind == "cosine":
        lr_min = spec.get("lr_min", 0.0)
        t_max = spec["t_max"]
        return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + math.cos(math.pi * epoch / t_max))
    raise ValueError(f"unknown scheduler kind {kind!r}")
