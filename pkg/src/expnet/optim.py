"""AdamW with decoupled weight decay."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_state(params: Sequence[np.ndarray]) -> List[AdamState]:
    return [AdamState(np.zeros_like(p), np.zeros_like(p)) for p in params]


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                   state: List[AdamState], config: AdamWConfig) -> None:
    """One in-place AdamW update of ``params``.

    Decay is applied first as ``p *= 1 - lr * wd`` so a zero gradient leaves
    exactly ``p * (1 - lr * wd)``.
    """
    if not (len(params) == len(grads) == len(state)):
        raise ValueError("optimizer_step: params, grads and state differ in length")
    b1, b2 = config.beta1, config.beta2
    for i, (p, g, s) in enumerate(zip(params, grads, state)):
        if p.shape != g.shape:
            raise ValueError(f"optimizer_step: parameter {i} has shape {p.shape} but gradient {g.shape}")
        s.step += 1
        s.m *= b1
        s.m += (1 - b1) * g
        s.v *= b2
        s.v += (1 - b2) * g * g
        m_hat = s.m / (1 - b1 ** s.step)
        v_hat = s.v / (1 - b2 ** s.step)
        if config.weight_decay:
            p *= 1 - config.lr * config.weight_decay
        p -= (config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class AdamW:
    """Stateful wrapper over module parameters.

    ``lr_scales`` optionally gives each parameter its own learning-rate
    multiplier; parameters sharing a multiplier are stepped together.
    """

    def __init__(self, params, config: AdamWConfig, lr_scales: Optional[Sequence[float]] = None):
        self.params = list(params)
        self.config = config
        self.state = init_state([p.data for p in self.params])
        scales = [1.0] * len(self.params) if lr_scales is None else [float(s) for s in lr_scales]
        if len(scales) != len(self.params):
            raise ValueError("AdamW: lr_scales and params differ in length")
        self._groups = {}
        for i, s in enumerate(scales):
            self._groups.setdefault(s, []).append(i)

    def clip(self, max_norm: float) -> float:
        return clip_grad_norm([p.grad for p in self.params], max_norm)

    def step(self) -> None:
        for scale, idx in self._groups.items():
            config = self.config if scale == 1.0 else dataclasses.replace(self.config, lr=self.config.lr * scale)
            optimizer_step([self.params[i].data for i in idx], [self.params[i].grad for i in idx],
                           [self.state[i] for i in idx], config)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
