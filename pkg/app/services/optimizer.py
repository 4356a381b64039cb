# app/services/optimizer.py
import logging
from typing import List

import numpy as np

from app.services.nn import Parameter

logger = logging.getLogger(__name__)


class AdamW:
    """
    解耦权重衰减的 Adam：w <- w - lr·(m̂/(√v̂+ε) + wd·w)。
    一阶/二阶矩用 float64 保存，带偏差修正。
    """

    def __init__(self, params: List[Parameter], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros(p.shape) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr <= 0:
                continue
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


def opt_step(opt: AdamW, lr: float):
    opt.step(lr)


def clip_grad_norm(params: List[Parameter], max_norm: float) -> float:
    """按全局 L2 范数裁剪梯度，返回裁剪前的范数。"""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total
