# tests/utils.py
"""测试共用工具：float64 影子路径上的有限差分梯度检查、小尺寸模型配置、样本构造。"""
from typing import Callable, List, Optional

import numpy as np

from app.models.run_config import ModelConfig
from app.models.sample import RgbdSample
from app.services import tensor as T
from app.services.tensor import Tape, Tensor


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        image_size=32, num_classes=4, channels=[8, 16, 32, 64], blocks=[1, 1, 1, 1], head_dim=8,
        cond_channels=16, embed_dim=8, decoder_hidden=16, decoder_heads=2, decoder_points=2, decoder_layers=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def gradcheck(build_loss: Callable[[], Tensor], params: List[Tensor], h: float = 1e-3,
              max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              floor: float = 1e-6) -> float:
    """
    解析梯度与中心差分的最大相对误差（只统计 max(|解析|,|数值|) > floor 的元素）。
    params 必须是 float64 的叶子张量，build_loss 在 float64 精度下执行。
    """
    rng = rng or np.random.default_rng(0)
    with T.precision(np.float64):
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = build_loss()
        tape.backward(loss)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

        slots = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(*p.shape)]
        if max_entries is not None and len(slots) > max_entries:
            pick = rng.choice(len(slots), size=max_entries, replace=False)
            slots = [slots[i] for i in pick]

        worst = 0.0
        for pi, idx in slots:
            p = params[pi]
            old = p.data[idx]
            p.data[idx] = old + h
            plus = build_loss().item()
            p.data[idx] = old - h
            minus = build_loss().item()
            p.data[idx] = old
            numeric = (plus - minus) / (2 * h)
            a = analytic[pi][idx]
            scale = max(abs(a), abs(numeric))
            if scale > floor:
                worst = max(worst, abs(a - numeric) / scale)
    return worst


def make_sample(h: int = 32, w: int = 32, num_classes: int = 4, seed: int = 0, sample_id: int = 0,
                invalid: float = 0.0) -> RgbdSample:
    rng = np.random.default_rng(seed)
    label = rng.integers(0, num_classes, size=(h, w)).astype(np.uint8)
    depth = rng.integers(500, 5000, size=(h, w)).astype(np.uint16)
    if invalid > 0:
        depth.ravel()[: int(round(invalid * h * w))] = 0
    rgb = (rng.integers(0, 256, size=(h, w, 3)).astype(np.float64) / 255.0).astype(np.float32)
    return RgbdSample(rgb=rgb, depth=depth, label=label, sample_id=sample_id)
