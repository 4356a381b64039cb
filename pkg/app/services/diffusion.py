# app/services/diffusion.py
"""
噪声调度、标签编码、前向加噪、DDIM 更新与采样循环。

调度相关的标量计算一律在 float64 下进行。
"""
import logging
from typing import TYPE_CHECKING, List, Optional

import numpy as np
from scipy.special import expit

from app.core.exceptions import DataError, ShapeError
from app.core.model_config import (COSINE_DS, COSINE_NS, IGNORE_ID, LINEAR_BETA_END, LINEAR_BETA_START,
                                   LINEAR_T, LOG_SNR_EPS, ScheduleKind)
from app.models.run_config import SamplerConfig
from app.services import tensor as T
from app.services.mask_decoder import predict_mask
from app.services.nn import Module, Parameter
from app.services.tensor import Tensor

if TYPE_CHECKING:
    from app.services.segmenter import DiffSegModel

logger = logging.getLogger(__name__)

# 1 - ᾱ 的下限，避免 ᾱ_now == 1 时除零
DDIM_EPS = 1e-12


class NoiseSchedule:
    """
    cosine：γ(t) = -log(max(cos((t+ns)/(1+ds)·π/2)^-2 - 1, eps))，ᾱ = sigmoid(γ)。
    linear：β 在 T 个虚拟步上从 beta_start 线性增长到 beta_end，ᾱ(t) 取累乘在 ⌊t·T⌋ 处的值（夹到 T-1）。
    """

    def __init__(self, kind: ScheduleKind = ScheduleKind.cosine,
                 beta_start: float = LINEAR_BETA_START, beta_end: float = LINEAR_BETA_END,
                 num_steps: int = LINEAR_T):
        self.kind = ScheduleKind(kind)
        self.num_steps = num_steps
        self._cumprod = None
        if self.kind == ScheduleKind.linear:
            betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
            self._cumprod = np.cumprod(1.0 - betas)

    def __repr__(self):
        return f"NoiseSchedule({self.kind.value})"

    def log_snr(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == ScheduleKind.cosine:
            n = np.cos((t + COSINE_NS) / (1 + COSINE_DS) * np.pi * 0.5) ** -2
            return -np.log(np.maximum(n - 1, LOG_SNR_EPS))
        ab = self.alpha_bar(t)
        return np.log(ab) - np.log1p(-ab)

    def alpha_bar(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == ScheduleKind.cosine:
            return expit(self.log_snr(t))
        idx = np.floor(np.clip(t, 0.0, 1.0) * self.num_steps).astype(np.int64)
        return self._cumprod[np.minimum(idx, self.num_steps - 1)]


def log_snr(t, sched: NoiseSchedule):
    return sched.log_snr(t)


def alpha_bar(t, sched: NoiseSchedule):
    return sched.alpha_bar(t)


class LabelCodebook(Module):
    """K×D 的可学习类别嵌入表；编码值为 (sigmoid(e)·2 - 1)·s，落在 [-s, s]。"""

    def __init__(self, num_classes: int, dim: int, scale: float, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 1.0, size=(num_classes, dim)))
        self.scale = float(scale)

    @property
    def num_classes(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def encode(self, mask: np.ndarray) -> Tensor:
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise ShapeError(f"标签图应为二维, 得到 {mask.shape}")
        h, w = mask.shape
        ids = mask.astype(np.int64).ravel()
        ids = np.where(ids == IGNORE_ID, 0, ids)
        if np.any((ids < 0) | (ids >= self.num_classes)):
            raise DataError(f"标签 id 越界: 允许 0..{self.num_classes - 1} 或 {IGNORE_ID}")
        rows = self.table[ids]
        enc = (T.sigmoid(rows) * 2.0 - 1.0) * self.scale
        return T.reshape(T.transpose(enc, (1, 0)), (self.dim, h, w))


def encode_labels(mask: np.ndarray, codebook: LabelCodebook) -> Tensor:
    return codebook.encode(mask)


def corrupt(y_enc: Tensor, t: float, eps, sched: NoiseSchedule) -> Tensor:
    """y_t = √ᾱ(t)·y_enc + √(1-ᾱ(t))·eps"""
    eps = T.as_tensor(eps)
    if eps.shape != y_enc.shape:
        raise ShapeError(f"噪声形状 {eps.shape} 与编码形状 {y_enc.shape} 不一致")
    ab = float(sched.alpha_bar(t))
    return y_enc * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def ddim_step(mask_t: Tensor, mask_pred: np.ndarray, t_now: float, t_next: float,
              codebook: LabelCodebook, sched: NoiseSchedule) -> Tensor:
    """
    用预测标签的编码作为 x0 估计：
    eps = (mask_t - √ᾱ_now·enc) / √(1-ᾱ_now)
    mask_next = √ᾱ_next·enc + √(1-ᾱ_next)·eps
    """
    if t_next > t_now:
        raise ValueError(f"t_next ({t_next}) 不能大于 t_now ({t_now})")
    with T.precision(np.float64):
        enc = codebook.encode(mask_pred).numpy()
    x = np.asarray(T.as_tensor(mask_t).numpy(), dtype=np.float64)
    if x.shape != enc.shape:
        raise ShapeError(f"mask_t 形状 {x.shape} 与预测编码形状 {enc.shape} 不一致")
    ab_now = float(sched.alpha_bar(t_now))
    ab_next = float(sched.alpha_bar(t_next))
    eps = (x - np.sqrt(ab_now) * enc) / np.sqrt(max(1.0 - ab_now, DDIM_EPS))
    return T.as_tensor(np.sqrt(ab_next) * enc + np.sqrt(1.0 - ab_next) * eps)


def resize_labels(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """标签最近邻缩放（像素中心映射），只会出现原有 id。"""
    h, w = label.shape
    rows = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return label[np.ix_(rows, cols)]


def timesteps(step: int, steps: int, td: float):
    t_now = 1.0 - step / steps
    t_next = max(1.0 - (step + 1 + td) / steps, 0.0)
    return t_now, t_next


def initial_noise(shape: tuple, seed: int, sample_id: int = 0) -> np.ndarray:
    """每张图独立的起始噪声，由 (seed, sample_id) 决定。"""
    return np.random.default_rng([seed, sample_id]).standard_normal(shape)


def sample(model: "DiffSegModel", rgb: np.ndarray, depth: np.ndarray, cfg: SamplerConfig,
           trace: Optional[list] = None, return_trajectory: bool = False, sample_id: int = 0):
    """
    条件信号只计算一次，然后从单位高斯噪声出发做 steps 次 解码 + DDIM。
    返回全分辨率的类别图；return_trajectory=True 时同时返回每一步的预测。
    """
    rgb_t, depth_t = model.inputs(rgb, depth)
    cond = model.condition(rgb_t, depth_t, trace)
    _, h4, w4 = cond.shape
    mask_t = T.as_tensor(initial_noise((model.codebook.dim, h4, w4), cfg.seed, sample_id))

    trajectory: List[np.ndarray] = []
    pred = None
    for step in range(cfg.steps):
        t_now, t_next = timesteps(step, cfg.steps, cfg.td)
        logits = model.decoder(mask_t, cond, t_now)
        pred = predict_mask(logits)
        trajectory.append(pred)
        logger.debug(f"[采样] step {step + 1}/{cfg.steps}: t_now={t_now:.3f}, t_next={t_next:.3f}")
        if step < cfg.steps - 1:
            mask_t = ddim_step(mask_t, resize_labels(pred, h4, w4), t_now, t_next, model.codebook, model.schedule)

    return (pred, trajectory) if return_trajectory else pred
