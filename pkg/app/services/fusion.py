# app/services/fusion.py
"""跨模态特征校正 (FRM)、融合 (FFM)、FPN 合并，以及完整的 RGB-D 条件信号编码器。"""
import logging
from typing import List, Optional

import numpy as np

from app.core.exceptions import ShapeError
from app.models.run_config import ModelConfig
from app.services import tensor as T
from app.services.attention import MultiHeadAttention
from app.services.encoder import BranchEncoder
from app.services.nn import (Conv2d, LayerNorm, Mlp, Module, Parameter, adaptive_avg_pool, channel_norm,
                             from_tokens, global_avg_pool, resize, to_tokens)
from app.services.tensor import Tensor

logger = logging.getLogger(__name__)


def _check_pair(f_rgb: Tensor, f_d: Tensor):
    if f_rgb.shape != f_d.shape:
        raise ShapeError(f"RGB 与深度特征形状不一致: {f_rgb.shape} vs {f_d.shape}")


class FeatureRectify(Module):
    """
    通道校正：两支全局平均池化 -> MLP -> sigmoid，得到每支的通道门控；
    空间校正：拼接后 1x1 卷积到 2 通道 -> sigmoid，得到每支的空间门控。
    out = f + λ_c·(g_c ⊙ other) + λ_s·(g_s ⊙ other)，λ 初始化为 0。
    """

    def __init__(self, dim: int, rng: np.random.Generator, reduction: int = 4):
        self.channel_mlp = Mlp(2 * dim, max(2 * dim // reduction, 4), rng, out_dim=2 * dim)
        self.spatial = Conv2d(2 * dim, 2, 1, rng)
        self.lambda_c = Parameter(np.zeros(1))
        self.lambda_s = Parameter(np.zeros(1))

    def gates(self, f_rgb: Tensor, f_d: Tensor):
        C = f_rgb.shape[0]
        pooled = T.concat([global_avg_pool(f_rgb), global_avg_pool(f_d)], axis=0)
        g = T.reshape(T.sigmoid(self.channel_mlp(T.reshape(pooled, (1, 2 * C)))), (2 * C, 1, 1))
        s = T.sigmoid(self.spatial(T.concat([f_rgb, f_d], axis=0)))
        return g[:C], g[C:], s[0:1], s[1:2]

    def forward(self, f_rgb: Tensor, f_d: Tensor):
        _check_pair(f_rgb, f_d)
        gc_rgb, gc_d, gs_rgb, gs_d = self.gates(f_rgb, f_d)
        rgb_out = f_rgb + self.lambda_c * (gc_rgb * f_d) + self.lambda_s * (gs_rgb * f_d)
        d_out = f_d + self.lambda_c * (gc_d * f_rgb) + self.lambda_s * (gs_d * f_rgb)
        return rgb_out, d_out


def frm(f_rgb: Tensor, f_d: Tensor, module: FeatureRectify):
    return module(f_rgb, f_d)


class FeatureFusion(Module):
    """
    一个交叉注意力模块在两个方向上共享：query 为本模态全分辨率 token，
    key/value 为另一模态池化到 1/32 等效分辨率后的 token。两支结果拼接后 1x1 卷积回 C 通道。
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, pool_factor: int = 1):
        self.norm = LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads, rng)
        self.merge = Conv2d(2 * dim, dim, 1, rng)
        self.pool_factor = pool_factor

    def exchange(self, f_q: Tensor, f_kv: Tensor) -> Tensor:
        C, H, W = f_q.shape
        ph, pw = max(1, H // self.pool_factor), max(1, W // self.pool_factor)
        q = self.norm(to_tokens(f_q))
        kv = self.norm(to_tokens(adaptive_avg_pool(f_kv, ph, pw)))
        return f_q + from_tokens(self.cross.attend(q, kv), H, W)

    def forward(self, f_rgb: Tensor, f_d: Tensor) -> Tensor:
        _check_pair(f_rgb, f_d)
        y_rgb = self.exchange(f_rgb, f_d)
        y_d = self.exchange(f_d, f_rgb)
        return self.merge(T.concat([y_rgb, y_d], axis=0))


def ffm(f_rgb: Tensor, f_d: Tensor, module: FeatureFusion) -> Tensor:
    return module(f_rgb, f_d)


class Fpn(Module):
    """1x1 横向卷积到统一通道，自顶向下最近邻上采样求和，1/4 尺度上 3x3 平滑，再 1x1 聚合。"""

    def __init__(self, channels: List[int], out_channels: int, rng: np.random.Generator):
        self.laterals = [Conv2d(c, out_channels, 1, rng) for c in channels]
        self.smooth = Conv2d(out_channels, out_channels, 3, rng)
        self.aggregate = Conv2d(out_channels, out_channels, 1, rng, bias=False)
        self.norm = LayerNorm(out_channels)

    def merge(self, feats: List[Tensor]) -> Tensor:
        """聚合卷积之后、归一化之前的输出。"""
        if len(feats) != len(self.laterals):
            raise ShapeError(f"FPN 需要 {len(self.laterals)} 个尺度, 得到 {len(feats)}")
        p = self.laterals[-1](feats[-1])
        for lateral, f in zip(reversed(self.laterals[:-1]), reversed(feats[:-1])):
            _, H, W = f.shape
            p = lateral(f) + resize(p, H, W, mode="nearest")
        return self.aggregate(self.smooth(p))

    def forward(self, feats: List[Tensor]) -> Tensor:
        return channel_norm(self.merge(feats), self.norm)


def fpn_condition(fused: List[Tensor], fpn: Fpn) -> Tensor:
    return fpn(fused)


class RgbdEncoder(Module):
    """
    双分支编码 + 逐 stage 的 FRM/FFM + FPN，输出 cond_channels × h/4 × w/4 的条件信号。
    FRM 校正后的特征继续送入下一个 stage。
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.rgb_encoder = BranchEncoder(cfg, rng)
        self.depth_encoder = BranchEncoder(cfg, rng)
        self.frms = [FeatureRectify(c, rng) for c in cfg.channels]
        self.ffms = [
            FeatureFusion(c, max(1, c // cfg.head_dim), rng, pool_factor=2 ** (3 - i))
            for i, c in enumerate(cfg.channels)
        ]
        self.fpn = Fpn(cfg.channels, cfg.cond_channels, rng)

    def forward(self, rgb: Tensor, depth: Tensor, trace: Optional[list] = None) -> Tensor:
        if rgb.shape != depth.shape:
            raise ShapeError(f"RGB 与深度输入形状不一致: {rgb.shape} vs {depth.shape}")
        _, h, w = rgb.shape
        if h % 32 or w % 32:
            raise ShapeError(f"输入尺寸 {h}x{w} 必须能被 32 整除")
        r, d = rgb, depth
        fused = []
        for rgb_stage, depth_stage, rect, fuse in zip(self.rgb_encoder.stages, self.depth_encoder.stages,
                                                      self.frms, self.ffms):
            stage_trace = None
            if trace is not None:
                stage_trace = []
                trace.append(stage_trace)
            r = rgb_stage(r)
            d = depth_stage(d, stage_trace)
            r, d = rect(r, d)
            fused.append(fuse(r, d))
        return self.fpn(fused)


def full_condition(rgb: Tensor, depth: Tensor, encoder: RgbdEncoder, trace: Optional[list] = None) -> Tensor:
    return encoder(rgb, depth, trace)
