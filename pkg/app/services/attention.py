# app/services/attention.py
"""
多头自注意力与可变形注意力。

可变形注意力的 key/value 来自一组参考网格点（加上偏移网络预测的位移）处的双线性采样，
同一组采样点被所有 query 共享。
"""
import logging
from typing import List, NamedTuple, Optional

import numpy as np

from app.core.exceptions import ShapeError
from app.services import tensor as T
from app.services.nn import (Conv2d, LayerNorm, Linear, Mlp, Module, Parameter, adaptive_avg_pool,
                             channel_norm, from_tokens, resize, to_tokens)
from app.services.tensor import Tensor

logger = logging.getLogger(__name__)


class MultiHeadAttention(Module):
    """C -> M·d 的 q/k/v 投影（无偏置）与 M·d -> C 的输出投影，C == M·d。"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ShapeError(f"通道数 {dim} 不能被头数 {heads} 整除")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wout = Linear(dim, dim, rng, bias=False)

    def _split(self, t: Tensor) -> Tensor:
        n = t.shape[0]
        return T.transpose(T.reshape(t, (n, self.heads, self.head_dim)), (1, 0, 2))

    def attend(self, q_tokens: Tensor, kv_tokens: Tensor, return_weights: bool = False):
        """q_tokens[N,C] 对 kv_tokens[G,C] 做注意力，返回 [N,C]（可选同时返回权重 [M,N,G]）。"""
        if q_tokens.ndim != 2 or q_tokens.shape[1] != self.dim or kv_tokens.ndim != 2 or kv_tokens.shape[1] != self.dim:
            raise ShapeError(f"注意力输入维度应为 [*, {self.dim}], 得到 {q_tokens.shape} / {kv_tokens.shape}")
        n = q_tokens.shape[0]
        q = self._split(self.wq(q_tokens))
        k = self._split(self.wk(kv_tokens))
        v = self._split(self.wv(kv_tokens))
        scores = (q @ T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        weights = T.softmax(scores, axis=-1)
        z = T.reshape(T.transpose(weights @ v, (1, 0, 2)), (n, self.dim))
        out = self.wout(z)
        return (out, weights) if return_weights else out

    def forward(self, x: Tensor) -> Tensor:
        return self.attend(x, x)


def mhsa(x: Tensor, params: MultiHeadAttention) -> Tensor:
    return params.attend(x, x)


class ReferenceGrid(NamedTuple):
    gh: int
    gw: int
    points: np.ndarray  # [gh*gw, 2]，(x, y)，行优先


def reference_points(gh: int, gw: int) -> ReferenceGrid:
    """[-1,1]² 均匀划分为 gh×gw 个格子后的格子中心。"""
    if gh < 1 or gw < 1:
        raise ShapeError(f"网格尺寸必须 >= 1, 得到 {gh}x{gw}")
    ys = (2 * np.arange(gh) + 1) / gh - 1
    xs = (2 * np.arange(gw) + 1) / gw - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ReferenceGrid(gh, gw, np.stack([xx.ravel(), yy.ravel()], axis=1))


class DeformableAttention(Module):
    """
    偏移网络：q 图 -> 深度可分离 3x3 卷积 -> GELU -> 1x1 卷积到 2 通道（零初始化）
    -> 自适应平均池化到网格分辨率 -> tanh -> 乘以 2/G（一个格子宽）。
    所有头共享一组偏移。
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, grid: Optional[tuple] = None):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.offset_dw = Conv2d(dim, dim, 3, rng, groups=dim)
        self.offset_proj = Conv2d(dim, 2, 1, rng, zero_init=True)
        self.grid = grid

    def grid_size(self, H: int, W: int) -> tuple:
        if self.grid is not None:
            return self.grid
        return max(1, H // 2), max(1, W // 2)

    def offsets(self, q_map: Tensor, gh: int, gw: int) -> Tensor:
        """返回 [gh*gw, 2] 的归一化位移 (dx, dy)。"""
        raw = self.offset_proj(T.gelu(self.offset_dw(q_map)))
        pooled = T.tanh(adaptive_avg_pool(raw, gh, gw))
        scale = np.array([2.0 / gw, 2.0 / gh]).reshape(2, 1, 1)
        delta = pooled * scale
        return T.transpose(T.reshape(delta, (2, gh * gw)), (1, 0))

    def sample_points(self, x: Tensor) -> Tensor:
        C, H, W = x.shape
        gh, gw = self.grid_size(H, W)
        q_map = from_tokens(self.attn.wq(to_tokens(x)), H, W)
        return T.as_tensor(reference_points(gh, gw).points) + self.offsets(q_map, gh, gw)

    def forward(self, x: Tensor, trace: Optional[List[np.ndarray]] = None) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.attn.dim:
            raise ShapeError(f"可变形注意力输入应为 [{self.attn.dim},H,W], 得到 {x.shape}")
        C, H, W = x.shape
        points = self.sample_points(x)
        if trace is not None:
            trace.append(points.numpy().copy())
        sampled = T.bilinear_sample(x, points)
        return from_tokens(self.attn.attend(to_tokens(x), sampled), H, W)


def deform_attend(x: Tensor, params: DeformableAttention, trace: Optional[list] = None) -> Tensor:
    return params(x, trace)


class DatBlock(Module):
    """pre-norm：x + attn(LN(x))，再 x + MLP(LN(x))，MLP 默认扩展 2 倍。"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim)
        self.attn = DeformableAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        C, H, W = x.shape
        x = x + self.attn(channel_norm(x, self.norm1), trace)
        tokens = to_tokens(x)
        tokens = tokens + self.mlp(self.norm2(tokens))
        return from_tokens(tokens, H, W)


def dat_block(x: Tensor, block: DatBlock, trace: Optional[list] = None) -> Tensor:
    return block(x, trace)


class PositionalBias(Module):
    """每个 stage 一张可学习的位置偏置图；输入尺寸不同时双线性缩放。"""

    def __init__(self, dim: int, size: int, rng: np.random.Generator):
        self.bias = Parameter(rng.normal(0.0, 0.02, size=(dim, size, size)))

    def forward(self, x: Tensor) -> Tensor:
        C, H, W = x.shape
        return x + resize(self.bias, H, W)
