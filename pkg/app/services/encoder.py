# app/services/encoder.py
"""
单分支四 stage 编码器（RGB 与深度各一个，权重不共享）。

stage 1 以 4x4 不重叠块嵌入开头（下采样 4 倍），之后每个 stage 先用 2x2 块合并下采样，
再经过通道 LayerNorm、位置偏置和若干 block。
"""
import logging
from typing import List, Optional

import numpy as np

from app.core.exceptions import ShapeError
from app.core.model_config import EncoderKind
from app.models.run_config import ModelConfig
from app.services import tensor as T
from app.services.attention import DatBlock, PositionalBias
from app.services.nn import Conv2d, LayerNorm, Module, PatchEmbed, channel_norm
from app.services.tensor import Tensor

logger = logging.getLogger(__name__)


class ConvBlock(Module):
    """卷积基线的残差块：x + conv(GELU(conv(LN(x))))。"""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.conv1 = Conv2d(dim, dim, 3, rng)
        self.conv2 = Conv2d(dim, dim, 3, rng)

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        return x + self.conv2(T.gelu(self.conv1(channel_norm(x, self.norm))))


class EncoderStage(Module):
    def __init__(self, in_ch: int, out_ch: int, depth: int, size: int, cfg: ModelConfig,
                 rng: np.random.Generator, stem: bool = False):
        self.down = PatchEmbed(in_ch, out_ch, 4 if stem else 2, rng)
        self.norm = LayerNorm(out_ch)
        self.pos = PositionalBias(out_ch, size, rng)
        if cfg.encoder_kind == EncoderKind.dat:
            heads = max(1, out_ch // cfg.head_dim)
            self.blocks = [DatBlock(out_ch, heads, rng) for _ in range(depth)]
        else:
            self.blocks = [ConvBlock(out_ch, rng) for _ in range(depth)]

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        x = self.pos(channel_norm(self.down(x), self.norm))
        for block in self.blocks:
            x = block(x, trace)
        return x


class BranchEncoder(Module):
    """输出 1/4、1/8、1/16、1/32 四个尺度的特征。"""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, in_channels: int = 3):
        sizes = [cfg.image_size // f for f in (4, 8, 16, 32)]
        chans = [in_channels] + list(cfg.channels)
        self.stages = [
            EncoderStage(chans[i], chans[i + 1], cfg.blocks[i], sizes[i], cfg, rng, stem=(i == 0))
            for i in range(4)
        ]

    def forward(self, img: Tensor, trace: Optional[List[list]] = None) -> List[Tensor]:
        if img.ndim != 3:
            raise ShapeError(f"编码器输入应为 [C,h,w], 得到 {img.shape}")
        _, h, w = img.shape
        if h % 32 or w % 32:
            raise ShapeError(f"输入尺寸 {h}x{w} 必须能被 32 整除")
        feats = []
        x = img
        for stage in self.stages:
            stage_trace = None
            if trace is not None:
                stage_trace = []
                trace.append(stage_trace)
            x = stage(x, stage_trace)
            feats.append(x)
        return feats


def encode_branch(img: Tensor, encoder: BranchEncoder, trace: Optional[list] = None) -> List[Tensor]:
    return encoder(img, trace)


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """有效深度按图内 min-max 缩放到 [0,1]，无效像素 (0) 保持 0；复制为 3 通道 [3,h,w]。"""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    out = np.zeros_like(depth)
    if valid.any():
        lo, hi = depth[valid].min(), depth[valid].max()
        span = hi - lo
        out[valid] = (depth[valid] - lo) / span if span > 0 else 1.0
    return np.repeat(out[None], 3, axis=0)


def normalize_rgb(rgb: np.ndarray) -> np.ndarray:
    """[h,w,3] -> [3,h,w]"""
    return np.transpose(np.asarray(rgb, dtype=np.float64), (2, 0, 1))
