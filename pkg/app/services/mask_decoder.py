# app/services/mask_decoder.py
"""
去噪解码器：噪声掩码与条件信号拼接 -> 1x1 卷积 -> 若干层带时间嵌入的可变形注意力 block
-> 1x1 卷积到 K 类 -> 双线性上采样 4 倍。

block 内的注意力为单尺度 Deformable-DETR 形式：每个 query 在每个头上预测 P 个采样点的
像素偏移与注意力权重（softmax over points），不做 key 点积。
"""
import logging
from functools import lru_cache

import numpy as np

from app.core.exceptions import ShapeError
from app.models.run_config import ModelConfig
from app.services import tensor as T
from app.services.attention import reference_points
from app.services.nn import Conv2d, LayerNorm, Linear, Mlp, Module, channel_norm, from_tokens, resize, to_tokens
from app.services.tensor import Tensor

logger = logging.getLogger(__name__)

TIME_FREQ_DIM = 64
# 时间 t∈[0,1] 先放大到离散步量级再做正弦编码
TIME_SCALE = 1000.0


def sinusoid(x: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = x * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


@lru_cache(maxsize=32)
def sine_position_embedding(H: int, W: int, dim: int) -> np.ndarray:
    """固定二维正弦位置编码 [H*W, dim]，前一半通道编码 y，后一半编码 x。"""
    quarter = dim // 4
    freqs = np.exp(-np.log(10000.0) * np.arange(quarter) / max(quarter, 1))
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    ys, xs = ys.ravel()[:, None] * freqs, xs.ravel()[:, None] * freqs
    emb = np.concatenate([np.sin(ys), np.cos(ys), np.sin(xs), np.cos(xs)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    emb.flags.writeable = False
    return emb


class TimeEmbedding(Module):
    def __init__(self, hidden: int, rng: np.random.Generator, freq_dim: int = TIME_FREQ_DIM):
        self.freq_dim = freq_dim
        self.hidden = hidden
        self.mlp = Mlp(freq_dim, hidden, rng, out_dim=hidden)

    def forward(self, t: float) -> Tensor:
        freq = T.as_tensor(sinusoid(float(t) * TIME_SCALE, self.freq_dim)[None])
        return T.reshape(self.mlp(freq), (self.hidden,))


def time_embed(t: float, module: TimeEmbedding) -> Tensor:
    return module(t)


class DeformableDecoderBlock(Module):
    def __init__(self, hidden: int, heads: int, points: int, rng: np.random.Generator):
        if hidden % heads:
            raise ShapeError(f"hidden {hidden} 不能被头数 {heads} 整除")
        self.heads = heads
        self.points = points
        self.head_dim = hidden // heads
        self.norm1 = LayerNorm(hidden)
        self.value_proj = Linear(hidden, hidden, rng)
        self.offset_proj = Linear(hidden, heads * points * 2, rng, zero_init=True)
        self.attn_proj = Linear(hidden, heads * points, rng, zero_init=True)
        self.out_proj = Linear(hidden, hidden, rng)
        self.norm2 = LayerNorm(hidden)
        self.mlp = Mlp(hidden, hidden * 2, rng)
        self._ring_init()

    def _ring_init(self):
        # 每个头朝一个方向，第 p 个点距离 p+1 个像素
        theta = 2.0 * np.pi * np.arange(self.heads) / self.heads
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        dirs = dirs / np.abs(dirs).max(axis=1, keepdims=True)
        ring = dirs[:, None, :] * np.arange(1, self.points + 1)[None, :, None]
        self.offset_proj.bias.data = ring.reshape(-1).astype(self.offset_proj.bias.data.dtype)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        C, H, W = x.shape
        N = H * W
        tokens = to_tokens(x)
        y = self.norm1(tokens) + temb
        q = y + sine_position_embedding(H, W, C)
        value = self.value_proj(y)

        # 像素偏移 -> 归一化坐标
        pixel_scale = np.array([2.0 / W, 2.0 / H])
        offsets = T.reshape(self.offset_proj(q), (N, self.heads, self.points, 2)) * pixel_scale
        ref = reference_points(H, W).points.reshape(N, 1, 1, 2)
        locs = offsets + ref
        weights = T.softmax(T.reshape(self.attn_proj(q), (N, self.heads, self.points)), axis=-1)

        outs = []
        for h in range(self.heads):
            vmap = from_tokens(value[:, h * self.head_dim:(h + 1) * self.head_dim], H, W)
            sampled = T.bilinear_sample(vmap, T.reshape(locs[:, h], (N * self.points, 2)))
            sampled = T.reshape(sampled, (N, self.points, self.head_dim))
            w = T.reshape(weights[:, h], (N, 1, self.points))
            outs.append(T.reshape(w @ sampled, (N, self.head_dim)))
        tokens = tokens + self.out_proj(T.concat(outs, axis=1))
        tokens = tokens + self.mlp(self.norm2(tokens))
        return from_tokens(tokens, H, W)


class MaskDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.in_proj = Conv2d(cfg.embed_dim + cfg.cond_channels, cfg.decoder_hidden, 1, rng)
        self.time_embed = TimeEmbedding(cfg.decoder_hidden, rng)
        self.blocks = [
            DeformableDecoderBlock(cfg.decoder_hidden, cfg.decoder_heads, cfg.decoder_points, rng)
            for _ in range(cfg.decoder_layers)
        ]
        self.norm = LayerNorm(cfg.decoder_hidden)
        # 分类头小方差初始化，初始 logits 近似均匀
        self.head = Conv2d(cfg.decoder_hidden, cfg.num_classes, 1, rng, std=0.01)

    def forward(self, mask_t: Tensor, cond: Tensor, t: float) -> Tensor:
        if mask_t.ndim != 3 or cond.ndim != 3 or mask_t.shape[1:] != cond.shape[1:]:
            raise ShapeError(f"噪声掩码 {mask_t.shape} 与条件信号 {cond.shape} 空间尺寸不一致")
        _, h4, w4 = cond.shape
        x = self.in_proj(T.concat([mask_t, cond], axis=0))
        temb = self.time_embed(t)
        for block in self.blocks:
            x = block(x, temb)
        logits = self.head(channel_norm(x, self.norm))
        return resize(logits, h4 * 4, w4 * 4, mode="bilinear")


def decode(mask_t: Tensor, cond: Tensor, t: float, decoder: MaskDecoder) -> Tensor:
    return decoder(mask_t, cond, t)


def predict_mask(logits) -> np.ndarray:
    """逐像素 argmax，并列时取最小类别 id。"""
    data = logits.numpy() if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=0).astype(np.uint8)
