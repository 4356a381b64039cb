# app/services/nn.py
"""参数容器、基础层，以及基于插值矩阵的缩放/池化函数。"""
import logging
from functools import lru_cache
from typing import Dict, Iterator, Tuple

import numpy as np

from app.core.exceptions import DataError, ShapeError
from app.services import tensor as T
from app.services.tensor import Tensor

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """按属性插入顺序收集参数；子模块可以放在属性或 list 里。"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise DataError(f"参数表不一致: 缺少 {missing[:5]}, 多出 {unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"参数 {name} 形状不匹配: 期望 {p.shape}, 得到 {value.shape}")
            p.data = value.astype(p.data.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# 基础层
# ---------------------------------------------------------------------------

class Linear(Module):
    """y = x @ W + b, W 形状为 [in, out]。"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            limit = np.sqrt(6.0 / (in_features + out_features))
            w = rng.uniform(-limit, limit, size=(in_features, out_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, groups: int = 1, bias: bool = True, zero_init: bool = False,
                 std: float | None = None):
        fan_in = in_channels // groups * kernel_size * kernel_size
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        if std is None:
            std = np.sqrt(2.0 / fan_in)
        w = np.zeros(shape) if zero_init else rng.normal(0.0, std, size=shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.pad = kernel_size // 2
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad, groups=self.groups)


class PatchEmbed(Module):
    """不重叠 p×p 块的线性投影，等价于 kernel = stride = p 的卷积。"""

    def __init__(self, in_channels: int, out_channels: int, patch: int, rng: np.random.Generator):
        self.proj = Linear(in_channels * patch * patch, out_channels, rng)
        self.patch = patch

    def forward(self, x: Tensor) -> Tensor:
        C, H, W = x.shape
        return from_tokens(self.proj(space_to_depth(x, self.patch)), H // self.patch, W // self.patch)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor, axis: int = -1) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, axis=axis)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# 函数式工具
# ---------------------------------------------------------------------------

def to_tokens(x: Tensor) -> Tensor:
    """[C,H,W] -> [H*W, C]（行优先的像素顺序）。"""
    C, H, W = x.shape
    return T.transpose(T.reshape(x, (C, H * W)), (1, 0))


def from_tokens(t: Tensor, H: int, W: int) -> Tensor:
    N, C = t.shape
    if N != H * W:
        raise ShapeError(f"token 数 {N} 与 {H}x{W} 不一致")
    return T.reshape(T.transpose(t, (1, 0)), (C, H, W))


def space_to_depth(x: Tensor, patch: int) -> Tensor:
    """[C,H,W] -> [(H/p)·(W/p), C·p·p]，token 行优先，块内按 (C, dy, dx) 展开。"""
    C, H, W = x.shape
    if patch < 1 or H % patch or W % patch:
        raise ShapeError(f"{H}x{W} 不能被块大小 {patch} 整除")
    h, w = H // patch, W // patch
    t = T.transpose(T.reshape(x, (C, h, patch, w, patch)), (1, 3, 0, 2, 4))
    return T.reshape(t, (h * w, C * patch * patch))


@lru_cache(maxsize=256)
def interp_matrix(out_size: int, in_size: int, mode: str) -> np.ndarray:
    """
    一维重采样矩阵 M[out, in]，对特征图做 M_h @ x @ M_w^T 即完成缩放。
    mode: bilinear（像素中心对齐）| nearest | area（自适应平均池化）
    """
    M = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        if mode == "bilinear":
            src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, in_size - 1)
            w = src - i0
            M[i, i0] += 1.0 - w
            M[i, i1] += w
        elif mode == "nearest":
            M[i, min(int(np.floor((i + 0.5) * scale)), in_size - 1)] = 1.0
        elif mode == "area":
            start = int(np.floor(i * scale))
            end = max(int(np.ceil((i + 1) * scale)), start + 1)
            M[i, start:end] = 1.0 / (end - start)
        else:
            raise ValueError(f"未知的插值方式: {mode}")
    M.flags.writeable = False
    return M


def resize(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x
    mh = T.as_tensor(interp_matrix(out_h, H, mode))
    mw_t = T.as_tensor(interp_matrix(out_w, W, mode).T)
    return T.matmul(T.matmul(mh, x), mw_t)


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return resize(x, out_h, out_w, mode="area")


def global_avg_pool(x: Tensor) -> Tensor:
    """[C,H,W] -> [C]"""
    return T.mean(x, axis=(1, 2))


def channel_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """对 [C,H,W] 特征图逐像素做通道 LayerNorm。"""
    C, H, W = x.shape
    return from_tokens(norm(to_tokens(x)), H, W)
