# app/services/tensor.py
"""
最小稠密张量库：numpy 数组 + 基于 Tape 的反向自动微分。

约定:
- 存储与计算默认 float32；`precision(np.float64)` 上下文切换到 64 位影子路径（梯度检查用）。
- 只有在 `with Tape():` 内部、且至少一个输入 requires_grad 时才会记录算子。
- 同一条 tape 上多次 backward 不清零，梯度在叶子上累加。
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy import sparse, special

from app.core.config import settings
from app.core.exceptions import DataError, NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_state = threading.local()
_DEBUG = settings.DEBUG_NUMERICS

GELU_C = np.sqrt(2.0 / np.pi)


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """临时切换默认浮点精度（仅影响当前线程）。"""
    old = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


def set_debug(flag: bool):
    """打开/关闭每个算子之后的 NaN/Inf 检查。"""
    global _DEBUG
    _DEBUG = bool(flag)


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    # 让 numpy 标量在左侧时也走 Tensor 的反射运算符
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    # --- 基本属性 ---
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() 只能用于单元素张量, 当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # --- 运算符 ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p: float): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    # --- 方法形式 ---
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_default_dtype()))


class _Record:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: tuple, output: Tensor, backward: Callable):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """按执行顺序记录算子；records 天然满足拓扑序。"""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def reset(self):
        self.records.clear()

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise TapeError(f"backward 需要标量 loss, 当前形状 {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss 不是由当前 tape 记录的算子产生的")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp.is_leaf:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            g = np.array(grads[key], dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor):
    """对标量 loss 反向传播，填充所有 requires_grad 叶子的 .grad。"""
    if loss._tape is None:
        raise TapeError("loss 不在任何 tape 上（是否忘了 `with Tape():`？）")
    loss._tape.backward(loss)


def _make(name: str, data, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    data = np.asarray(data).astype(get_default_dtype(), copy=False)
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"[{name}] 输出包含 NaN/Inf")
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(name, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if not isinstance(axis, (tuple, list)):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# 逐元素算子
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), bw)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    return _make("pow", x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = special.expit(x.data)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """tanh 近似的 GELU。"""
    x = as_tensor(x)
    xd = x.data
    inner = GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def bw(g):
        d_inner = GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * d_inner),)

    return _make("gelu", y, (x,), bw)


# ---------------------------------------------------------------------------
# 规约 / 形状算子
# ---------------------------------------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_(x, axes, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("getitem", np.array(x.data[idx]), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


# ---------------------------------------------------------------------------
# 线性代数 / 归一化
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul 需要至少二维输入, 得到 {a.shape} 和 {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul 内维不匹配: {a.shape} x {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", np.matmul(a.data, b.data), (a, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = special.softmax(x.data, axis=axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = special.log_softmax(x.data, axis=axis)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), bw)


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    ax = axis % x.ndim
    n = x.shape[ax]
    if gain.size != n or bias.size != n:
        raise ShapeError(f"layer_norm 仿射参数长度应为 {n}, 得到 {gain.shape}/{bias.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = n
    gn = gain.data.reshape(bshape)
    bs = bias.data.reshape(bshape)

    xc = x.data - x.data.mean(axis=ax, keepdims=True)
    var = (xc * xc).mean(axis=ax, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    red = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        dxhat = g * gn
        dx = rstd * (dxhat - dxhat.mean(axis=ax, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True))
        dgain = (g * xhat).sum(axis=red).reshape(gain.shape)
        dbias = g.sum(axis=red).reshape(bias.shape)
        return dx, dgain, dbias

    return _make("layer_norm", xhat * gn + bs, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# 卷积 / 采样
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """单张图的互相关: x[C,H,W], weight[C', C/groups, kh, kw] -> [C', H', W']。"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d 需要 x[C,H,W] 与 weight[C',C,kh,kw], 得到 {x.shape} / {weight.shape}")
    C, H, W = x.shape
    Co, Cg, kh, kw = weight.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"只支持 1x1 / 3x3 卷积核, 得到 {kh}x{kw}")
    if C != Cg * groups or Co % groups:
        raise ShapeError(f"conv2d 通道不匹配: 输入 {C}, 卷积核 {weight.shape}, groups={groups}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d 输出尺寸非法: {Ho}x{Wo}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((C, kh, kw, Ho, Wo), dtype=x.data.dtype)
    ys, xs = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + ys:stride, j:j + xs:stride]
    cols_g = cols.reshape(groups, Cg * kh * kw, Ho * Wo)
    w_g = weight.data.reshape(groups, Co // groups, Cg * kh * kw)
    out = np.matmul(w_g, cols_g).reshape(Co, Ho, Wo)

    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(Co, 1, 1)
        inputs.append(bias)

    def bw(g):
        g_g = g.reshape(groups, Co // groups, Ho * Wo)
        dw = np.matmul(g_g, cols_g.transpose(0, 2, 1)).reshape(weight.shape)
        dcols = np.matmul(w_g.transpose(0, 2, 1), g_g).reshape(C, kh, kw, Ho, Wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + ys:stride, j:j + xs:stride] += dcols[:, i, j]
        dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _make("conv2d", out, inputs, bw)


def bilinear_sample(feat, points) -> Tensor:
    """
    在归一化坐标 points[N,2]=(x,y)∈[-1,1] 处对 feat[C,H,W] 双线性采样，返回 [N,C]。
    像素中心对齐（x=-1 对应第 0 列像素的左边缘）；越界点夹到边界。
    """
    feat, points = as_tensor(feat), as_tensor(points)
    if feat.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample 需要 feat[C,H,W] 与 points[N,2], 得到 {feat.shape} / {points.shape}")
    C, H, W = feat.shape
    f = feat.data
    p = points.data

    px = ((p[:, 0] + 1.0) * W - 1.0) / 2.0
    py = ((p[:, 1] + 1.0) * H - 1.0) / 2.0
    inside_x = (px >= 0) & (px <= W - 1)
    inside_y = (py >= 0) & (py <= H - 1)
    px = np.clip(px, 0, W - 1)
    py = np.clip(py, 0, H - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = px - x0
    wy = py - y0

    f00, f01 = f[:, y0, x0], f[:, y0, x1]
    f10, f11 = f[:, y1, x0], f[:, y1, x1]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    # 四个角点合成一张 [H*W, N] 的稀疏插值矩阵，重复下标求和
    N = p.shape[0]
    interp = sparse.csr_matrix(
        (np.concatenate([w00, w01, w10, w11]),
         (np.concatenate([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1]), np.tile(np.arange(N), 4))),
        shape=(H * W, N),
    )
    out = np.asarray(interp.T @ f.reshape(C, H * W).T, dtype=f.dtype)

    def bw(g):
        gt = g.T
        df = np.asarray(interp @ g, dtype=f.dtype).T.reshape(C, H, W)
        dpx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
        dpy = (1 - wx) * (f10 - f00) + wx * (f11 - f01)
        gx = (gt * dpx).sum(axis=0) * (W / 2.0) * inside_x
        gy = (gt * dpy).sum(axis=0) * (H / 2.0) * inside_y
        return df, np.stack([gx, gy], axis=1)

    return _make("bilinear_sample", out, (feat, points), bw)


# ---------------------------------------------------------------------------
# 损失
# ---------------------------------------------------------------------------

def cross_entropy(logits, target, ignore_id: int = 255) -> Tensor:
    """logits[K,N] 与类别 id target[N] 的平均交叉熵；ignore_id 位置不计入。"""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy 需要 logits[K,N], 得到 {logits.shape}")
    K, N = logits.shape
    target = np.asarray(target).reshape(-1)
    if target.shape[0] != N:
        raise ShapeError(f"target 长度 {target.shape[0]} 与 logits 列数 {N} 不一致")
    valid = target != ignore_id
    tv = target[valid]
    if np.any((tv < 0) | (tv >= K)):
        raise DataError(f"标签 id 越界: 允许 0..{K - 1} 或 {ignore_id}")
    idx = np.nonzero(valid)[0]
    n = idx.size

    if n == 0:
        return _make("cross_entropy", np.zeros(()), (logits,), lambda g: (np.zeros_like(logits.data),))

    lsm = special.log_softmax(logits.data, axis=0)
    loss = -lsm[tv, idx].sum() / n

    def bw(g):
        grad = np.exp(lsm)
        grad[tv, idx] -= 1.0
        grad[:, ~valid] = 0.0
        return (grad * (g / n),)

    return _make("cross_entropy", loss, (logits,), bw)
