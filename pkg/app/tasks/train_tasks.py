# app/tasks/train_tasks.py
"""
训练流程：对编码后的真值标签加噪 -> 解码 -> 忽略掩码的交叉熵 -> 反传 -> 梯度裁剪 -> AdamW。
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import map_coordinates

from app.core.exceptions import DataError, NumericError
from app.models.run_config import ModelConfig, TrainConfig
from app.models.sample import RgbdSample
from app.services import tensor as T
from app.services.checkpoint import save_checkpoint
from app.services.diffusion import corrupt, resize_labels
from app.services.metrics import count_loss_spikes
from app.services.optimizer import AdamW, clip_grad_norm
from app.services.segmenter import DiffSegModel, checkpoint_metadata
from app.services.tensor import Tape, Tensor

logger = logging.getLogger("TrainTask")

SCALE_RANGE = (1.0, 1.25)


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """线性 warmup 到 lr0，之后 lr0·(1 - progress)^power。"""
    if total <= 0:
        return 0.0
    warm = int(round(cfg.warmup * total))
    if step < warm:
        return cfg.lr * step / warm
    progress = (step - warm) / max(total - warm, 1)
    return cfg.lr * max(1.0 - progress, 0.0) ** cfg.power


# ---------------------------------------------------------------------------
# 数据增强
# ---------------------------------------------------------------------------

class AugmentParams(NamedTuple):
    scale: float
    top: int
    left: int
    flip: bool
    out_h: int
    out_w: int


def draw_augment(h: int, w: int, rng: np.random.Generator, out_size: Optional[Tuple[int, int]] = None,
                 scale_range: Tuple[float, float] = SCALE_RANGE) -> AugmentParams:
    out_h, out_w = out_size or (h, w)
    scale = float(rng.uniform(*scale_range))
    sh, sw = int(round(h * scale)), int(round(w * scale))
    top = int(rng.integers(0, max(sh - out_h, 0) + 1))
    left = int(rng.integers(0, max(sw - out_w, 0) + 1))
    return AugmentParams(scale, top, left, bool(rng.random() < 0.5), out_h, out_w)


def source_coords(params: AugmentParams, h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """输出像素 -> 原图像素坐标（缩放、裁剪、翻转合成一张坐标图，三张图共用）。"""
    sh, sw = int(round(h * params.scale)), int(round(w * params.scale))
    if params.out_h > sh or params.out_w > sw or params.top + params.out_h > sh or params.left + params.out_w > sw:
        raise DataError(f"裁剪 {params.out_h}x{params.out_w}@({params.top},{params.left}) 超出缩放后图像 {sh}x{sw}")
    rows = params.top + np.arange(params.out_h)
    cols = params.left + np.arange(params.out_w)
    if params.flip:
        cols = cols[::-1]
    ys = (rows + 0.5) * h / sh - 0.5
    xs = (cols + 0.5) * w / sw - 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def apply_augment(sample: RgbdSample, params: AugmentParams) -> RgbdSample:
    h, w = sample.height, sample.width
    ys, xs = source_coords(params, h, w)
    yi = np.clip(np.floor(ys + 0.5).astype(np.int64), 0, h - 1)
    xi = np.clip(np.floor(xs + 0.5).astype(np.int64), 0, w - 1)
    coords = np.stack([ys, xs])
    rgb = np.stack(
        [map_coordinates(sample.rgb[..., c], coords, order=1, mode="nearest") for c in range(3)], axis=-1
    ).astype(np.float32)
    return sample.replace(rgb=rgb, depth=sample.depth[yi, xi], label=sample.label[yi, xi])


def augment(sample: RgbdSample, rng: np.random.Generator, out_size: Optional[Tuple[int, int]] = None) -> RgbdSample:
    return apply_augment(sample, draw_augment(sample.height, sample.width, rng, out_size))


# ---------------------------------------------------------------------------
# 单步训练
# ---------------------------------------------------------------------------

def item_loss(model: DiffSegModel, sample: RgbdSample, t: float, eps: np.ndarray) -> Tensor:
    rgb, depth = model.inputs(sample.rgb, sample.depth)
    cond = model.condition(rgb, depth)
    _, h4, w4 = cond.shape
    y_enc = model.codebook.encode(resize_labels(sample.label, h4, w4))
    y_t = corrupt(y_enc, t, eps, model.schedule)
    logits = model.decoder(y_t, cond, t)
    K = logits.shape[0]
    return T.cross_entropy(T.reshape(logits, (K, sample.height * sample.width)), sample.label.ravel())


def train_step(batch: List[RgbdSample], model: DiffSegModel, opt: AdamW, lr: float,
               rng: np.random.Generator, grad_clip: float = 1.0) -> float:
    """每个样本独立采样 t~U(0,1) 与 eps~N(0,1)，batch 内 loss 取平均。"""
    D = model.codebook.dim
    with Tape() as tape:
        total = None
        for sample in batch:
            t = float(rng.uniform())
            eps = rng.standard_normal((D, sample.height // 4, sample.width // 4))
            loss = item_loss(model, sample, t, eps)
            total = loss if total is None else total + loss
        loss = total * (1.0 / len(batch))
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"[训练] loss 非有限: {value}")
    opt.zero_grad()
    tape.backward(loss)
    clip_grad_norm(opt.params, grad_clip)
    opt.step(lr)
    return value


def _augmented(sample: RgbdSample, seed: int, epoch: int, enabled: bool) -> RgbdSample:
    if not enabled:
        return sample
    return augment(sample, np.random.default_rng([seed, epoch, sample.sample_id]))


def fit(samples: List[RgbdSample], model_cfg: ModelConfig, cfg: TrainConfig, ckpt_path: str,
        log_path: Optional[str] = None) -> Tuple[DiffSegModel, pd.DataFrame]:
    if not samples:
        raise DataError("训练集为空")
    model = DiffSegModel(model_cfg, seed=cfg.seed)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    logger.info(f"[训练] 样本 {len(samples)}, epoch {cfg.epochs}, 每 epoch {steps_per_epoch} 步, lr0={cfg.lr}")

    rows = []
    step = 0
    with ThreadPoolExecutor(max_workers=cfg.num_workers) as pool:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
            epoch_losses = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = list(pool.map(lambda i: _augmented(samples[i], cfg.seed, epoch, cfg.augment), idx))
                lr = lr_at(step, total, cfg)
                loss = train_step(batch, model, opt, lr, np.random.default_rng([cfg.seed, step, 1]), cfg.grad_clip)
                rows.append({"epoch": epoch + 1, "step": step, "loss": loss, "lr": lr})
                epoch_losses.append(loss)
                step += 1
            logger.info(f"[训练] epoch {epoch + 1}/{cfg.epochs}: loss={np.mean(epoch_losses):.4f}, lr={lr:.2e}")

            if (epoch + 1) % cfg.ckpt_every == 0 or epoch + 1 == cfg.epochs:
                save_checkpoint(ckpt_path, model.state_dict(), checkpoint_metadata(model_cfg, cfg.seed, epoch + 1))
                if log_path:
                    _write_log(rows, log_path)

    log = pd.DataFrame(rows, columns=["epoch", "step", "loss", "lr"])
    if log_path:
        _write_log(rows, log_path)
    logger.info(f"[训练] 完成，loss 尖峰 {count_loss_spikes(log['loss'].tolist())} 次")
    return model, log


def _write_log(rows: list, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(rows, columns=["epoch", "step", "loss", "lr"]).to_csv(path, index=False)
