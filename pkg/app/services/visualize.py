# app/services/visualize.py
"""预测掩码着色与可变形采样点叠加图（PPM 输出）。"""
import logging
from typing import List

import numpy as np

from app.core.model_config import IGNORE_COLOR, IGNORE_ID, PALETTE, STAGE_POINT_COLORS
from app.services.encoder import normalize_depth

logger = logging.getLogger(__name__)

_PALETTE = np.asarray(PALETTE, dtype=np.uint8)


def colorize(label: np.ndarray) -> np.ndarray:
    label = np.asarray(label)
    out = _PALETTE[label.astype(np.int64) % len(_PALETTE)]
    out[label == IGNORE_ID] = IGNORE_COLOR
    return out


def depth_to_gray(depth: np.ndarray) -> np.ndarray:
    gray = np.round(normalize_depth(depth)[0] * 255.0).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=-1)


def overlay_points(depth: np.ndarray, trace: List[List[np.ndarray]], radius: int = 1) -> np.ndarray:
    """
    在深度灰度图上画出每个 stage 的采样点。trace[stage] 是该 stage 各 block 的 [G,2] 归一化坐标。
    """
    img = depth_to_gray(depth)
    h, w = img.shape[:2]
    for stage, blocks in enumerate(trace):
        color = STAGE_POINT_COLORS[stage % len(STAGE_POINT_COLORS)]
        for points in blocks:
            px = np.round(((points[:, 0] + 1.0) * w - 1.0) / 2.0).astype(np.int64)
            py = np.round(((points[:, 1] + 1.0) * h - 1.0) / 2.0).astype(np.int64)
            for x, y in zip(px, py):
                img[max(y - radius, 0):min(y + radius + 1, h), max(x - radius, 0):min(x + radius + 1, w)] = color
    return img
