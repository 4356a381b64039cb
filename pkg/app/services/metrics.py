# app/services/metrics.py
"""mIoU 评估、三个挑战子集（无效深度 / 低光照 / 小物体）与 loss 尖峰统计。"""
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.config import settings
from app.core.exceptions import DataError, MetricError, ShapeError, UsageError
from app.core.model_config import (IGNORE_ID, INVALID_SUBSET_FRACTION, LOW_LIGHT_GAMMA, SMALL_OBJECT_IGNORES,
                                   SYNTHETIC_DATASET)
from app.models.eval_report import EvalReport
from app.models.sample import RgbdSample

logger = logging.getLogger(__name__)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """行为 gt，列为 pred；ignore_id 像素不计入。"""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    keep = gt != ignore_id
    pred, gt = pred[keep], gt[keep]
    if np.any((gt < 0) | (gt >= num_classes)):
        raise DataError(f"真值标签越界: 允许 0..{num_classes - 1} 或 {ignore_id}")
    if np.any((pred < 0) | (pred >= num_classes)):
        raise DataError(f"预测标签越界: 允许 0..{num_classes - 1}")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def mean_iou(preds, gts, num_classes: int, ignore_id: int = IGNORE_ID,
             ignore_classes: Optional[Sequence[int]] = None,
             class_names: Optional[List[str]] = None) -> EvalReport:
    """
    对整个数据集累积一个混淆矩阵，IoU = TP/(TP+FP+FN)。
    平均只覆盖在 gt∪pred 中出现过的类别，并排除 ignore_classes。
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise ShapeError(f"预测数 {len(preds)} 与真值数 {len(gts)} 不一致")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"预测 {np.shape(p)} 与真值 {np.shape(g)} 形状不一致")
        conf += confusion_matrix(p, g, num_classes, ignore_id)
    if conf.sum() == 0:
        raise MetricError("所有像素都被忽略，无法计算 mIoU")

    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    skip = set(ignore_classes or [])
    per_class: List[Optional[float]] = []
    scored = []
    for k in range(num_classes):
        if denom[k] == 0:
            per_class.append(None)
            continue
        iou = float(tp[k] / denom[k])
        per_class.append(iou)
        if k not in skip:
            scored.append(iou)
    if not scored:
        raise MetricError("排除忽略类别后没有可评估的类别")
    return EvalReport(per_class_iou=per_class, mean_iou=float(np.mean(scored)), confusion=conf,
                      class_names=class_names)


def low_light(sample: RgbdSample, gamma: float = LOW_LIGHT_GAMMA) -> RgbdSample:
    """I_dark = I^γ，只改 rgb。"""
    return sample.replace(rgb=np.power(sample.rgb, gamma).astype(np.float32))


def invalid_subset(samples: List[RgbdSample], fraction: float = INVALID_SUBSET_FRACTION) -> List[RgbdSample]:
    """按无效深度比例降序（同比例按 sample_id）取前 ⌈fraction·N⌉ 个。"""
    if not samples:
        raise DataError("数据集为空，无法构造无效深度子集")
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"fraction 必须在 (0,1], 得到 {fraction}")
    n = math.ceil(round(fraction * len(samples), 9))
    ranked = sorted(samples, key=lambda s: (-s.invalid_fraction(), s.sample_id))
    return ranked[:n]


def small_objects_config(dataset_name: str, explicit: Optional[List[str]] = None) -> List[str]:
    if explicit is not None:
        return list(explicit)
    key = dataset_name.lower()
    if key == SYNTHETIC_DATASET:
        return list(settings.SYNTH_SMALL_OBJECT_IGNORES)
    if key not in SMALL_OBJECT_IGNORES:
        raise UsageError(f"未知数据集 {dataset_name}，请显式给出要忽略的类别")
    return list(SMALL_OBJECT_IGNORES[key])


def class_ids(names: List[str], classes: List[str]) -> List[int]:
    """把类别名映射到 id；清单里没有的名字跳过。"""
    ids = []
    for name in names:
        if name in classes:
            ids.append(classes.index(name))
        else:
            logger.warning(f"[评估] 类别 {name} 不在数据集清单中，已跳过")
    return ids


def loss_spikes(losses: Sequence[float], window: int = 20, factor: float = 2.0) -> List[int]:
    """loss 超过前 window 步中位数 factor 倍的步下标。"""
    losses = np.asarray(losses, dtype=np.float64)
    out = []
    for i in range(window, len(losses)):
        if losses[i] > factor * np.median(losses[i - window:i]):
            out.append(i)
    return out


def count_loss_spikes(losses: Sequence[float], window: int = 20, factor: float = 2.0) -> int:
    return len(loss_spikes(losses, window, factor))


def invalid_fractions(samples: List[RgbdSample]) -> Dict[int, float]:
    return {s.sample_id: s.invalid_fraction() for s in samples}
