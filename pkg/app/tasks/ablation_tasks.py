# app/tasks/ablation_tasks.py
"""噪声调度 / 标签缩放 s 的消融：每个取值训练、采样、评估一次，结果一行。"""
import logging
import os
from typing import List, Optional

import pandas as pd

from app.core.exceptions import UsageError
from app.core.model_config import ABLATION_SCALES, ABLATION_SCHEDULES, TEST_SPLIT, TRAIN_SPLIT, ScheduleKind
from app.models.run_config import ModelConfig, SamplerConfig, TrainConfig
from app.services.dataset_io import load_dataset, resolve_split
from app.services.diffusion import sample
from app.services.metrics import count_loss_spikes, mean_iou
from app.tasks.train_tasks import fit

logger = logging.getLogger("AblationTask")

AXES = ("schedule", "scale")


def default_values(axis: str) -> list:
    return list(ABLATION_SCHEDULES) if axis == "schedule" else list(ABLATION_SCALES)


def _variant(model_cfg: ModelConfig, axis: str, value) -> ModelConfig:
    try:
        if axis == "schedule":
            return model_cfg.model_copy(update={"schedule": ScheduleKind(value)})
        if axis == "scale":
            scale = float(value)
            if scale <= 0:
                raise ValueError(value)
            return model_cfg.model_copy(update={"scale": scale})
    except ValueError as e:
        raise UsageError(f"消融取值非法: {axis}={value}") from e
    raise UsageError(f"未知的消融轴 {axis}，可选 {AXES}")


def run_ablation_task(data_dir: str, out_dir: str, axis: str, values: Optional[List] = None,
                      model_cfg: Optional[ModelConfig] = None, train_cfg: Optional[TrainConfig] = None,
                      sampler_cfg: Optional[SamplerConfig] = None) -> pd.DataFrame:
    if axis not in AXES:
        raise UsageError(f"未知的消融轴 {axis}，可选 {AXES}")
    values = list(values) if values else default_values(axis)
    variants = [(v, _variant(model_cfg or ModelConfig(), axis, v)) for v in values]
    train_cfg = train_cfg or TrainConfig()
    sampler_cfg = sampler_cfg or SamplerConfig()

    train_set, manifest = load_dataset(resolve_split(data_dir, TRAIN_SPLIT))
    test_set, _ = load_dataset(resolve_split(data_dir, TEST_SPLIT))
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for value, cfg in variants:
        tag = f"{axis}_{value}"
        logger.info(f"[消融] 开始 {tag}")
        model, log = fit(train_set, cfg, train_cfg, os.path.join(out_dir, f"{tag}.ddsg"),
                         os.path.join(out_dir, f"{tag}_loss.csv"))
        preds = [sample(model, s.rgb, s.depth, sampler_cfg, sample_id=s.sample_id) for s in test_set]
        report = mean_iou(preds, [s.label for s in test_set], len(manifest.classes))
        rows.append({
            "axis": axis,
            "value": value,
            "miou": report.mean_iou,
            "final_loss": float(log["loss"].iloc[-1]),
            "spikes": count_loss_spikes(log["loss"].tolist()),
        })
        logger.info(f"[消融] {tag}: mIoU={report.mean_iou:.4f}")

    table = pd.DataFrame(rows)
    path = os.path.join(out_dir, f"ablation_{axis}.csv")
    table.to_csv(path, index=False)
    print(table.to_string(index=False))
    logger.info(f"[消融] 结果已写入 {path}")
    return table
