# app/tasks/predict_tasks.py
import logging
import os
from typing import Dict, Optional

import numpy as np

from app.core.model_config import LOW_LIGHT_GAMMA, TEST_SPLIT
from app.models.run_config import SamplerConfig
from app.services.dataset_io import load_dataset, resolve_split, save_labels, write_ppm
from app.services.diffusion import sample
from app.services.metrics import low_light
from app.services.segmenter import load_model
from app.services.visualize import colorize, overlay_points

logger = logging.getLogger("PredictTask")


def run_predict_task(ckpt_path: str, data_dir: str, out_dir: str, cfg: SamplerConfig,
                     viz_dir: Optional[str] = None, lowlight: bool = False,
                     gamma: float = LOW_LIGHT_GAMMA) -> Dict[int, np.ndarray]:
    """对数据目录中的每个样本采样，写出预测标签 PGM；可选写出着色掩码与采样点叠加图。"""
    model, _ = load_model(ckpt_path)
    split_dir = resolve_split(data_dir, TEST_SPLIT)
    samples, _ = load_dataset(split_dir)
    logger.info(f"[采样] {len(samples)} 张图, steps={cfg.steps}, td={cfg.td}, seed={cfg.seed}"
                + (f", 低光照 γ={gamma}" if lowlight else ""))
    if viz_dir:
        os.makedirs(viz_dir, exist_ok=True)

    preds = {}
    for s in samples:
        if lowlight:
            s = low_light(s, gamma)
        trace = [] if viz_dir else None
        pred = sample(model, s.rgb, s.depth, cfg, trace=trace, sample_id=s.sample_id)
        preds[s.sample_id] = pred
        logger.debug(f"[采样] 样本 {s.sample_id} 完成")
        if viz_dir:
            write_ppm(os.path.join(viz_dir, f"{s.sample_id:04d}_mask.ppm"), colorize(pred))
            write_ppm(os.path.join(viz_dir, f"{s.sample_id:04d}_points.ppm"), overlay_points(s.depth, trace))

    save_labels(out_dir, preds)
    logger.info(f"[采样] 预测结果已写入 {out_dir}")
    return preds
