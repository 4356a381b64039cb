# app/tasks/synth_tasks.py
import logging
import os

import numpy as np
import pandas as pd

from app.core.model_config import TEST_SPLIT, TRAIN_SPLIT
from app.models.sample import DatasetManifest, SceneSpec
from app.services.dataset_io import save_dataset
from app.services.scene_synth import class_names, synth_split

logger = logging.getLogger("SynthTask")


def run_synth_task(out_dir: str, spec: SceneSpec, train_count: int, test_count: int, seed: int) -> pd.DataFrame:
    """生成 train/ 与 test/ 两个划分，返回每个划分的无效深度比例统计。"""
    names = class_names(spec.num_classes)
    rows = []
    for split_index, (split, count) in enumerate(((TRAIN_SPLIT, train_count), (TEST_SPLIT, test_count))):
        samples = synth_split(spec, count, seed, split_index)
        manifest = DatasetManifest(classes=names, count=count, width=spec.width, height=spec.height, seed=seed)
        save_dataset(os.path.join(out_dir, split), samples, manifest)
        fractions = np.array([s.invalid_fraction() for s in samples]) if samples else np.zeros(1)
        rows.append({
            "split": split,
            "count": count,
            "mean_invalid": float(fractions.mean()),
            "max_invalid": float(fractions.max()),
            "with_invalid": int((fractions > 0).sum()),
        })
    summary = pd.DataFrame(rows)
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    logger.info(f"[数据] 合成数据集已写入 {out_dir}")
    return summary
