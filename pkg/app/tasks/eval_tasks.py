# app/tasks/eval_tasks.py
import logging
import os
from typing import List, Optional

from app.core.model_config import INVALID_SUBSET_FRACTION, LOW_LIGHT_GAMMA, SYNTHETIC_DATASET, TEST_SPLIT
from app.models.eval_report import EvalReport
from app.services.dataset_io import load_dataset, load_labels, resolve_split
from app.services.metrics import class_ids, invalid_fractions, invalid_subset, mean_iou, small_objects_config

logger = logging.getLogger("EvalTask")

SUBSETS = ("invalid", "lowlight", "small")


def run_eval_task(pred_dir: str, gt_dir: str, subset: Optional[str] = None,
                  ignore_classes: Optional[List[str]] = None, dataset_name: str = SYNTHETIC_DATASET,
                  fraction: float = INVALID_SUBSET_FRACTION, report_path: Optional[str] = None,
                  gamma: float = LOW_LIGHT_GAMMA) -> EvalReport:
    samples, manifest = load_dataset(resolve_split(gt_dir, TEST_SPLIT))
    ignore_names = list(ignore_classes or [])

    if subset == "invalid":
        samples = invalid_subset(samples, fraction)
        logger.info(f"[评估] 无效深度子集: 取前 {len(samples)} 个样本")
    elif subset == "lowlight":
        logger.info(f"[评估] 低光照子集 (γ={gamma}): 预测应由 predict --lowlight 生成，这里只评分")
    elif subset == "small":
        ignore_names = small_objects_config(dataset_name, ignore_classes)
        logger.info(f"[评估] 小物体子集: 忽略 {ignore_names}")

    ids = [s.sample_id for s in samples]
    preds = load_labels(resolve_split(pred_dir, TEST_SPLIT), ids)
    report = mean_iou([preds[i] for i in ids], [s.label for s in samples], len(manifest.classes),
                      ignore_classes=class_ids(ignore_names, manifest.classes), class_names=manifest.classes)
    report.invalid_fraction = invalid_fractions(samples)

    table = report.to_frame()
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if report_path:
        os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
        table.to_csv(report_path, index=False)
        logger.info(f"[评估] 报告已写入 {report_path}")
    logger.info(f"[评估] mIoU = {report.mean_iou:.4f}")
    return report
