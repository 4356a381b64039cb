# app/models/eval_report.py
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict


class EvalReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    # 不参与平均的类别（不在 gt∪pred 中或被忽略）为 None
    per_class_iou: List[Optional[float]]
    mean_iou: float
    confusion: np.ndarray
    invalid_fraction: Dict[int, float] = {}
    class_names: Optional[List[str]] = None

    def to_frame(self) -> pd.DataFrame:
        names = self.class_names or [f"class{k}" for k in range(len(self.per_class_iou))]
        rows = [{"class": name, "iou": iou} for name, iou in zip(names, self.per_class_iou)]
        rows.append({"class": "mean", "iou": self.mean_iou})
        return pd.DataFrame(rows)
