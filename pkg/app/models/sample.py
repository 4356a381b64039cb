# app/models/sample.py
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.model_config import IGNORE_ID


class RgbdSample(BaseModel):
    """
    一组配对的 RGB-D 样本。
    rgb: float32 [h,w,3]，取值 [0,1]；depth: uint16 毫米，0 表示无效；label: uint8，255 表示忽略。
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rgb: np.ndarray
    depth: np.ndarray
    label: np.ndarray
    sample_id: int = 0

    @model_validator(mode="after")
    def _check_dims(self):
        h, w = self.depth.shape[:2]
        if self.rgb.shape != (h, w, 3) or self.label.shape != (h, w) or self.depth.ndim != 2:
            raise ValueError(
                f"样本尺寸不一致: rgb {self.rgb.shape}, depth {self.depth.shape}, label {self.label.shape}")
        return self

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def invalid_fraction(self) -> float:
        return float(np.mean(self.depth == 0))

    def replace(self, **changes) -> "RgbdSample":
        data = {"rgb": self.rgb, "depth": self.depth, "label": self.label, "sample_id": self.sample_id}
        data.update(changes)
        return RgbdSample(**data)


class SceneObject(BaseModel):
    """场景中的一个物体：矩形或椭圆，深度为常数平面（越小越近）。"""
    class_id: int
    shape: str = "rect"
    cx: float
    cy: float
    half_w: float
    half_h: float
    depth: float
    brightness: float = 1.0


class SceneSpec(BaseModel):
    num_classes: int = 6
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 5
    shapes: List[str] = ["rect", "ellipse"]
    # 物体深度与背景深度（毫米）
    object_depth: Tuple[float, float] = (1000.0, 3500.0)
    background_depth: Tuple[float, float] = (4000.0, 5000.0)
    # 传感器随机丢失：每张图以 invalid_rate 的概率出现一块无效区域，面积占整图的比例均匀取自 invalid_size
    invalid_rate: float = 0.3
    invalid_size: Tuple[float, float] = (0.02, 0.1)
    # 反光类物体的无效覆盖比例
    reflective_classes: Optional[List[int]] = None
    reflective_cover: Tuple[float, float] = (0.3, 0.9)
    noise_std: float = 0.02

    @field_validator("num_classes")
    @classmethod
    def _at_least_background(cls, v: int) -> int:
        if v < 1 or v > IGNORE_ID:
            raise ValueError(f"类别数必须在 1..{IGNORE_ID - 1} 之间, 得到 {v}")
        return v

    @field_validator("invalid_rate")
    @classmethod
    def _rate_range(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"invalid_rate 必须在 [0,1], 得到 {v}")
        return v

    @field_validator("invalid_size", "reflective_cover")
    @classmethod
    def _fraction_range(cls, v):
        lo, hi = v
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"比例区间非法: {v}")
        return v

    @model_validator(mode="after")
    def _check_counts(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError(f"物体数量区间非法: {self.min_objects}..{self.max_objects}")
        if self.height < 4 or self.width < 4:
            raise ValueError("图像尺寸过小")
        return self


class DatasetManifest(BaseModel):
    classes: List[str]
    count: int = Field(ge=0)
    width: int
    height: int
    seed: int = 0
