# app/services/scene_synth.py
"""
合成 RGB-D 室内场景：背景平面 + 若干矩形/椭圆物体。
物体按深度从远到近绘制，近处覆盖远处；反光类物体和随机的传感器丢失区域写成无效深度 0。
"""
import logging
import math
from typing import List

import numpy as np

from app.core.model_config import PALETTE, SYNTH_CLASS_COLORS, SYNTH_CLASS_NAMES, SYNTH_REFLECTIVE
from app.models.sample import RgbdSample, SceneObject, SceneSpec
from app.services.dataset_io import rgb_from_uint8, rgb_to_uint8

logger = logging.getLogger(__name__)


def class_names(num_classes: int) -> List[str]:
    return [SYNTH_CLASS_NAMES[k] if k < len(SYNTH_CLASS_NAMES) else f"class{k}" for k in range(num_classes)]


def class_color(k: int) -> np.ndarray:
    color = SYNTH_CLASS_COLORS[k] if k < len(SYNTH_CLASS_COLORS) else PALETTE[k % len(PALETTE)]
    return np.asarray(color, dtype=np.float64) / 255.0


def reflective_ids(spec: SceneSpec) -> List[int]:
    if spec.reflective_classes is not None:
        return list(spec.reflective_classes)
    return [k for k, name in enumerate(class_names(spec.num_classes)) if name in SYNTH_REFLECTIVE]


def _blob(candidates: np.ndarray, cy: float, cx: float, count: int, width: int) -> np.ndarray:
    """candidates 为扁平像素下标；取离 (cy,cx) 最近的 count 个。"""
    ys, xs = np.divmod(candidates, width)
    dist = (ys + 0.5 - cy) ** 2 + (xs + 0.5 - cx) ** 2
    order = np.argsort(dist, kind="stable")
    return candidates[order[:count]]


def shape_mask(obj: SceneObject, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dx = (xx + 0.5 - obj.cx) / max(obj.half_w, 1e-6)
    dy = (yy + 0.5 - obj.cy) / max(obj.half_h, 1e-6)
    if obj.shape == "ellipse":
        return dx * dx + dy * dy <= 1.0
    return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)


def sample_objects(spec: SceneSpec, rng: np.random.Generator) -> List[SceneObject]:
    if spec.num_classes < 2:
        return []
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    h, w = spec.height, spec.width
    objects = []
    for _ in range(n):
        cls = int(rng.integers(1, spec.num_classes))
        objects.append(SceneObject(
            class_id=cls,
            shape=spec.shapes[(cls - 1) % len(spec.shapes)],
            cx=float(rng.uniform(0.1, 0.9) * w),
            cy=float(rng.uniform(0.1, 0.9) * h),
            half_w=float(rng.uniform(0.08, 0.25) * w),
            half_h=float(rng.uniform(0.08, 0.25) * h),
            depth=float(rng.uniform(*spec.object_depth)),
            brightness=float(rng.uniform(0.8, 1.2)),
        ))
    return objects


def render_scene(spec: SceneSpec, objects: List[SceneObject], rng: np.random.Generator,
                 sample_id: int = 0) -> RgbdSample:
    h, w = spec.height, spec.width
    far = rng.uniform(*spec.background_depth)
    # 背景：上远下近的斜平面
    rows = np.linspace(0.0, 1.0, h)[:, None]
    depth = np.broadcast_to(far - 400.0 * rows, (h, w)).astype(np.float64).copy()
    label = np.zeros((h, w), dtype=np.uint8)
    rgb = np.broadcast_to(class_color(0) * rng.uniform(0.8, 1.2), (h, w, 3)).copy()
    owner = np.full((h, w), -1, dtype=np.int64)

    order = sorted(range(len(objects)), key=lambda i: -objects[i].depth)
    for i in order:
        obj = objects[i]
        m = shape_mask(obj, h, w)
        label[m] = obj.class_id
        depth[m] = obj.depth
        rgb[m] = class_color(obj.class_id) * obj.brightness
        owner[m] = i

    invalid = np.zeros(h * w, dtype=bool)
    reflective = set(reflective_ids(spec))
    for i, obj in enumerate(objects):
        if obj.class_id not in reflective:
            continue
        visible = np.flatnonzero(owner.ravel() == i)
        if visible.size == 0:
            continue
        cover = rng.uniform(*spec.reflective_cover)
        count = math.ceil(cover * visible.size)
        invalid[_blob(visible, obj.cy, obj.cx, count, w)] = True

    if rng.random() < spec.invalid_rate:
        frac = rng.uniform(*spec.invalid_size)
        count = math.ceil(frac * h * w)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        invalid[_blob(np.arange(h * w), cy, cx, count, w)] = True

    depth = np.round(np.clip(depth, 1.0, 65535.0)).astype(np.uint16)
    depth[invalid.reshape(h, w)] = 0

    if spec.noise_std > 0:
        rgb = rgb + rng.normal(0.0, spec.noise_std, size=rgb.shape)
    rgb = rgb_from_uint8(rgb_to_uint8(rgb))
    return RgbdSample(rgb=rgb, depth=depth, label=label, sample_id=sample_id)


def synth_scene(spec: SceneSpec, rng: np.random.Generator, sample_id: int = 0) -> RgbdSample:
    return render_scene(spec, sample_objects(spec, rng), rng, sample_id)


def synth_split(spec: SceneSpec, count: int, seed: int, split_index: int = 0) -> List[RgbdSample]:
    """每个样本使用独立的 rng([seed, split, i])，与生成顺序无关。"""
    return [synth_scene(spec, np.random.default_rng([seed, split_index, i]), sample_id=i) for i in range(count)]
