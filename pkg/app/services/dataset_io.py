# app/services/dataset_io.py
"""
数据集目录读写：
  NNNN_rgb.ppm   P6 8 位
  NNNN_depth.pgm P5 16 位大端（0 为无效）
  NNNN_label.pgm P5 8 位（255 为忽略）
  manifest.json  {classes, count, width, height, seed}
"""
import json
import logging
import os
from typing import Dict, List, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import DataError
from app.core.model_config import DEPTH_PATTERN, LABEL_PATTERN, MANIFEST_NAME, RGB_PATTERN
from app.models.sample import DatasetManifest, RgbdSample

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def rgb_to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def rgb_from_uint8(data: np.ndarray) -> np.ndarray:
    return (data.astype(np.float64) / 255.0).astype(np.float32)


def _write_netpbm(path: str, magic: bytes, arr: np.ndarray, maxval: int):
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def _read_header(buf: bytes, path: str):
    """解析 magic / 宽 / 高 / maxval，支持 # 注释；返回 (magic, w, h, maxval, 数据起始偏移)。"""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise DataError(f"文件头不完整: {path}")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # maxval 之后恰好一个空白字符
    pos += 1
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataError(f"文件头字段非法: {path}") from e
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise DataError(f"文件头数值非法: {path} ({w}x{h}, maxval={maxval})")
    return magic, w, h, maxval, pos


def write_ppm(path: str, rgb_u8: np.ndarray):
    _write_netpbm(path, b"P6", np.ascontiguousarray(rgb_u8, dtype=np.uint8), 255)


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    magic, w, h, maxval, pos = _read_header(buf, path)
    if magic != b"P6" or maxval != 255:
        raise DataError(f"只支持 8 位 P6 PPM: {path}")
    data = buf[pos:]
    if len(data) != w * h * 3:
        raise DataError(f"PPM 数据长度与尺寸不符: {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm(path: str, arr: np.ndarray, sixteen_bit: bool = False):
    if sixteen_bit:
        _write_netpbm(path, b"P5", np.ascontiguousarray(arr, dtype=">u2"), 65535)
    else:
        _write_netpbm(path, b"P5", np.ascontiguousarray(arr, dtype=np.uint8), 255)


def read_pgm(path: str) -> np.ndarray:
    """8 位返回 uint8，16 位（大端）返回 uint16。"""
    with open(path, "rb") as f:
        buf = f.read()
    magic, w, h, maxval, pos = _read_header(buf, path)
    if magic != b"P5":
        raise DataError(f"不是 P5 PGM: {path}")
    data = buf[pos:]
    if maxval < 256:
        if len(data) != w * h:
            raise DataError(f"PGM 数据长度与尺寸不符: {path}")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
    if len(data) != w * h * 2:
        raise DataError(f"16 位 PGM 数据长度与尺寸不符: {path}")
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------------
# 数据集目录
# ---------------------------------------------------------------------------

def resolve_split(root: str, split: str) -> str:
    """root 下存在 split 子目录时返回它，否则返回 root 本身。"""
    candidate = os.path.join(root, split)
    return candidate if os.path.isdir(candidate) else root


def save_sample(directory: str, sample: RgbdSample):
    i = sample.sample_id
    write_ppm(os.path.join(directory, RGB_PATTERN.format(i)), rgb_to_uint8(sample.rgb))
    write_pgm(os.path.join(directory, DEPTH_PATTERN.format(i)), sample.depth, sixteen_bit=True)
    write_pgm(os.path.join(directory, LABEL_PATTERN.format(i)), sample.label)


def save_dataset(directory: str, samples: List[RgbdSample], manifest: DatasetManifest):
    os.makedirs(directory, exist_ok=True)
    for sample in samples:
        save_sample(directory, sample)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(), f, indent=2, ensure_ascii=False)
    logger.info(f"[数据] 已写入 {len(samples)} 个样本 -> {directory}")


def load_manifest(directory: str) -> DatasetManifest:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise DataError(f"找不到清单文件: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return DatasetManifest(**json.load(f))
    except (json.JSONDecodeError, ValidationError, TypeError) as e:
        raise DataError(f"清单文件格式错误: {path}: {e}") from e


def load_sample(directory: str, i: int) -> RgbdSample:
    paths = [os.path.join(directory, p.format(i)) for p in (RGB_PATTERN, DEPTH_PATTERN, LABEL_PATTERN)]
    for p in paths:
        if not os.path.isfile(p):
            raise DataError(f"缺少样本文件: {p}")
    rgb = rgb_from_uint8(read_ppm(paths[0]))
    depth = read_pgm(paths[1]).astype(np.uint16)
    label = read_pgm(paths[2])
    if label.dtype != np.uint8:
        raise DataError(f"标签必须是 8 位 PGM: {paths[2]}")
    try:
        return RgbdSample(rgb=rgb, depth=depth, label=label, sample_id=i)
    except ValidationError as e:
        raise DataError(f"样本 {i} 尺寸不一致: {e}") from e


def load_dataset(directory: str) -> Tuple[List[RgbdSample], DatasetManifest]:
    manifest = load_manifest(directory)
    samples = [load_sample(directory, i) for i in range(manifest.count)]
    for s in samples:
        if (s.height, s.width) != (manifest.height, manifest.width):
            raise DataError(f"样本 {s.sample_id} 尺寸 {s.height}x{s.width} 与清单 "
                            f"{manifest.height}x{manifest.width} 不符")
    logger.info(f"[数据] 已读取 {len(samples)} 个样本 <- {directory}")
    return samples, manifest


def save_labels(directory: str, labels: Dict[int, np.ndarray]):
    os.makedirs(directory, exist_ok=True)
    for i, label in labels.items():
        write_pgm(os.path.join(directory, LABEL_PATTERN.format(i)), label)


def load_labels(directory: str, ids: List[int]) -> Dict[int, np.ndarray]:
    out = {}
    for i in ids:
        path = os.path.join(directory, LABEL_PATTERN.format(i))
        if not os.path.isfile(path):
            raise DataError(f"缺少标签文件: {path}")
        out[i] = read_pgm(path)
    return out
