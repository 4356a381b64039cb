# app/tasks/task_utils.py
import os
from typing import Dict, Iterable, Type, TypeVar

from pydantic import BaseModel, ValidationError

from app.core.exceptions import UsageError

M = TypeVar("M", bound=BaseModel)


def parse_size(text: str) -> tuple:
    """'64x48' -> (64, 48)，即 (高, 宽)；单个数字表示正方形。"""
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError as e:
        raise UsageError(f"尺寸格式应为 HxW, 得到 {text}") from e
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) <= 0:
        raise UsageError(f"尺寸格式应为 HxW, 得到 {text}")
    return dims[0], dims[1]


def load_config_file(path: str) -> Dict[str, str]:
    """key=value 文本，# 开头为注释，空行忽略。"""
    if not os.path.isfile(path):
        raise UsageError(f"配置文件不存在: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno} 不是 key=value 格式: {raw.rstrip()}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise UsageError(f"{path}:{lineno} 缺少 key")
            values[key.replace("-", "_")] = value
    return values


def check_known_keys(values: Dict[str, str], models: Iterable[Type[BaseModel]]):
    known = set()
    for model in models:
        known.update(model.model_fields)
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"未知的配置项: {unknown}")


def build_config(model: Type[M], file_values: Dict[str, str], flags: Dict[str, object]) -> M:
    """优先级: 命令行参数 > 配置文件 > settings 默认值。"""
    data = {}
    for key in model.model_fields:
        if key in file_values:
            raw = file_values[key]
            # 列表字段在配置文件里写成逗号分隔
            data[key] = [s.strip() for s in raw.split(",")] if "," in raw else raw
        if flags.get(key) is not None:
            data[key] = flags[key]
    try:
        return model(**data)
    except ValidationError as e:
        raise UsageError(f"{model.__name__} 参数非法: {e}") from e
